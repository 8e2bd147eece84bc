#include "cellprompt/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "cellprompt/error.hpp"

namespace cellprompt {

namespace {

constexpr int kDecodeChunk = 64;

// Ids present in `labels`, as a presence table indexed by id.
std::vector<bool> present_ids(const LabelMap& labels, std::size_t count) {
  std::vector<bool> seen(count + 1, false);
  for (auto v : labels.values())
    if (v > 0) seen[static_cast<std::size_t>(v)] = true;
  return seen;
}

template <class T>
void keep_where(std::vector<T>& items, const std::vector<bool>& seen) {
  std::vector<T> out;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (seen[i + 1]) out.push_back(std::move(items[i]));
  items = std::move(out);
}

} // namespace

// ---- config ------------------------------------------------------------------

std::vector<FieldIssue> GridConfig::issues() const {
  std::vector<FieldIssue> out;
  if (points_per_side < 1) out.push_back({"points_per_side", "must be at least 1"});
  if (!(cell_probability_threshold >= 0.0 && cell_probability_threshold <= 1.0))
    out.push_back({"cell_probability_threshold", "must lie in [0,1]"});
  if (!(nms_tau > 0.0 && nms_tau < 1.0)) out.push_back({"nms_tau", "must lie in (0,1)"});
  if (!std::isfinite(mask_binarize_threshold)) out.push_back({"mask_binarize_threshold", "must be finite"});
  if (!(stability_offset > 0.0 && std::isfinite(stability_offset)))
    out.push_back({"stability_offset", "must be positive"});
  return out;
}

void GridConfig::validate() const {
  auto found = issues();
  if (!found.empty()) throw ConfigError(std::move(found));
}

nlohmann::json GridConfig::to_json() const {
  return {{"points_per_side", points_per_side},
          {"cell_probability_threshold", cell_probability_threshold},
          {"nms_tau", nms_tau},
          {"mask_binarize_threshold", mask_binarize_threshold},
          {"stability_offset", stability_offset}};
}

GridConfig GridConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError(std::vector<FieldIssue>{{"grid", "must be a JSON object"}});
  GridConfig c;
  std::vector<FieldIssue> problems;
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      problems.push_back({key, "has the wrong type"});
    }
  };
  for (const auto& [key, value] : j.items())
    if (key != "points_per_side" && key != "cell_probability_threshold" && key != "nms_tau" &&
        key != "mask_binarize_threshold" && key != "stability_offset" && key != "schema_version")
      problems.push_back({key, "unknown field"});
  read("points_per_side", c.points_per_side);
  read("cell_probability_threshold", c.cell_probability_threshold);
  read("nms_tau", c.nms_tau);
  read("mask_binarize_threshold", c.mask_binarize_threshold);
  read("stability_offset", c.stability_offset);
  if (problems.empty()) problems = c.issues();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

std::vector<Point> grid_points(const GridConfig& cfg, int resolution) {
  if (cfg.points_per_side < 1) throw InvalidArgument("grid_points: points_per_side must be at least 1");
  if (resolution < cfg.points_per_side) throw InvalidArgument("grid_points: resolution smaller than the grid");
  const int n = cfg.points_per_side;
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.push_back({(j + 0.5) / n * resolution, (i + 0.5) / n * resolution});
  return out;
}

// ---- segmentation ------------------------------------------------------------

SegmentationResult segment_image(const Image& image, const PromptableSegmenter& model, const GridConfig& cfg) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const int r = model.config().input_resolution;
  if (image.height < 1 || image.width < 1) throw InvalidArgument("segment_image: empty image");
  const Image input = (image.height == r && image.width == r) ? image : resize_image_bilinear(image, r, r);

  SegmentationResult result;
  const auto calls_before = model.encoder_invocations();
  nn::NoGradGuard guard;
  const auto emb = model.encode_image(input);
  const auto points = grid_points(cfg, r);
  result.prompts = static_cast<int>(points.size());

  std::vector<ScoredMask> candidates;
  RealGrid logits(r, r, 0.0);
  const std::span<const Point> all(points);
  for (std::size_t start = 0; start < points.size(); start += kDecodeChunk) {
    const auto count = std::min<std::size_t>(kDecodeChunk, points.size() - start);
    const auto out = model.decode(emb, all.subspan(start, count));
    std::vector<int> rows;
    std::vector<double> probs;
    for (std::size_t i = 0; i < count; ++i) {
      const double p = std::clamp<double>(out.iou.value()(static_cast<Eigen::Index>(i), 0), 0.0, 1.0);
      if (p >= cfg.cell_probability_threshold) {
        rows.push_back(static_cast<int>(i));
        probs.push_back(p);
      }
    }
    if (rows.empty()) continue;
    const auto full = model.upsample(nn::take_rows(out.low_res_logits, rows));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto row = full.value().row(static_cast<Eigen::Index>(k));
      std::copy(row.data(), row.data() + row.size(), logits.values().begin());
      BinaryMask mask = threshold_mask(logits, cfg.mask_binarize_threshold);
      if (mask.is_empty()) continue;
      const double stability = stability_score(logits, cfg.mask_binarize_threshold, cfg.stability_offset);
      candidates.push_back(make_scored_mask(std::move(mask), probs[k], stability));
    }
  }
  result.candidates = static_cast<int>(candidates.size());

  const auto nms = optimized_mask_nms(candidates, cfg.nms_tau);
  result.mask_iou_evaluations = nms.mask_iou_evaluations;
  for (int i : nms.kept_indices) result.instances.push_back(std::move(candidates[static_cast<std::size_t>(i)]));

  // Paint, dropping instances that later (lower-scored) masks cover completely.
  LabelMap painted;
  for (;;) {
    std::vector<BinaryMask> masks;
    for (const auto& d : result.instances) masks.push_back(d.mask);
    painted = masks_to_label_map(masks, r, r);
    const auto seen = present_ids(painted, result.instances.size());
    if (std::all_of(seen.begin() + 1, seen.end(), [](bool b) { return b; })) break;
    keep_where(result.instances, seen);
  }

  if (image.height == r && image.width == r) {
    result.label_map = std::move(painted);
  } else {
    result.label_map = resize_labels_nearest(painted, image.height, image.width);
    const auto seen = present_ids(result.label_map, result.instances.size());
    keep_where(result.instances, seen);
    canonicalize_labels(result.label_map);
  }
  for (std::size_t k = 0; k < result.instances.size(); ++k) {
    BinaryMask m(result.label_map.height(), result.label_map.width());
    for (int y = 0; y < m.height(); ++y)
      for (int x = 0; x < m.width(); ++x)
        if (result.label_map(y, x) == static_cast<std::int32_t>(k + 1)) m.set(y, x, true);
    result.boxes.push_back(bounding_box_of(m));
  }
  result.encoder_calls = model.encoder_invocations() - calls_before;
  result.timing_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return result;
}

SegmentationResult segment_image(const ImageRecord& rec, const PromptableSegmenter& model, const GridConfig& cfg) {
  return segment_image(rec.image, model, cfg);
}

nlohmann::json result_sidecar(const SegmentationResult& result, const std::string& name, const GridConfig& cfg) {
  nlohmann::json instances = nlohmann::json::array();
  for (std::size_t k = 0; k < result.instances.size(); ++k) {
    const auto& d = result.instances[k];
    const auto& b = result.boxes[k];
    instances.push_back({{"id", k + 1},
                         {"box", {{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}},
                         {"score", d.score},
                         {"cell_probability", d.cell_probability},
                         {"stability", d.stability},
                         {"area", d.area}});
  }
  return {{"schema_version", 1},
          {"name", name},
          {"image_size", {{"height", result.label_map.height()}, {"width", result.label_map.width()}}},
          {"instances", instances},
          {"instance_count", result.instances.size()},
          {"timing_ms", result.timing_ms},
          {"prompts", result.prompts},
          {"candidates", result.candidates},
          {"mask_iou_evaluations", result.mask_iou_evaluations},
          {"encoder_calls", result.encoder_calls},
          {"grid_config", cfg.to_json()}};
}

void write_prediction(const std::filesystem::path& dir, const std::string& stem, const SegmentationResult& result,
                      const GridConfig& cfg, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  write_label_map(dir / (stem + ".png"), result.label_map);
  auto sidecar = result_sidecar(result, stem, cfg);
  if (!extra.is_null()) sidecar["provenance"] = extra;
  std::ofstream f(dir / (stem + ".json"));
  if (!f) throw Error("cannot write " + (dir / (stem + ".json")).string());
  f << sidecar.dump(2) << '\n';
}

} // namespace cellprompt
