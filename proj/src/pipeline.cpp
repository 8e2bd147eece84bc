#include "cellprompt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>

#include "cellprompt/error.hpp"
#include "cellprompt/metrics.hpp"
#include "cellprompt/nms.hpp"
#include "cellprompt/synthetic.hpp"

namespace cellprompt {

namespace {

bool is_image_path(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::map<std::string, std::filesystem::path> images_by_stem(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw NotFound("not a directory: " + dir.string());
  std::map<std::string, std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && is_image_path(entry.path())) out.emplace(entry.path().stem().string(), entry.path());
  return out;
}

} // namespace

// ---- models ------------------------------------------------------------------

std::string to_string(BackboneVariant v) { return v == BackboneVariant::tiny ? "tiny" : "external"; }

BackboneVariant backbone_variant_from_string(const std::string& s) {
  if (s == "tiny") return BackboneVariant::tiny;
  if (s == "external") return BackboneVariant::external;
  throw InvalidArgument("unknown backbone '" + s + "' (expected tiny or external)");
}

nlohmann::json BackboneSource::to_json() const {
  return {{"variant", to_string(variant)},
          {"weights", weights.empty() ? bundled_backbone_path().string() : weights.string()}};
}

std::unique_ptr<PromptableSegmenter> load_base_model(const BackboneSource& source) {
  if (source.variant == BackboneVariant::external && source.weights.empty())
    throw InvalidArgument("the external backbone needs a weights path");
  if (source.weights.empty()) return load_bundled_backbone();
  if (!std::filesystem::exists(source.weights)) throw NotFound("backbone weights not found: " + source.weights.string());
  return load_backbone(source.weights);
}

std::unique_ptr<PromptableSegmenter> load_adapted_model(const std::filesystem::path& adapter,
                                                        const BackboneSource& source) {
  if (!std::filesystem::exists(adapter)) throw NotFound("adapter checkpoint not found: " + adapter.string());
  const auto ckpt = read_adapter(adapter);
  auto model = load_base_model(source);
  apply_adapter(*model, ckpt);
  return model;
}

FitResult train_adapter(const std::vector<ImageRecord>& records, const TrainConfig& cfg,
                        const PromptableSegmenter& base, const ProgressCallback& progress) {
  cfg.validate();
  auto model = base.clone_base();
  model->inject_lora(cfg.lora, cfg.seed);
  return fit(records, cfg, *model, progress);
}

// ---- directories -------------------------------------------------------------

std::vector<ImageRecord> load_prediction_inputs(const std::filesystem::path& dir) {
  if (std::filesystem::is_directory(dir / "images")) return load_dataset(dir, LoadMode::predict);
  std::vector<ImageRecord> out;
  for (const auto& [stem, path] : images_by_stem(dir)) out.push_back(make_record(read_raw_image(path), std::nullopt, stem));
  return out;
}

std::vector<std::pair<std::string, std::filesystem::path>> label_map_files(const std::filesystem::path& dir) {
  const auto root = std::filesystem::is_directory(dir / "masks") ? dir / "masks" : dir;
  const auto found = images_by_stem(root);
  return {found.begin(), found.end()};
}

// ---- evaluation --------------------------------------------------------------

nlohmann::json EvaluationReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : per_image)
    rows.push_back({{"name", s.name}, {"ap", s.ap}, {"tp", s.tp}, {"fp", s.fp}, {"fn", s.fn}});
  return {{"schema_version", 1}, {"per_image", rows}, {"map", map}, {"threshold", threshold}};
}

EvaluationReport evaluate_directories(const std::filesystem::path& pred, const std::filesystem::path& gt,
                                      double threshold) {
  const auto gt_files = label_map_files(gt);
  if (gt_files.empty()) throw NotFound("no ground-truth label maps in " + gt.string());
  const auto pred_files = images_by_stem(pred);
  EvaluationReport report;
  report.threshold = threshold;
  double total = 0.0;
  for (const auto& [stem, gt_path] : gt_files) {
    const auto it = pred_files.find(stem);
    if (it == pred_files.end()) throw NotFound("no prediction for " + stem + " in " + pred.string());
    auto p = read_label_map(it->second);
    auto g = read_label_map(gt_path);
    canonicalize_labels(p);
    canonicalize_labels(g);
    const auto match = match_instances(p, g, threshold);
    ImageScore s{stem, average_precision(match), match.true_positives, match.false_positives, match.false_negatives};
    total += s.ap;
    report.per_image.push_back(s);
  }
  report.map = total / static_cast<double>(report.per_image.size());
  return report;
}

// ---- NMS benchmark -----------------------------------------------------------

nlohmann::json NmsBenchRecord::to_json() const {
  return {{"strategy", strategy},
          {"kept_count", kept_count},
          {"mask_iou_evaluations", mask_iou_evaluations},
          {"wall_time_ms", wall_time_ms}};
}

nlohmann::json NmsBenchReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : records) rows.push_back(r.to_json());
  return {{"schema_version", 1},
          {"records", rows},
          {"scenes", scenes},
          {"max_masks", max_masks},
          {"size", size},
          {"seed", seed},
          {"disagreements", disagreements}};
}

NmsBenchReport nms_benchmark(int scenes, int max_masks, int size, std::uint64_t seed, double tau) {
  if (scenes < 1) throw InvalidArgument("nms_benchmark: scenes must be positive");
  if (max_masks < 1) throw InvalidArgument("nms_benchmark: max_masks must be positive");
  if (size < 8) throw InvalidArgument("nms_benchmark: size must be at least 8");
  NmsBenchReport report;
  report.scenes = scenes;
  report.max_masks = max_masks;
  report.size = size;
  report.seed = seed;
  report.records = {{"optimized"}, {"brute_force"}, {"box"}};
  using Strategy = NmsResult (*)(const std::vector<ScoredMask>&, double);
  const Strategy strategies[] = {optimized_mask_nms, brute_force_mask_nms, box_nms};
  for (int s = 0; s < scenes; ++s) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(s));
    const auto scene = synthetic::random_nms_scene(rng, size, max_masks);
    std::vector<int> kept[3];
    for (int k = 0; k < 3; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = strategies[k](scene, tau);
      report.records[k].wall_time_ms +=
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      report.records[k].kept_count += static_cast<std::int64_t>(r.kept_indices.size());
      report.records[k].mask_iou_evaluations += r.mask_iou_evaluations;
      kept[k] = r.kept_indices;
    }
    if (kept[0] != kept[1]) ++report.disagreements;
  }
  return report;
}

// ---- files -------------------------------------------------------------------

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp);
    f << j.dump(2) << '\n';
    if (!f) throw Error("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw NotFound("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

} // namespace cellprompt
