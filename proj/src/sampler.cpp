#include "cellprompt/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace cellprompt {

double positive_quantile(const RealGrid& field, const BinaryMask& region, double q) {
  std::vector<double> values;
  for (int y = 0; y < field.height(); ++y)
    for (int x = 0; x < field.width(); ++x)
      if (region(y, x) && field(y, x) > 0.0) values.push_back(field(y, x));
  if (values.empty()) return std::numeric_limits<double>::infinity();
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  // Order statistics lo and lo + 1 without a full sort.
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double v_lo = values[lo];
  const double v_hi =
      lo + 1 < values.size() ? *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end()) : v_lo;
  return v_lo + (pos - static_cast<double>(lo)) * (v_hi - v_lo);
}

BinaryMask top_distance_region(const RealGrid& field, const BinaryMask& region, double top_fraction) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw InvalidArgument("top_fraction must lie in (0,1]");
  const double cut = positive_quantile(field, region, 1.0 - top_fraction);
  BinaryMask out(field.height(), field.width());
  for (int y = 0; y < field.height(); ++y)
    for (int x = 0; x < field.width(); ++x) out.set(y, x, region(y, x) && field(y, x) > 0.0 && field(y, x) >= cut);
  return out;
}

namespace {

std::vector<Point> pixels_of(const BinaryMask& m, int dx = 0, int dy = 0) {
  std::vector<Point> pts;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m(y, x)) pts.push_back({static_cast<double>(x + dx), static_cast<double>(y + dy)});
  return pts;
}

// Eligible pixels of one instance. The distance field is computed on the instance box grown
// by one pixel: the ring is background, so no farther zero can be closer.
std::vector<Point> instance_eligible(const BinaryMask& mask, const BoundingBox& box, double top_fraction) {
  const int x0 = std::max(0, box.x0 - 1);
  const int y0 = std::max(0, box.y0 - 1);
  const int x1 = std::min(mask.width(), box.x1 + 1);
  const int y1 = std::min(mask.height(), box.y1 + 1);
  BinaryMask crop(y1 - y0, x1 - x0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) crop.set(y - y0, x - x0, mask(y, x));
  return pixels_of(top_distance_region(distance_transform(crop), crop, top_fraction), x0, y0);
}

} // namespace

std::vector<PromptSample> sample_prompts(const LabelMap& labels, const SamplerConfig& cfg, Rng& rng) {
  if (!(cfg.top_fraction > 0.0 && cfg.top_fraction <= 1.0)) throw InvalidArgument("top_fraction must lie in (0,1]");
  if (cfg.max_positive < 0 || cfg.max_negative < 0) throw InvalidArgument("sample caps must be non-negative");
  std::vector<PromptSample> out;
  if (labels.empty()) return out;

  auto instances = label_map_to_masks(labels);
  const int k = static_cast<int>(instances.size());
  // Tight boxes of every instance in one pass; ids ascend like `instances`.
  std::map<std::int32_t, BoundingBox> boxes;
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) {
      const auto id = labels(y, x);
      if (id <= 0) continue;
      auto [it, fresh] = boxes.try_emplace(id, BoundingBox{x, y, x + 1, y + 1});
      if (fresh) continue;
      auto& b = it->second;
      b.x0 = std::min(b.x0, x);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = y + 1;
    }
  }
  std::vector<int> chosen;
  if (k <= cfg.max_positive) {
    for (int i = 0; i < k; ++i) chosen.push_back(i);
  } else {
    chosen = rng.sample_without_replacement(k, cfg.max_positive);
    std::sort(chosen.begin(), chosen.end());
  }
  for (int i : chosen) {
    auto& [id, mask] = instances[i];
    const auto eligible = instance_eligible(mask, boxes.at(id), cfg.top_fraction);
    if (eligible.empty()) continue;
    PromptSample s;
    s.point = eligible[rng.below(eligible.size())];
    s.polarity = Polarity::positive;
    s.target_probability = 1.0;
    s.instance_id = id;
    s.target_mask = mask;
    out.push_back(std::move(s));
  }

  BinaryMask background(labels.height(), labels.width());
  for (int y = 0; y < labels.height(); ++y)
    for (int x = 0; x < labels.width(); ++x) background.set(y, x, labels(y, x) == 0);
  if (cfg.max_negative > 0 && !background.is_empty()) {
    const auto eligible =
        pixels_of(top_distance_region(distance_transform(background), background, cfg.top_fraction));
    const BinaryMask empty(labels.height(), labels.width());
    for (int idx : rng.sample_without_replacement(static_cast<int>(eligible.size()), cfg.max_negative)) {
      PromptSample s;
      s.point = eligible[idx];
      s.polarity = Polarity::negative;
      s.target_probability = 0.0;
      s.target_mask = empty;
      out.push_back(std::move(s));
    }
  }
  return out;
}

} // namespace cellprompt
