#include "cellprompt/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace cellprompt {

BinaryMask::BinaryMask(int height, int width) : pixels_(height, width, 0) {
  if (height <= 0 || width <= 0) throw InvalidArgument("mask dimensions must be positive");
}

BinaryMask::BinaryMask(Grid<std::uint8_t> pixels) : pixels_(std::move(pixels)) {
  if (pixels_.height() <= 0 || pixels_.width() <= 0) throw InvalidArgument("mask dimensions must be positive");
  for (auto v : pixels_.values())
    if (v > 1) throw InvalidArgument("mask values must be 0 or 1");
}

std::int64_t BinaryMask::area() const {
  std::int64_t n = 0;
  for (auto v : pixels_.values()) n += v;
  return n;
}

ScoredMask make_scored_mask(BinaryMask mask, double cell_probability, double stability) {
  ScoredMask out;
  out.box = bounding_box_of(mask);
  out.area = mask.area();
  out.mask = std::move(mask);
  out.cell_probability = cell_probability;
  out.stability = stability;
  out.score = cell_probability * stability;
  return out;
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (!a.same_shape(b)) throw DimensionMismatch("mask_iou: masks differ in shape");
  auto pa = a.pixels().values();
  auto pb = b.pixels().values();
  std::int64_t inter = 0;
  std::int64_t uni = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    inter += pa[i] & pb[i];
    uni += pa[i] | pb[i];
  }
  if (uni == 0) throw InvalidArgument("mask_iou: both masks are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_iou(const ScoredMask& a, const ScoredMask& b) {
  if (!a.mask.same_shape(b.mask)) throw DimensionMismatch("mask_iou: masks differ in shape");
  const std::int64_t total = a.area + b.area;
  if (total == 0) throw InvalidArgument("mask_iou: both masks are empty");
  const int x0 = std::max(a.box.x0, b.box.x0);
  const int y0 = std::max(a.box.y0, b.box.y0);
  const int x1 = std::min(a.box.x1, b.box.x1);
  const int y1 = std::min(a.box.y1, b.box.y1);
  std::int64_t inter = 0;
  const auto& pa = a.mask.pixels();
  const auto& pb = b.mask.pixels();
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) inter += pa(y, x) & pb(y, x);
  return static_cast<double>(inter) / static_cast<double>(total - inter);
}

bool boxes_overlap(const BoundingBox& a, const BoundingBox& b) {
  return std::max(a.x0, b.x0) < std::min(a.x1, b.x1) && std::max(a.y0, b.y0) < std::min(a.y1, b.y1);
}

double box_iou(const BoundingBox& a, const BoundingBox& b) {
  const std::int64_t iw = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const std::int64_t ih = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const std::int64_t inter = iw * ih;
  const std::int64_t uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<std::vector<std::uint8_t>> box_overlap_matrix(const std::vector<BoundingBox>& boxes) {
  const std::size_t n = boxes.size();
  std::vector<std::vector<std::uint8_t>> overlap(n, std::vector<std::uint8_t>(n, 0));
  for (std::size_t i = 0; i < n; ++i) {
    overlap[i][i] = 1;
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::uint8_t v = boxes_overlap(boxes[i], boxes[j]) ? 1 : 0;
      overlap[i][j] = v;
      overlap[j][i] = v;
    }
  }
  return overlap;
}

BoundingBox bounding_box_of(const BinaryMask& mask) {
  int x0 = mask.width(), y0 = mask.height(), x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      if (!mask(y, x)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) throw InvalidArgument("bounding_box_of: mask is empty");
  return {x0, y0, x1 + 1, y1 + 1};
}

namespace {

// Lower envelope of parabolas; f holds squared distances, result written to d.
void squared_edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s = 0.0;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s > z[k]) break;
      --k;
      if (k < 0) break;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -inf : s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

} // namespace

RealGrid distance_transform(const BinaryMask& mask) {
  // Pad by one background pixel on every side so the border acts as background.
  const int h = mask.height() + 2;
  const int w = mask.width() + 2;
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> field(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask(y, x)) field[static_cast<std::size_t>(y + 1) * w + (x + 1)] = inf;

  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);

  f.resize(h);
  d.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = field[static_cast<std::size_t>(y) * w + x];
    squared_edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) field[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  f.resize(w);
  d.resize(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) f[x] = field[static_cast<std::size_t>(y) * w + x];
    squared_edt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) field[static_cast<std::size_t>(y) * w + x] = d[x];
  }

  RealGrid out(mask.height(), mask.width(), 0.0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      out(y, x) = std::sqrt(field[static_cast<std::size_t>(y + 1) * w + (x + 1)]);
  return out;
}

std::vector<std::pair<std::int32_t, BinaryMask>> label_map_to_masks(const LabelMap& labels) {
  std::map<std::int32_t, BinaryMask> by_id;
  for (int y = 0; y < labels.height(); ++y) {
    for (int x = 0; x < labels.width(); ++x) {
      const auto id = labels(y, x);
      if (id <= 0) continue;
      auto it = by_id.find(id);
      if (it == by_id.end()) it = by_id.emplace(id, BinaryMask(labels.height(), labels.width())).first;
      it->second.set(y, x, true);
    }
  }
  std::vector<std::pair<std::int32_t, BinaryMask>> out;
  out.reserve(by_id.size());
  for (auto& [id, m] : by_id) out.emplace_back(id, std::move(m));
  return out;
}

LabelMap masks_to_label_map(const std::vector<BinaryMask>& masks, int height, int width) {
  LabelMap out(height, width, 0);
  std::int32_t id = 0;
  for (const auto& m : masks) {
    ++id;
    if (m.height() != height || m.width() != width)
      throw DimensionMismatch("masks_to_label_map: mask shape differs from label map");
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (m(y, x)) out(y, x) = id;
  }
  return out;
}

LabelMap masks_to_label_map(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw InvalidArgument("masks_to_label_map: empty list needs explicit dimensions");
  return masks_to_label_map(masks, masks.front().height(), masks.front().width());
}

std::int32_t canonicalize_labels(LabelMap& labels) {
  std::map<std::int32_t, std::int32_t> rank;
  for (auto v : labels.values())
    if (v > 0) rank.emplace(v, 0);
  std::int32_t next = 0;
  for (auto& [id, r] : rank) r = ++next;
  for (auto& v : labels.values()) v = v > 0 ? rank[v] : 0;
  return next;
}

std::int32_t instance_count(const LabelMap& labels) {
  std::vector<std::int32_t> ids;
  for (auto v : labels.values())
    if (v > 0) ids.push_back(v);
  std::sort(ids.begin(), ids.end());
  return static_cast<std::int32_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

BinaryMask threshold_mask(const RealGrid& values, double threshold) {
  BinaryMask out(values.height(), values.width());
  for (int y = 0; y < values.height(); ++y)
    for (int x = 0; x < values.width(); ++x) out.set(y, x, values(y, x) > threshold);
  return out;
}

double stability_score(const RealGrid& logits, double threshold, double offset) {
  if (!(offset > 0.0)) throw InvalidArgument("stability_score: offset must be positive");
  std::int64_t high = 0;
  std::int64_t low = 0;
  for (auto v : logits.values()) {
    high += v > threshold + offset;
    low += v > threshold - offset;
  }
  // The high-threshold mask is contained in the low-threshold one.
  if (high == 0) return 0.0;
  return static_cast<double>(high) / static_cast<double>(low);
}

} // namespace cellprompt
