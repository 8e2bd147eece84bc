#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cellprompt/grid.hpp"

namespace cellprompt {

/// Binary image with values strictly in {0,1}.
class BinaryMask {
public:
  BinaryMask() = default;
  BinaryMask(int height, int width);
  /// Takes any 0/1 byte grid; throws InvalidArgument on other values.
  explicit BinaryMask(Grid<std::uint8_t> pixels);

  int height() const { return pixels_.height(); }
  int width() const { return pixels_.width(); }

  bool operator()(int y, int x) const { return pixels_(y, x) != 0; }
  void set(int y, int x, bool on) { pixels_(y, x) = on ? 1 : 0; }

  std::int64_t area() const;
  bool is_empty() const { return area() == 0; }
  const Grid<std::uint8_t>& pixels() const { return pixels_; }
  bool same_shape(const BinaryMask& other) const { return pixels_.same_shape(other.pixels_); }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
  Grid<std::uint8_t> pixels_;
};

/// Pixel coordinates; integer values address pixel (y, x).
struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Half-open pixel box [x0,x1) x [y0,y1).
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  std::int64_t area() const { return static_cast<std::int64_t>(x1 - x0) * (y1 - y0); }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Integer instance image: 0 is background, k > 0 is instance k.
using LabelMap = Grid<std::int32_t>;

/// Per-pixel real field (distance transforms, logits).
using RealGrid = Grid<double>;

/// One detection: mask, tight box, cell probability, stability and their product.
struct ScoredMask {
  BinaryMask mask;
  BoundingBox box;
  double cell_probability = 0.0;
  double stability = 0.0;
  double score = 0.0;
  std::int64_t area = 0;
};

/// Builds a ScoredMask with box = tight box of mask and score = probability * stability.
ScoredMask make_scored_mask(BinaryMask mask, double cell_probability, double stability);

/// |a ∩ b| / |a ∪ b|. Throws DimensionMismatch, or InvalidArgument when both are empty.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

/// Same value as mask_iou, restricted to the box intersection using cached areas.
double mask_iou(const ScoredMask& a, const ScoredMask& b);

bool boxes_overlap(const BoundingBox& a, const BoundingBox& b);
double box_iou(const BoundingBox& a, const BoundingBox& b);

/// Symmetric N x N 0/1 matrix; entry (i,j) is 1 iff the boxes share positive area.
std::vector<std::vector<std::uint8_t>> box_overlap_matrix(const std::vector<BoundingBox>& boxes);

/// Tightest half-open box around the 1-pixels. Throws InvalidArgument on an empty mask.
BoundingBox bounding_box_of(const BinaryMask& mask);

/// Euclidean distance from each 1-pixel to the nearest 0-pixel, with a one-pixel ring of
/// background assumed outside the image. 0-pixels map to 0.
RealGrid distance_transform(const BinaryMask& mask);

/// One mask per positive label, ascending by id.
std::vector<std::pair<std::int32_t, BinaryMask>> label_map_to_masks(const LabelMap& labels);

/// Paints masks in order with ids 1..K; later masks win on overlap.
LabelMap masks_to_label_map(const std::vector<BinaryMask>& masks, int height, int width);
LabelMap masks_to_label_map(const std::vector<BinaryMask>& masks);

/// Relabels positive ids by rank so they become 1..K; returns K.
std::int32_t canonicalize_labels(LabelMap& labels);

/// Number of distinct positive ids.
std::int32_t instance_count(const LabelMap& labels);

/// IoU between the binarizations logits > threshold + offset and logits > threshold - offset.
/// Zero when the high-threshold mask is empty.
double stability_score(const RealGrid& logits, double threshold, double offset);

BinaryMask threshold_mask(const RealGrid& values, double threshold);

} // namespace cellprompt
