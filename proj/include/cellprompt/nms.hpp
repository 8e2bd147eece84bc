#pragma once

#include <cstdint>
#include <vector>

#include "cellprompt/geometry.hpp"

namespace cellprompt {

inline constexpr double kDefaultNmsTau = 0.05;

struct NmsResult {
  /// Kept input indices in descending score order.
  std::vector<int> kept_indices;
  /// Number of mask IoU computations performed.
  std::int64_t mask_iou_evaluations = 0;
};

/// Indices sorted by (score desc, index asc).
std::vector<int> score_order(const std::vector<ScoredMask>& detections);

/// Greedy mask NMS that only evaluates mask IoU for box-overlapping pairs.
NmsResult optimized_mask_nms(const std::vector<ScoredMask>& detections, double tau = kDefaultNmsTau);

/// Greedy mask NMS that evaluates mask IoU against every kept detection.
NmsResult brute_force_mask_nms(const std::vector<ScoredMask>& detections, double tau = kDefaultNmsTau);

/// Greedy NMS on box IoU only.
NmsResult box_nms(const std::vector<ScoredMask>& detections, double tau = kDefaultNmsTau);

} // namespace cellprompt
