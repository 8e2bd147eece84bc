#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cellprompt/geometry.hpp"

namespace cellprompt {

struct MatchedPair {
  std::int32_t pred_id = 0;
  std::int32_t gt_id = 0;
  double iou = 0.0;
};

struct MatchResult {
  int true_positives = 0;
  int false_positives = 0;
  int false_negatives = 0;
  std::vector<MatchedPair> pairs;
};

/// Sparse IoU table between the instances of two label maps (only pairs that share pixels).
struct InstanceOverlap {
  std::vector<std::int32_t> pred_ids;
  std::vector<std::int32_t> gt_ids;
  std::vector<MatchedPair> overlapping;
};

InstanceOverlap instance_overlap(const LabelMap& pred, const LabelMap& gt);

/// Greedy one-to-one matching in descending IoU order (ties: lower gt id, then lower pred id).
/// Pairs with IoU below `threshold` are never matched.
MatchResult match_instances(const LabelMap& pred, const LabelMap& gt, double threshold);

/// TP / (TP + FP + FN); 1.0 when all three are zero.
double average_precision(const MatchResult& match);

/// Unweighted mean of per-image AP. Throws InvalidArgument on an empty list.
double mean_average_precision(const std::vector<std::pair<LabelMap, LabelMap>>& pred_gt, double threshold = 0.5);

} // namespace cellprompt
