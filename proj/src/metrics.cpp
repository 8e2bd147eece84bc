#include "cellprompt/metrics.hpp"

#include <algorithm>
#include <map>
#include <set>

namespace cellprompt {

InstanceOverlap instance_overlap(const LabelMap& pred, const LabelMap& gt) {
  if (!pred.same_shape(gt)) throw DimensionMismatch("match_instances: label maps differ in shape");
  std::map<std::int32_t, std::int64_t> pred_area, gt_area;
  std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> inter;
  auto pv = pred.values();
  auto gv = gt.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] > 0) ++pred_area[pv[i]];
    if (gv[i] > 0) ++gt_area[gv[i]];
    if (pv[i] > 0 && gv[i] > 0) ++inter[{pv[i], gv[i]}];
  }
  InstanceOverlap out;
  for (const auto& [id, a] : pred_area) out.pred_ids.push_back(id);
  for (const auto& [id, a] : gt_area) out.gt_ids.push_back(id);
  for (const auto& [key, n] : inter) {
    const auto uni = pred_area[key.first] + gt_area[key.second] - n;
    out.overlapping.push_back({key.first, key.second, static_cast<double>(n) / static_cast<double>(uni)});
  }
  return out;
}

MatchResult match_instances(const LabelMap& pred, const LabelMap& gt, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidArgument("match_instances: threshold must lie in (0,1]");
  auto overlap = instance_overlap(pred, gt);
  auto& candidates = overlap.overlapping;
  std::erase_if(candidates, [&](const MatchedPair& p) { return p.iou < threshold; });
  std::sort(candidates.begin(), candidates.end(), [](const MatchedPair& a, const MatchedPair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.gt_id != b.gt_id) return a.gt_id < b.gt_id;
    return a.pred_id < b.pred_id;
  });

  MatchResult result;
  std::set<std::int32_t> used_pred, used_gt;
  for (const auto& c : candidates) {
    if (used_pred.count(c.pred_id) || used_gt.count(c.gt_id)) continue;
    used_pred.insert(c.pred_id);
    used_gt.insert(c.gt_id);
    result.pairs.push_back(c);
  }
  result.true_positives = static_cast<int>(result.pairs.size());
  result.false_positives = static_cast<int>(overlap.pred_ids.size()) - result.true_positives;
  result.false_negatives = static_cast<int>(overlap.gt_ids.size()) - result.true_positives;
  return result;
}

double average_precision(const MatchResult& match) {
  const int denom = match.true_positives + match.false_positives + match.false_negatives;
  if (denom == 0) return 1.0;
  return static_cast<double>(match.true_positives) / static_cast<double>(denom);
}

double mean_average_precision(const std::vector<std::pair<LabelMap, LabelMap>>& pred_gt, double threshold) {
  if (pred_gt.empty()) throw InvalidArgument("mean_average_precision: no images");
  double sum = 0.0;
  for (const auto& [pred, gt] : pred_gt) sum += average_precision(match_instances(pred, gt, threshold));
  return sum / static_cast<double>(pred_gt.size());
}

} // namespace cellprompt
