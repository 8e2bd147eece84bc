#include "cellprompt/nms.hpp"

#include <algorithm>
#include <list>
#include <numeric>

namespace cellprompt {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw InvalidArgument("nms: tau must lie in (0,1)");
}

void check_shapes(const std::vector<ScoredMask>& detections) {
  for (const auto& d : detections)
    if (!d.mask.same_shape(detections.front().mask)) throw DimensionMismatch("nms: masks differ in shape");
}

// Shared greedy loop: pop the best remaining detection, keep it, then test the
// still-remaining candidates selected by `consider` with `suppress`.
template <class Consider, class Suppress>
NmsResult greedy(const std::vector<ScoredMask>& detections, Consider consider, Suppress suppress) {
  NmsResult result;
  const auto order = score_order(detections);
  std::list<int> remaining(order.begin(), order.end());
  while (!remaining.empty()) {
    const int k = remaining.front();
    remaining.pop_front();
    result.kept_indices.push_back(k);
    for (auto it = remaining.begin(); it != remaining.end();) {
      if (consider(k, *it) && suppress(k, *it, result))
        it = remaining.erase(it);
      else
        ++it;
    }
  }
  return result;
}

} // namespace

std::vector<int> score_order(const std::vector<ScoredMask>& detections) {
  std::vector<int> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return detections[a].score > detections[b].score; });
  return order;
}

NmsResult optimized_mask_nms(const std::vector<ScoredMask>& detections, double tau) {
  check_tau(tau);
  check_shapes(detections);
  std::vector<BoundingBox> boxes;
  boxes.reserve(detections.size());
  for (const auto& d : detections) boxes.push_back(d.box);
  const auto overlap = box_overlap_matrix(boxes);
  return greedy(
      detections, [&](int k, int i) { return overlap[k][i] != 0; },
      [&](int k, int i, NmsResult& r) {
        ++r.mask_iou_evaluations;
        return mask_iou(detections[k], detections[i]) > tau;
      });
}

NmsResult brute_force_mask_nms(const std::vector<ScoredMask>& detections, double tau) {
  check_tau(tau);
  check_shapes(detections);
  return greedy(
      detections, [](int, int) { return true; },
      [&](int k, int i, NmsResult& r) {
        ++r.mask_iou_evaluations;
        return mask_iou(detections[k].mask, detections[i].mask) > tau;
      });
}

NmsResult box_nms(const std::vector<ScoredMask>& detections, double tau) {
  check_tau(tau);
  return greedy(
      detections, [](int, int) { return true; },
      [&](int k, int i, NmsResult&) { return box_iou(detections[k].box, detections[i].box) > tau; });
}

} // namespace cellprompt
