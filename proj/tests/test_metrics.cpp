#include "doctest.h"

#include <functional>
#include <map>

#include "cellprompt/metrics.hpp"
#include "test_support.hpp"

using namespace cellprompt;

namespace {

LabelMap jitter_labels(Rng& rng, const LabelMap& gt) {
  // Shift every instance by a small random offset and relabel with a random permutation.
  LabelMap out(gt.height(), gt.width(), 0);
  for (auto& [id, m] : label_map_to_masks(gt)) {
    const int dx = rng.uniform_int(-3, 3), dy = rng.uniform_int(-3, 3);
    const auto new_id = static_cast<std::int32_t>(1000 - id);
    for (int y = 0; y < gt.height(); ++y)
      for (int x = 0; x < gt.width(); ++x) {
        const int sy = y - dy, sx = x - dx;
        if (sy >= 0 && sx >= 0 && sy < gt.height() && sx < gt.width() && m(sy, sx)) out(y, x) = new_id;
      }
  }
  return out;
}

} // namespace

TEST_CASE("identical maps match perfectly") {
  Rng rng(1);
  const auto gt = testing::random_disk_labels(rng, 40, 40, 5, 2, 6);
  const auto k = instance_count(gt);
  const auto r = match_instances(gt, gt, 0.5);
  CHECK(r.true_positives == k);
  CHECK(r.false_positives == 0);
  CHECK(r.false_negatives == 0);
  CHECK(average_precision(r) == 1.0);
}

TEST_CASE("empty prediction yields only false negatives") {
  LabelMap gt(10, 10, 0);
  gt(0, 0) = 1;
  gt(5, 5) = 2;
  gt(9, 9) = 3;
  const auto r = match_instances(LabelMap(10, 10, 0), gt, 0.5);
  CHECK(r.true_positives == 0);
  CHECK(r.false_positives == 0);
  CHECK(r.false_negatives == 3);
  CHECK(average_precision(r) == 0.0);
}

TEST_CASE("average precision hand cases") {
  MatchResult m;
  m.true_positives = 1;
  m.false_positives = 1;
  m.false_negatives = 2;
  CHECK(average_precision(m) == 0.25);
  m = {};
  CHECK(average_precision(m) == 1.0);
  m.true_positives = 4;
  CHECK(average_precision(m) == 1.0);
  m = {};
  m.false_positives = 3;
  CHECK(average_precision(m) == 0.0);
}

TEST_CASE("mean average precision") {
  LabelMap gt(4, 4, 0);
  gt(1, 1) = 1;
  CHECK(mean_average_precision({{gt, gt}, {gt, gt}}) == 1.0);
  CHECK(mean_average_precision({{gt, gt}, {LabelMap(4, 4, 0), gt}}) == 0.5);
  CHECK_THROWS_AS(mean_average_precision({}), InvalidArgument);

  // Hand sums: image A has TP=1, FP=1, FN=0 -> 0.5; image B has TP=0, FN=1 -> 0.
  LabelMap pred_a(4, 4, 0);
  pred_a(1, 1) = 5;
  pred_a(3, 3) = 6;
  CHECK(mean_average_precision({{pred_a, gt}, {LabelMap(4, 4, 0), gt}}) == doctest::Approx(0.25));
}

TEST_CASE("matching rejects bad input") {
  CHECK_THROWS_AS(match_instances(LabelMap(3, 3, 0), LabelMap(3, 4, 0), 0.5), DimensionMismatch);
  CHECK_THROWS_AS(match_instances(LabelMap(3, 3, 0), LabelMap(3, 3, 0), 0.0), InvalidArgument);
}

TEST_CASE("greedy equals optimal matching at IoU 0.5") {
  Rng rng(42);
  for (int t = 0; t < 100; ++t) {
    const auto gt = testing::random_disk_labels(rng, 48, 48, 8, 2, 8);
    const auto pred = jitter_labels(rng, gt);
    CHECK(match_instances(pred, gt, 0.5).true_positives == testing::optimal_true_positives(pred, gt, 0.5));
  }
}

TEST_CASE("AP is non-increasing in the threshold and invariant to relabeling") {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto gt = testing::random_disk_labels(rng, 40, 40, 6, 2, 7);
    const auto pred = jitter_labels(rng, gt);
    double prev = 1.0;
    for (double th = 0.1; th <= 1.0; th += 0.1) {
      const double ap = average_precision(match_instances(pred, gt, th));
      CHECK(ap <= prev + 1e-12);
      prev = ap;
    }
    auto relabeled = gt;
    for (auto& v : relabeled.values())
      if (v > 0) v = 50 + 3 * v;
    CHECK(average_precision(match_instances(pred, relabeled, 0.5)) ==
          average_precision(match_instances(pred, gt, 0.5)));
  }
}
