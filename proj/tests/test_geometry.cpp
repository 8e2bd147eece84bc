#include "doctest.h"

#include "cellprompt/geometry.hpp"
#include "test_support.hpp"

using namespace cellprompt;
using cellprompt::testing::rect_mask;

TEST_CASE("mask_iou examples") {
  const auto a = rect_mask(8, 8, 1, 1, 3, 3);
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, rect_mask(8, 8, 5, 5, 7, 7)) == 0.0);
  // 2x2 squares sharing a 1x2 strip: 2 shared of 6 covered pixels.
  CHECK(mask_iou(a, rect_mask(8, 8, 2, 1, 4, 3)) == doctest::Approx(2.0 / 6.0));
  CHECK_THROWS_AS(mask_iou(a, rect_mask(8, 9, 0, 0, 1, 1)), DimensionMismatch);
  CHECK_THROWS_AS(mask_iou(BinaryMask(4, 4), BinaryMask(4, 4)), InvalidArgument);
}

TEST_CASE("mask_iou properties on random masks") {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto a = testing::random_mask(rng, 12, 10, 0.3);
    const auto b = testing::random_mask(rng, 12, 10, 0.3);
    if (a.is_empty() && b.is_empty()) continue;
    const double ab = mask_iou(a, b);
    CHECK(ab == mask_iou(b, a));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK((ab == 1.0) == (a == b));
    if (!a.is_empty() && !b.is_empty()) {
      const auto sa = make_scored_mask(a, 1.0, 1.0);
      const auto sb = make_scored_mask(b, 1.0, 1.0);
      CHECK(mask_iou(sa, sb) == ab);
      // Mask intersection implies box intersection.
      if (ab > 0.0) CHECK(box_overlap_matrix({sa.box, sb.box})[0][1] == 1);
    }
  }
}

TEST_CASE("box_overlap_matrix examples") {
  auto o = box_overlap_matrix({{0, 0, 10, 10}, {5, 5, 15, 15}});
  CHECK(o[0][1] == 1);
  CHECK(o[1][0] == 1);
  CHECK(o[0][0] == 1);
  o = box_overlap_matrix({{0, 0, 4, 4}, {5, 5, 9, 9}});
  CHECK(o[0][1] == 0);
  o = box_overlap_matrix({{0, 0, 4, 4}, {4, 0, 8, 4}});
  CHECK(o[0][1] == 0);
  CHECK(box_overlap_matrix({}).empty());
}

TEST_CASE("bounding_box_of examples") {
  BinaryMask single(10, 10);
  single.set(3, 5, true);
  CHECK(bounding_box_of(single) == BoundingBox{5, 3, 6, 4});
  CHECK(bounding_box_of(rect_mask(6, 9, 0, 0, 9, 6)) == BoundingBox{0, 0, 9, 6});
  // L shape: vertical bar at column 2 rows 1..4, horizontal bar on row 4 cols 2..6.
  BinaryMask l(8, 8);
  for (int y = 1; y <= 4; ++y) l.set(y, 2, true);
  for (int x = 2; x <= 6; ++x) l.set(4, x, true);
  CHECK(bounding_box_of(l) == BoundingBox{2, 1, 7, 5});
  CHECK_THROWS_AS(bounding_box_of(BinaryMask(3, 3)), InvalidArgument);
}

TEST_CASE("distance_transform examples") {
  const auto zeros = distance_transform(BinaryMask(6, 7));
  for (double v : zeros.values()) CHECK(v == 0.0);

  const auto square = distance_transform(rect_mask(11, 11, 3, 3, 8, 8));
  CHECK(square(5, 5) == doctest::Approx(3.0));

  BinaryMask single(5, 5);
  single.set(2, 2, true);
  CHECK(distance_transform(single)(2, 2) == doctest::Approx(1.0));

  // Image border counts as background.
  const auto full = distance_transform(rect_mask(3, 5, 0, 0, 5, 3));
  CHECK(full(0, 0) == doctest::Approx(1.0));
  CHECK(full(1, 2) == doctest::Approx(2.0));
}

TEST_CASE("distance_transform matches brute force on random 32x32 masks") {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    const auto m = testing::random_mask(rng, 32, 32, 0.5 + 0.02 * t);
    const auto fast = distance_transform(m);
    const auto slow = testing::brute_force_distance(m);
    for (std::size_t i = 0; i < fast.size(); ++i) CHECK(std::abs(fast.values()[i] - slow.values()[i]) < 1e-6);
  }
}

TEST_CASE("label map conversions") {
  CHECK(label_map_to_masks(LabelMap(4, 4, 0)).empty());

  LabelMap lm(4, 4, 0);
  lm(0, 0) = 1;
  lm(3, 3) = 2;
  lm(3, 2) = 2;
  const auto masks = label_map_to_masks(lm);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].first == 1);
  CHECK(masks[1].second.area() == 2);
  CHECK(mask_iou(masks[0].second, masks[1].second) == 0.0);

  std::vector<BinaryMask> only;
  for (auto& [id, m] : masks) only.push_back(m);
  CHECK(masks_to_label_map(only) == lm);

  CHECK(masks_to_label_map({}, 3, 3) == LabelMap(3, 3, 0));
  const auto one = masks_to_label_map({rect_mask(4, 4, 0, 0, 2, 2)});
  CHECK(instance_count(one) == 1);

  const auto a = rect_mask(4, 4, 0, 0, 3, 3);
  const auto b = rect_mask(4, 4, 2, 2, 4, 4);
  const auto painted = masks_to_label_map({a, b});
  CHECK(painted(2, 2) == 2);
  CHECK(painted(0, 0) == 1);
  CHECK_THROWS_AS(masks_to_label_map({a, rect_mask(5, 4, 0, 0, 1, 1)}), DimensionMismatch);
}

TEST_CASE("label map round trip on random disjoint instances") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    auto lm = testing::random_disk_labels(rng, 24, 20, 6, 1.5, 5.0);
    std::vector<BinaryMask> masks;
    for (auto& [id, m] : label_map_to_masks(lm)) masks.push_back(m);
    CHECK(masks_to_label_map(masks, 24, 20) == lm);
  }
}

TEST_CASE("canonicalize relabels by rank") {
  LabelMap lm(1, 4, 0);
  lm(0, 1) = 7;
  lm(0, 2) = 3;
  lm(0, 3) = 7;
  CHECK(canonicalize_labels(lm) == 2);
  CHECK(lm(0, 1) == 2);
  CHECK(lm(0, 2) == 1);
}

TEST_CASE("stability_score examples") {
  CHECK(stability_score(RealGrid(4, 4, 10.0), 0.0, 1.0) == 1.0);
  CHECK(stability_score(RealGrid(4, 4, -5.0), 0.0, 1.0) == 0.0);
  // Nested plateaus: 50 pixels at +2, another 50 at +0.5, the rest at -2.
  RealGrid nested(10, 20, -2.0);
  for (int i = 0; i < 100; ++i) nested(i / 20, i % 20) = i < 50 ? 2.0 : 0.5;
  CHECK(stability_score(nested, 0.0, 1.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(stability_score(nested, 0.0, 0.0), InvalidArgument);
}
