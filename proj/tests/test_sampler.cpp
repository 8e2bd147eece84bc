#include "doctest.h"

#include <algorithm>
#include <set>

#include "cellprompt/sampler.hpp"
#include "test_support.hpp"

using namespace cellprompt;

TEST_CASE("single 5x5 cell yields one positive in its interior") {
  LabelMap lm(15, 15, 0);
  for (int y = 5; y < 10; ++y)
    for (int x = 5; x < 10; ++x) lm(y, x) = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto s = sample_prompts(lm, {}, rng);
    const auto positives = std::count_if(s.begin(), s.end(), [](auto& p) { return p.polarity == Polarity::positive; });
    CHECK(positives == 1);
    const auto& p = s.front();
    // Eligible set at the 0.8 quantile (distance 2) is the 3x3 core around the centre (7,7).
    CHECK(std::abs(p.point.x - 7) <= 1);
    CHECK(std::abs(p.point.y - 7) <= 1);
    CHECK(p.target_mask == testing::instance_mask(lm, 1));
    CHECK(p.target_probability == 1.0);
  }
}

TEST_CASE("all-background map gives only negatives") {
  Rng rng(1);
  const auto s = sample_prompts(LabelMap(40, 40, 0), {}, rng);
  CHECK(s.size() == 15);
  for (const auto& p : s) {
    CHECK(p.polarity == Polarity::negative);
    CHECK(p.target_mask.is_empty());
    CHECK(p.target_probability == 0.0);
  }
}

TEST_CASE("no background pixels gives only positives") {
  LabelMap lm(10, 10, 1);
  for (int y = 0; y < 10; ++y)
    for (int x = 5; x < 10; ++x) lm(y, x) = 2;
  Rng rng(2);
  const auto s = sample_prompts(lm, {}, rng);
  CHECK(s.size() == 2);
  for (const auto& p : s) CHECK(p.polarity == Polarity::positive);
}

TEST_CASE("100 instances give 30 distinct-instance positives") {
  LabelMap lm(100, 100, 0);
  for (int k = 0; k < 100; ++k) {
    const int gy = (k / 10) * 10, gx = (k % 10) * 10;
    for (int y = gy + 2; y < gy + 8; ++y)
      for (int x = gx + 2; x < gx + 8; ++x) lm(y, x) = k + 1;
  }
  Rng rng(3);
  const auto s = sample_prompts(lm, {}, rng);
  std::set<std::int32_t> instances;
  int negatives = 0;
  for (const auto& p : s) {
    if (p.polarity == Polarity::positive)
      instances.insert(lm(static_cast<int>(p.point.y), static_cast<int>(p.point.x)));
    else
      ++negatives;
  }
  CHECK(instances.size() == 30);
  CHECK(negatives == 15);
}

TEST_CASE("sampled points respect the brute-force top-20% sets and caps") {
  Rng gen(77);
  for (int t = 0; t < 15; ++t) {
    const auto lm = testing::random_disk_labels(gen, 48, 48, 4 + 4 * t, 1.5, 7);
    BinaryMask background(48, 48);
    for (int y = 0; y < 48; ++y)
      for (int x = 0; x < 48; ++x) background.set(y, x, lm(y, x) == 0);
    const auto bg_top = testing::brute_force_top_set(background, 0.2);

    Rng a(t), b(t);
    const auto s = sample_prompts(lm, {}, a);
    const auto again = sample_prompts(lm, {}, b);
    REQUIRE(s.size() == again.size());
    int pos = 0, neg = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const auto& p = s[i];
      CHECK(p.point == again[i].point);
      const int x = static_cast<int>(p.point.x), y = static_cast<int>(p.point.y);
      if (p.polarity == Polarity::positive) {
        ++pos;
        const auto id = lm(y, x);
        CHECK(id == p.instance_id);
        CHECK(testing::brute_force_top_set(testing::instance_mask(lm, id), 0.2)(y, x));
      } else {
        ++neg;
        CHECK(lm(y, x) == 0);
        CHECK(bg_top(y, x));
      }
    }
    CHECK(pos <= 30);
    CHECK(neg <= 15);
  }
}

TEST_CASE("sampler rejects bad top fraction") {
  Rng rng(0);
  SamplerConfig cfg;
  cfg.top_fraction = 0.0;
  CHECK_THROWS_AS(sample_prompts(LabelMap(4, 4, 0), cfg, rng), InvalidArgument);
}
