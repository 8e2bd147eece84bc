#include "doctest.h"

#include <filesystem>
#include <set>

#include "cellprompt/datasets.hpp"
#include "cellprompt/synthetic.hpp"
#include "test_support.hpp"

using namespace cellprompt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("cellprompt_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ImageRecord gradient_record(int h, int w) {
  RawImage raw{h, w, 1, {}};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) raw.values.push_back((x * 7 + y * 3) % 256);
  Rng rng(4);
  return make_record(raw, testing::random_disk_labels(rng, h, w, 12, 3, 12), "grad");
}

std::set<std::int32_t> ids_of(const LabelMap& lm) {
  std::set<std::int32_t> ids;
  for (auto v : lm.values())
    if (v > 0) ids.insert(v);
  return ids;
}

} // namespace

TEST_CASE("normalize_image examples") {
  RawImage u8{1, 4, 1, {0, 17, 200, 255}};
  const auto a = normalize_image(u8);
  CHECK(a.at(0, 1, 0) == 17);
  CHECK(a.at(0, 2, 2) == 200);
  CHECK(a.at(0, 3, 1) == 255);

  RawImage constant{2, 2, 3, std::vector<double>(12, 42.0)};
  for (auto p : normalize_image(constant).pixels) CHECK(p == 0);

  RawImage floats{1, 3, 1, {-1.0, 1.0, 0.0}};
  const auto f = normalize_image(floats);
  CHECK(f.at(0, 0, 0) == 0);
  CHECK(f.at(0, 1, 0) == 255);
  CHECK(f.at(0, 2, 0) == 128);

  RawImage bad{1, 2, 1, {0.0, std::nan("")}};
  CHECK_THROWS_AS(normalize_image(bad), InvalidArgument);
  RawImage two_channel{1, 1, 2, {0.0, 1.0}};
  CHECK_THROWS_AS(normalize_image(two_channel), InvalidArgument);
}

TEST_CASE("load_dataset reads, canonicalizes and sorts") {
  const auto root = fresh_dir("load");
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  Image gray(6, 5, 0);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 3; ++c) gray.at(y, x, c) = static_cast<std::uint8_t>(40 * y + x);
  write_image(root / "images" / "b.png", gray);
  write_image(root / "images" / "a.png", gray);
  LabelMap mask(6, 5, 0);
  mask(0, 0) = 3;
  mask(4, 4) = 7;
  write_label_map(root / "masks" / "a.png", mask);
  write_label_map(root / "masks" / "b.png", mask);

  const auto records = load_dataset(root, LoadMode::train);
  REQUIRE(records.size() == 2);
  CHECK(records[0].name == "a");
  CHECK(records[1].name == "b");
  REQUIRE(records[0].labels.has_value());
  CHECK(ids_of(*records[0].labels) == std::set<std::int32_t>{1, 2});
  CHECK((*records[0].labels)(4, 4) == 2);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 5; ++x) {
      CHECK(records[0].image.at(y, x, 0) == records[0].image.at(y, x, 1));
      CHECK(records[0].image.at(y, x, 1) == records[0].image.at(y, x, 2));
    }

  fs::remove(root / "masks" / "b.png");
  CHECK_THROWS_AS(load_dataset(root, LoadMode::train), NotFound);
  fs::remove(root / "masks" / "a.png");
  const auto predict = load_dataset(root, LoadMode::predict);
  REQUIRE(predict.size() == 2);
  CHECK_FALSE(predict[0].labels.has_value());

  write_label_map(root / "masks" / "a.png", LabelMap(3, 3, 0));
  CHECK_THROWS_AS(load_dataset(root, LoadMode::predict), DimensionMismatch);
  CHECK_THROWS_AS(load_dataset(root / "missing", LoadMode::predict), NotFound);
}

TEST_CASE("window starts and patch counts") {
  CHECK(window_starts(512, 256, 128) == std::vector<int>{0, 128, 256});
  CHECK(window_starts(256, 256, 128) == std::vector<int>{0});
  CHECK(window_starts(300, 256, 128) == std::vector<int>{0, 44});
  CHECK(extract_patches(gradient_record(512, 512)).patches.size() == 9);
  CHECK(extract_patches(gradient_record(256, 256)).patches.size() == 1);
  CHECK(extract_patches(gradient_record(300, 300)).patches.size() == 4);
}

TEST_CASE("patch windows cover every pixel") {
  for (int extent : {256, 257, 300, 511, 512, 700}) {
    std::vector<int> hits(extent, 0);
    for (int s : window_starts(extent, 256, 128))
      for (int i = s; i < s + 256; ++i) hits[i]++;
    for (int h : hits) CHECK(h >= 1);
  }
}

TEST_CASE("patches are canonical and small images are padded") {
  const auto ps = extract_patches(gradient_record(300, 280));
  for (const auto& p : ps.patches) {
    CHECK(p.image.height == 256);
    CHECK(p.image.width == 256);
    const auto ids = ids_of(*p.labels);
    if (!ids.empty()) CHECK(*ids.rbegin() == static_cast<std::int32_t>(ids.size()));
  }
  const auto small = extract_patches(gradient_record(100, 60));
  REQUIRE(small.patches.size() == 1);
  CHECK(small.patches[0].image.width == 256);
  // Mirrored copies of instances are distinct ids.
  CHECK(instance_count(*small.patches[0].labels) > instance_count(*gradient_record(100, 60).labels));
}

TEST_CASE("replicate_to_minimum") {
  PatchSet ps;
  ps.patches.assign(9, gradient_record(256, 256));
  auto r = replicate_to_minimum(ps, 32);
  CHECK(r.replication_factor == 4);
  CHECK(r.patches.size() == 36);
  ps.patches.assign(32, gradient_record(256, 256));
  CHECK(replicate_to_minimum(ps, 32).patches.size() == 32);
  ps.patches.assign(1, gradient_record(256, 256));
  r = replicate_to_minimum(ps, 32);
  CHECK(r.patches.size() == 32);
  CHECK(r.replication_factor == 32);
  CHECK_THROWS_AS(replicate_to_minimum(PatchSet{}, 32), InvalidArgument);
}

TEST_CASE("augment with every probability at zero is the identity") {
  const auto rec = gradient_record(64, 64);
  Rng rng(0);
  const auto out = augment(rec, AugmentationConfig::none(), rng);
  CHECK(out.image == rec.image);
  CHECK(*out.labels == *rec.labels);
}

TEST_CASE("flips are involutions") {
  const auto rec = gradient_record(33, 40);
  for (auto axis : {FlipAxis::horizontal, FlipAxis::vertical, FlipAxis::both}) {
    const auto twice = flip_record(flip_record(rec, axis), axis);
    CHECK(twice.image == rec.image);
    CHECK(*twice.labels == *rec.labels);
  }
}

TEST_CASE("augment is reproducible and never invents ids") {
  Rng seed_rng(12);
  const auto rec = synthetic::blob_image(seed_rng, {}, "blob");
  const auto input_ids = ids_of(*rec.labels);
  AugmentationConfig cfg;
  for (int t = 0; t < 10; ++t) {
    Rng a(100 + t), b(100 + t);
    const auto x = augment(rec, cfg, a);
    const auto y = augment(rec, cfg, b);
    CHECK(x.image == y.image);
    CHECK(*x.labels == *y.labels);
    CHECK(x.image.height == 256);
    for (auto id : ids_of(*x.labels)) CHECK(input_ids.count(id) == 1);
  }
}

TEST_CASE("resize_record") {
  const auto rec = gradient_record(64, 48);
  const auto same = resize_record(rec, 64, 48);
  CHECK(same.image == rec.image);
  CHECK(*same.labels == *rec.labels);

  Rng rng(6);
  const auto big = make_record(RawImage{128, 128, 1, std::vector<double>(128 * 128, 1.0)},
                               testing::random_disk_labels(rng, 128, 128, 40, 0.5, 3), "big");
  const auto down = resize_record(big, 32, 32);
  CHECK(instance_count(*down.labels) <= instance_count(*big.labels));

  // Blobs of at least 4 px survive an exact 2x up/down round trip.
  const auto blobs = make_record(RawImage{40, 40, 1, std::vector<double>(1600, 1.0)},
                                 testing::random_disk_labels(rng, 40, 40, 6, 1.2, 5), "blobs");
  const auto round = resize_record(resize_record(blobs, 80, 80), 40, 40);
  CHECK(*round.labels == *blobs.labels);
}
