#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "cellprompt/error.hpp"
#include "cellprompt/inference.hpp"
#include "cellprompt/synthetic.hpp"

using namespace cellprompt;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.input_resolution = 64;
  c.patch_size = 16;
  c.pe_grid = 8;
  c.depth = 1;
  c.decoder_depth = 1;
  return c;
}

// Forces the probability head to a constant: zero output weights, bias = level.
void set_probability_head(PromptableSegmenter& m, double level) {
  for (auto& p : m.parameters()) {
    if (p.name == "mask_decoder.iou_head.2.weight") p.tensor.mutable_value().setZero();
    if (p.name == "mask_decoder.iou_head.2.bias") p.tensor.mutable_value().setConstant(level);
  }
}

Image blob_picture(std::uint64_t seed, int size) {
  Rng rng(seed);
  synthetic::BlobImageConfig cfg;
  cfg.size = size;
  cfg.blob_count = 6;
  cfg.min_radius = 4;
  cfg.max_radius = 10;
  return synthetic::blob_image(rng, cfg, "x").image;
}

} // namespace

TEST_CASE("grid_points placement") {
  GridConfig cfg;
  const auto pts = grid_points(cfg, 512);
  REQUIRE(pts.size() == 1024);
  CHECK(pts[0] == Point{8, 8});
  CHECK(pts[1] == Point{24, 8});
  CHECK(pts[32] == Point{8, 24});
  CHECK(pts.back() == Point{504, 504});
  for (const auto& p : pts) {
    CHECK(p.x > 0);
    CHECK(p.x < 512);
    CHECK(p.y > 0);
    CHECK(p.y < 512);
  }
  cfg.points_per_side = 1;
  CHECK(grid_points(cfg, 512) == std::vector<Point>{{256, 256}});
  cfg.points_per_side = 7;
  for (const auto& p : grid_points(cfg, 7)) {
    CHECK(p.x >= 0);
    CHECK(p.x < 7);
  }
  cfg.points_per_side = 33;
  CHECK_THROWS_AS(grid_points(cfg, 32), InvalidArgument);
}

TEST_CASE("grid config validation and json") {
  GridConfig c;
  CHECK(c.issues().empty());
  CHECK(GridConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK(GridConfig::from_json({{"points_per_side", 8}}).points_per_side == 8);
  CHECK_THROWS_AS(GridConfig::from_json({{"points_per_side", 0}}), ConfigError);
  CHECK_THROWS_AS(GridConfig::from_json({{"nms_tau", 1.5}}), ConfigError);
  CHECK_THROWS_AS(GridConfig::from_json({{"stability_offset", 0.0}}), ConfigError);
  CHECK_THROWS_AS(GridConfig::from_json({{"grid", 3}}), ConfigError);
}

TEST_CASE("a zero probability head filters everything") {
  PromptableSegmenter m(small_config(), 1);
  set_probability_head(m, 0.0);
  const auto img = blob_picture(2, 64);
  m.reset_encoder_invocations();
  const auto res = segment_image(img, m, GridConfig{});
  CHECK(res.instances.empty());
  CHECK(res.candidates == 0);
  CHECK(res.prompts == 1024);
  CHECK(res.encoder_calls == 1);
  CHECK(m.encoder_invocations() == 1);
  CHECK(instance_count(res.label_map) == 0);
  CHECK(res.label_map.height() == 64);
}

TEST_CASE("segment_image invariants with an always-confident head") {
  PromptableSegmenter m(small_config(), 3);
  set_probability_head(m, 1.0);
  GridConfig cfg;
  cfg.points_per_side = 16;
  const auto img = blob_picture(4, 64);
  const auto res = segment_image(img, m, cfg);
  REQUIRE(res.candidates > 0);
  REQUIRE(!res.instances.empty());
  CHECK(res.encoder_calls == 1);

  // Ids are 1..K, K = kept count, and each id is painted.
  CHECK(instance_count(res.label_map) == static_cast<std::int32_t>(res.instances.size()));
  std::vector<BinaryMask> masks;
  for (std::size_t i = 0; i < res.instances.size(); ++i) {
    const auto& d = res.instances[i];
    masks.push_back(d.mask);
    CHECK(d.score == d.cell_probability * d.stability);
    CHECK(d.box == bounding_box_of(d.mask));
    if (i > 0) CHECK(res.instances[i - 1].score >= d.score);
    for (std::size_t j = 0; j < i; ++j) CHECK(mask_iou(res.instances[j].mask, d.mask) <= cfg.nms_tau);
  }
  CHECK(masks_to_label_map(masks, 64, 64) == res.label_map);

  const auto again = segment_image(img, m, cfg);
  CHECK(again.label_map == res.label_map);
  CHECK(again.instances.size() == res.instances.size());
}

TEST_CASE("non-native image sizes are resized in and out") {
  PromptableSegmenter m(small_config(), 5);
  set_probability_head(m, 1.0);
  GridConfig cfg;
  cfg.points_per_side = 8;
  const auto img = resize_image_bilinear(blob_picture(6, 64), 50, 90);
  const auto res = segment_image(img, m, cfg);
  CHECK(res.label_map.height() == 50);
  CHECK(res.label_map.width() == 90);
  CHECK(instance_count(res.label_map) == static_cast<std::int32_t>(res.instances.size()));
  REQUIRE(res.boxes.size() == res.instances.size());
  for (std::size_t k = 0; k < res.boxes.size(); ++k) {
    BinaryMask mk(50, 90);
    for (int y = 0; y < 50; ++y)
      for (int x = 0; x < 90; ++x) mk.set(y, x, res.label_map(y, x) == static_cast<std::int32_t>(k + 1));
    CHECK(res.boxes[k] == bounding_box_of(mk));
  }
}

TEST_CASE("prediction files") {
  PromptableSegmenter m(small_config(), 7);
  set_probability_head(m, 1.0);
  GridConfig cfg;
  cfg.points_per_side = 8;
  const auto res = segment_image(blob_picture(8, 64), m, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "cellprompt_test_inference";
  std::filesystem::remove_all(dir);
  write_prediction(dir, "img", res, cfg, {{"weights", "w.cpk"}});
  CHECK(read_label_map(dir / "img.png") == res.label_map);
  std::ifstream f(dir / "img.json");
  const auto j = nlohmann::json::parse(f);
  CHECK(j.at("schema_version") == 1);
  CHECK(j.at("instances").size() == res.instances.size());
  CHECK(j.at("grid_config") == cfg.to_json());
  CHECK(j.at("provenance").at("weights") == "w.cpk");
  if (!res.instances.empty()) {
    const auto& first = j.at("instances")[0];
    for (const char* key : {"box", "score", "cell_probability", "stability"}) CHECK_MESSAGE(first.contains(key), key);
  }
  CHECK(j.contains("timing_ms"));
}
