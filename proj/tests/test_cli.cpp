#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "cellprompt/checkpoint.hpp"
#include "cellprompt/cli.hpp"
#include "cellprompt/pipeline.hpp"

using namespace cellprompt;

namespace {

namespace fs = std::filesystem;

BackboneConfig small_config() {
  BackboneConfig c;
  c.input_resolution = 64;
  c.patch_size = 16;
  c.pe_grid = 8;
  c.depth = 1;
  c.decoder_depth = 1;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct Workspace {
  fs::path root = fs::temp_directory_path() / "cellprompt_test_cli";
  fs::path backbone = root / "backbone.cpk";

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    PromptableSegmenter m(small_config(), 21);
    save_backbone(m, backbone);
  }

  fs::path operator/(const std::string& s) const { return root / s; }

  void synth(const std::string& name, int count, int seed) const {
    REQUIRE(run_cli({"synth", "--out", (root / name).string(), "--count", std::to_string(count), "--seed",
                     std::to_string(seed), "--size", "64", "--blobs", "5", "--min-radius", "4", "--max-radius", "9"}) == 0);
  }

  std::vector<std::string> train_args(const std::string& out) const {
    return {"train",        "--data-root", (root / "train").string(), "--out", (root / out).string(),
            "--backbone",   "external",    "--weights", backbone.string(), "--patch-size", "64",
            "--min-patches", "4",          "--quiet"};
  }
};

} // namespace

TEST_CASE("help and usage errors") {
  CHECK(run_cli({"--help"}) == 0);
  CHECK(run_cli({"train", "--help"}) == 0);
  CHECK(run_cli({}) != 0);
  CHECK(run_cli({"train", "--out", "x.cpk"}) != 0);
  CHECK(run_cli({"train", "--data-root", "/nonexistent/dir", "--out", "x.cpk"}) != 0);
  CHECK(run_cli({"evaluate", "--pred", "/nonexistent"}) != 0);
  CHECK(run_cli({"nms-bench", "--no-such-flag"}) != 0);
  CHECK(run_cli({"frobnicate"}) != 0);
}

TEST_CASE("evaluate on identical prediction and ground truth") {
  Workspace ws;
  ws.synth("gt", 3, 2);
  const auto out = ws / "eval.json";
  REQUIRE(run_cli({"evaluate", "--pred", (ws / "gt/masks").string(), "--gt", (ws / "gt").string(), "--out", out.string()}) == 0);
  const auto j = read_json_file(out);
  CHECK(j.at("map") == 1.0);
  CHECK(j.at("threshold") == 0.5);
  CHECK(j.at("per_image").size() == 3);
  CHECK(j.at("per_image")[0].contains("name"));
  CHECK(j.at("per_image")[0].at("ap") == 1.0);
  // Missing prediction for a ground-truth stem.
  fs::create_directories(ws / "empty_pred");
  CHECK(run_cli({"evaluate", "--pred", (ws / "empty_pred").string(), "--gt", (ws / "gt").string()}) != 0);
  CHECK(run_cli({"evaluate", "--pred", (ws / "gt/masks").string(), "--gt", (ws / "gt").string(), "--threshold", "0"}) != 0);
}

TEST_CASE("nms-bench record") {
  Workspace ws;
  const auto out = ws / "bench.json";
  REQUIRE(run_cli({"nms-bench", "--scenes", "20", "--max-masks", "30", "--out", out.string()}) == 0);
  const auto j = read_json_file(out);
  REQUIRE(j.at("records").size() == 3);
  for (const auto& r : j.at("records"))
    for (const char* key : {"strategy", "kept_count", "mask_iou_evaluations", "wall_time_ms"}) CHECK_MESSAGE(r.contains(key), key);
  CHECK(j.at("records")[0].at("kept_count") == j.at("records")[1].at("kept_count"));
  CHECK(j.at("records")[0].at("mask_iou_evaluations").get<std::int64_t>() <=
        j.at("records")[1].at("mask_iou_evaluations").get<std::int64_t>());
  CHECK(j.at("disagreements") == 0);
  REQUIRE(run_cli({"nms-bench", "--scenes", "20", "--max-masks", "30", "--out", (ws / "bench2.json").string()}) == 0);
  auto a = read_json_file(out), b = read_json_file(ws / "bench2.json");
  for (auto* x : {&a, &b})
    for (auto& r : (*x)["records"]) r.erase("wall_time_ms");
  CHECK(a == b);
}

TEST_CASE("train, predict, evaluate with config precedence and determinism") {
  Workspace ws;
  ws.synth("train", 1, 3);
  ws.synth("held", 2, 4);

  // Config file sets epochs and seed; the flag overrides epochs only.
  write_json_file(ws / "train.json", {{"epochs", 5}, {"seed", 7}, {"negative_loss_mode", "bce_only"}});
  auto args = ws.train_args("a.cpk");
  args.insert(args.end(), {"--config", (ws / "train.json").string(), "--epochs", "2"});
  REQUIRE(run_cli(args) == 0);
  const auto report = read_json_file(ws / "a.report.json");
  CHECK(report.at("config_echo").at("epochs") == 2);
  CHECK(report.at("config_echo").at("seed") == 7);
  CHECK(report.at("config_echo").at("negative_loss_mode") == "bce_only");
  CHECK(report.at("loss_per_epoch").size() == 2);
  CHECK(report.at("backbone").at("variant") == "external");

  // Same flags, same seed: byte-identical checkpoints.
  REQUIRE(run_cli(args) == 0);
  const auto first = slurp(ws / "a.cpk");
  auto again = args;
  again[4] = (ws / "b.cpk").string();
  REQUIRE(run_cli(again) == 0);
  CHECK(slurp(ws / "b.cpk") == first);

  // Invalid effective configuration is rejected before training.
  auto bad = ws.train_args("bad.cpk");
  bad.insert(bad.end(), {"--batch-size", "8", "--grad-accum", "8"});
  CHECK(run_cli(bad) == 2);
  CHECK(!fs::exists(ws / "bad.cpk"));

  const std::vector<std::string> predict{"predict", "--weights", (ws / "a.cpk").string(), "--input", (ws / "held").string(),
                                         "--out", (ws / "pred").string(), "--backbone", "external", "--backbone-weights",
                                         ws.backbone.string(), "--points-per-side", "16", "--quiet"};
  REQUIRE(run_cli(predict) == 0);
  for (const char* stem : {"blob_000", "blob_001"}) {
    CHECK(fs::exists(ws / "pred" / (std::string(stem) + ".png")));
    const auto side = read_json_file(ws / "pred" / (std::string(stem) + ".json"));
    CHECK(side.at("grid_config").at("points_per_side") == 16);
    CHECK(side.at("provenance").contains("weights"));
  }
  CHECK(read_json_file(ws / "pred/predictions.json").at("images").size() == 2);
  auto predict2 = predict;
  predict2[6] = (ws / "pred2").string();
  REQUIRE(run_cli(predict2) == 0);
  CHECK(slurp(ws / "pred/blob_000.png") == slurp(ws / "pred2/blob_000.png"));
  CHECK(slurp(ws / "pred/blob_001.png") == slurp(ws / "pred2/blob_001.png"));

  REQUIRE(run_cli({"evaluate", "--pred", (ws / "pred").string(), "--gt", (ws / "held").string()}) == 0);
  const auto ev = read_json_file(ws / "pred/evaluation.json");
  CHECK(ev.at("map").get<double>() >= 0.0);
  CHECK(ev.at("map").get<double>() <= 1.0);
  CHECK(ev.at("per_image").size() == 2);

  // An adapter applied to a different backbone is refused.
  PromptableSegmenter other(small_config(), 99);
  save_backbone(other, ws / "other.cpk");
  auto mismatched = predict;
  mismatched[10] = (ws / "other.cpk").string();
  CHECK(run_cli(mismatched) != 0);
}
