#include "cellprompt/cli.hpp"

#include <atomic>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "cellprompt/error.hpp"
#include "cellprompt/pipeline.hpp"
#include "cellprompt/runtime.hpp"
#include "cellprompt/service.hpp"
#include "cellprompt/synthetic.hpp"

namespace cellprompt {

namespace {

constexpr const char* kStoreEnv = "CELLPROMPT_STORE";
constexpr const char* kDefaultStore = "cellprompt_store";

std::atomic<HttpServer*> g_server{nullptr};

void on_signal(int) {
  if (auto* s = g_server.load()) s->stop();
}

bool given(const CLI::Option* opt) { return opt->count() > 0; }

struct BackboneFlags {
  std::string variant = "tiny";
  std::filesystem::path weights;

  void add(CLI::App* app, const std::string& weights_flag) {
    app->add_option("--backbone", variant, "Backbone: tiny (bundled) or external")
        ->check(CLI::IsMember({"tiny", "external"}))
        ->capture_default_str();
    app->add_option(weights_flag, weights, "Backbone checkpoint file (required with --backbone external)")
        ->check(CLI::ExistingFile);
  }

  BackboneSource source() const { return {backbone_variant_from_string(variant), weights}; }
};

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::filesystem::path data_root, out, config, report;
  int epochs = 300;
  std::uint64_t seed = 0;
  std::string negative_loss = "both";
  int batch_size = 4;
  int grad_accum = 8;
  double max_lr = 0.003;
  int patch_size = 256;
  int min_patches = 32;
  bool quiet = false;
  BackboneFlags backbone;
  CLI::Option *epochs_opt, *seed_opt, *negative_opt, *batch_opt, *accum_opt, *lr_opt, *patch_opt, *min_patches_opt;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_json_file(a.config));
  if (given(a.epochs_opt)) cfg.epochs = a.epochs;
  if (given(a.seed_opt)) cfg.seed = a.seed;
  if (given(a.negative_opt)) cfg.negative_loss_mode = negative_loss_mode_from_string(a.negative_loss);
  if (given(a.batch_opt)) cfg.batch_size = a.batch_size;
  if (given(a.accum_opt)) cfg.grad_accum = a.grad_accum;
  if (given(a.lr_opt)) cfg.max_lr = a.max_lr;
  if (given(a.patch_opt)) cfg.patch_size = a.patch_size;
  if (given(a.min_patches_opt)) cfg.min_patches = a.min_patches;
  cfg.validate();

  const auto source = a.backbone.source();
  const auto records = load_dataset(a.data_root, LoadMode::train);
  if (records.empty()) throw NotFound("no training images in " + a.data_root.string());
  const auto base = load_base_model(source);
  const int every = std::max(1, cfg.epochs / 10);
  const auto result = train_adapter(records, cfg, *base, [&](const EpochProgress& p) {
    if (a.quiet || (p.epoch % every != 0 && p.epoch != 1 && p.epoch != p.total_epochs)) return;
    std::printf("epoch %d/%d loss %.5f lr %.3e\n", p.epoch, p.total_epochs, p.loss, p.lr);
    std::fflush(stdout);
  });

  auto ckpt = result.checkpoint;
  ckpt.extra["backbone"] = source.to_json();
  ckpt.extra["data_root"] = std::filesystem::absolute(a.data_root).string();
  if (a.out.has_parent_path()) std::filesystem::create_directories(a.out.parent_path());
  write_adapter(a.out, ckpt);

  auto report = result.report.to_json();
  report["checkpoint"] = std::filesystem::absolute(a.out).string();
  report["backbone"] = source.to_json();
  report["data_root"] = ckpt.extra["data_root"];
  report["training_images"] = records.size();
  auto report_path = a.report;
  if (report_path.empty()) report_path = std::filesystem::path(a.out).replace_extension(".report.json");
  write_json_file(report_path, report);

  const auto& losses = result.report.loss_per_epoch;
  std::printf("trained %d epochs on %zu image(s) in %.1f s, loss %.5f -> %.5f\n", cfg.epochs, records.size(),
              result.report.wall_time_s, losses.empty() ? 0.0 : losses.front(), losses.empty() ? 0.0 : losses.back());
  std::printf("wrote %s and %s\n", a.out.string().c_str(), report_path.string().c_str());
  return 0;
}

// ---- predict -----------------------------------------------------------------

struct PredictArgs {
  std::filesystem::path weights, input, out, config;
  int points_per_side = 32;
  double cell_threshold = 0.5;
  double nms_tau = kDefaultNmsTau;
  bool quiet = false;
  BackboneFlags backbone;
  CLI::Option *points_opt, *threshold_opt, *tau_opt;
};

int run_predict(const PredictArgs& a) {
  GridConfig grid = a.config.empty() ? GridConfig{} : GridConfig::from_json(read_json_file(a.config));
  if (given(a.points_opt)) grid.points_per_side = a.points_per_side;
  if (given(a.threshold_opt)) grid.cell_probability_threshold = a.cell_threshold;
  if (given(a.tau_opt)) grid.nms_tau = a.nms_tau;
  grid.validate();

  const auto source = a.backbone.source();
  const auto model = load_adapted_model(a.weights, source);
  const auto inputs = load_prediction_inputs(a.input);
  if (inputs.empty()) throw NotFound("no images in " + a.input.string());
  const nlohmann::json provenance{{"weights", std::filesystem::absolute(a.weights).string()},
                                  {"backbone", source.to_json()},
                                  {"grid_config", grid.to_json()}};
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& rec : inputs) {
    const auto res = segment_image(rec, *model, grid);
    write_prediction(a.out, rec.name, res, grid, provenance);
    rows.push_back({{"name", rec.name}, {"instance_count", res.instances.size()}, {"timing_ms", res.timing_ms}});
    if (!a.quiet) std::printf("%s: %zu instances (%.0f ms)\n", rec.name.c_str(), res.instances.size(), res.timing_ms);
  }
  auto summary = provenance;
  summary["schema_version"] = 1;
  summary["input"] = std::filesystem::absolute(a.input).string();
  summary["images"] = rows;
  write_json_file(a.out / "predictions.json", summary);
  std::printf("wrote %zu prediction(s) to %s\n", inputs.size(), a.out.string().c_str());
  return 0;
}

// ---- evaluate ----------------------------------------------------------------

struct EvaluateArgs {
  std::filesystem::path pred, gt, out;
  double threshold = 0.5;
};

int run_evaluate(const EvaluateArgs& a) {
  if (!(a.threshold > 0.0 && a.threshold <= 1.0)) throw ConfigError(std::vector<FieldIssue>{{"threshold", "must lie in (0,1]"}});
  const auto report = evaluate_directories(a.pred, a.gt, a.threshold);
  auto j = report.to_json();
  j["pred"] = std::filesystem::absolute(a.pred).string();
  j["gt"] = std::filesystem::absolute(a.gt).string();
  const auto out = a.out.empty() ? a.pred / "evaluation.json" : a.out;
  write_json_file(out, j);
  for (const auto& s : report.per_image)
    std::printf("%s: ap %.4f (tp %d fp %d fn %d)\n", s.name.c_str(), s.ap, s.tp, s.fp, s.fn);
  std::printf("map %.4f over %zu image(s) at iou %.2f\n", report.map, report.per_image.size(), report.threshold);
  return 0;
}

// ---- nms-bench ---------------------------------------------------------------

struct NmsBenchArgs {
  int scenes = 200;
  int max_masks = 50;
  int size = 128;
  std::uint64_t seed = 0;
  double tau = kDefaultNmsTau;
  std::filesystem::path out = "nms_bench.json";
};

int run_nms_bench(const NmsBenchArgs& a) {
  const auto report = nms_benchmark(a.scenes, a.max_masks, a.size, a.seed, a.tau);
  auto j = report.to_json();
  j["tau"] = a.tau;
  write_json_file(a.out, j);
  for (const auto& r : report.records)
    std::printf("%-12s kept %8lld  mask-iou evaluations %10lld  %9.2f ms\n", r.strategy.c_str(),
                static_cast<long long>(r.kept_count), static_cast<long long>(r.mask_iou_evaluations), r.wall_time_ms);
  std::printf("optimized vs brute force disagreements: %d of %d scenes\n", report.disagreements, report.scenes);
  return report.disagreements == 0 ? 0 : 1;
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  std::filesystem::path out;
  int count = 1;
  std::uint64_t seed = 0;
  std::string prefix = "blob";
  synthetic::BlobImageConfig blobs;
};

int run_synth(const SynthArgs& a) {
  if (a.count < 1) throw InvalidArgument("--count must be positive");
  synthetic::write_blob_dataset(a.out, a.count, a.seed, a.blobs, a.prefix);
  std::printf("wrote %d image(s) with masks to %s\n", a.count, a.out.string().c_str());
  return 0;
}

// ---- serve -------------------------------------------------------------------

struct ServeArgs {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path store;
  BackboneFlags backbone;
};

int run_serve(const ServeArgs& a) {
  ServiceOptions options;
  options.store = a.store;
  if (options.store.empty()) {
    const char* env = std::getenv(kStoreEnv);
    options.store = env && *env ? env : kDefaultStore;
  }
  options.backbone = a.backbone.source();
  JobService service(options);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::printf("serving on http://%s:%d with store %s\n", a.host.c_str(), port, options.store.string().c_str());
  std::fflush(stdout);
  server.run();
  g_server = nullptr;
  return 0;
}

} // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"One-image cell instance segmentation: train LoRA adapters, predict, evaluate, serve"};
  app.name("cellprompt");
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Fit LoRA adapters on a labelled dataset");
  t->add_option("--data-root", train.data_root, "Dataset root with images/ and masks/")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", train.out, "Adapter checkpoint to write")->required();
  t->add_option("--config", train.config, "TrainConfig JSON; flags override its fields")->check(CLI::ExistingFile);
  t->add_option("--report", train.report, "Training report JSON (default: <out> with .report.json)");
  train.epochs_opt = t->add_option("--epochs", train.epochs, "Passes over the replicated patch list")->capture_default_str();
  train.seed_opt = t->add_option("--seed", train.seed, "Seed for adapters, augmentation, sampling and dropout")->capture_default_str();
  train.negative_opt = t->add_option("--negative-loss", train.negative_loss, "Loss on negative prompts")
                           ->check(CLI::IsMember({"both", "bce_only", "mse_only", "bce", "mse"}))
                           ->capture_default_str();
  train.batch_opt = t->add_option("--batch-size", train.batch_size, "Patches per forward batch")->capture_default_str();
  train.accum_opt = t->add_option("--grad-accum", train.grad_accum, "Batches per optimizer step")->capture_default_str();
  train.lr_opt = t->add_option("--max-lr", train.max_lr, "Peak one-cycle learning rate")->capture_default_str();
  train.patch_opt = t->add_option("--patch-size", train.patch_size, "Training patch side in pixels")->capture_default_str();
  train.min_patches_opt = t->add_option("--min-patches", train.min_patches, "Replicate patches up to this count")->capture_default_str();
  t->add_flag("--quiet", train.quiet, "Suppress per-epoch progress lines");
  train.backbone.add(t, "--weights");

  PredictArgs predict;
  auto* p = app.add_subcommand("predict", "Segment images with a trained adapter");
  p->add_option("--weights", predict.weights, "Adapter checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--input", predict.input, "Directory of images, or a dataset root with images/")->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", predict.out, "Output directory for label maps and JSON sidecars")->required();
  p->add_option("--config", predict.config, "GridConfig JSON; flags override its fields")->check(CLI::ExistingFile);
  predict.points_opt = p->add_option("--points-per-side", predict.points_per_side, "Prompt grid side")->capture_default_str();
  predict.threshold_opt = p->add_option("--cell-threshold", predict.cell_threshold, "Minimum cell probability")->capture_default_str();
  predict.tau_opt = p->add_option("--nms-tau", predict.nms_tau, "Mask IoU suppression threshold")->capture_default_str();
  p->add_flag("--quiet", predict.quiet, "Suppress per-image lines");
  predict.backbone.add(p, "--backbone-weights");

  EvaluateArgs evaluate;
  auto* e = app.add_subcommand("evaluate", "Score predicted label maps against ground truth");
  e->add_option("--pred", evaluate.pred, "Directory of predicted label maps")->required()->check(CLI::ExistingDirectory);
  e->add_option("--gt", evaluate.gt, "Ground-truth directory, or a dataset root with masks/")->required()->check(CLI::ExistingDirectory);
  e->add_option("--threshold", evaluate.threshold, "IoU threshold for a true positive")->capture_default_str();
  e->add_option("--out", evaluate.out, "Report JSON (default: <pred>/evaluation.json)");

  NmsBenchArgs bench;
  auto* n = app.add_subcommand("nms-bench", "Compare mask NMS strategies on random scenes");
  n->add_option("--scenes", bench.scenes, "Number of random scenes")->capture_default_str();
  n->add_option("--max-masks", bench.max_masks, "Upper bound on masks per scene")->capture_default_str();
  n->add_option("--size", bench.size, "Scene side in pixels")->capture_default_str();
  n->add_option("--seed", bench.seed, "Scene seed")->capture_default_str();
  n->add_option("--tau", bench.tau, "Mask IoU suppression threshold")->capture_default_str();
  n->add_option("--out", bench.out, "Report JSON")->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic blob dataset");
  s->add_option("--out", synth.out, "Dataset root to create")->required();
  s->add_option("--count", synth.count, "Number of images")->capture_default_str();
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_option("--prefix", synth.prefix, "File name prefix")->capture_default_str();
  s->add_option("--size", synth.blobs.size, "Image side in pixels")->capture_default_str();
  s->add_option("--blobs", synth.blobs.blob_count, "Blobs per image")->capture_default_str();
  s->add_option("--min-radius", synth.blobs.min_radius, "Smallest blob radius")->capture_default_str();
  s->add_option("--max-radius", synth.blobs.max_radius, "Largest blob radius")->capture_default_str();

  ServeArgs serve;
  auto* v = app.add_subcommand("serve", "Run the HTTP job service");
  v->add_option("--host", serve.host, "Interface to bind")->capture_default_str();
  v->add_option("--port", serve.port, "TCP port (0 picks a free one)")->capture_default_str();
  v->add_option("--store", serve.store, std::string("Store directory (default: $") + kStoreEnv + ", else ./" + kDefaultStore + ")");
  serve.backbone.add(v, "--backbone-weights");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err);
  }

  try {
    tune_allocator();
    if (t->parsed()) return run_train(train);
    if (p->parsed()) return run_predict(predict);
    if (e->parsed()) return run_evaluate(evaluate);
    if (n->parsed()) return run_nms_bench(bench);
    if (s->parsed()) return run_synth(synth);
    if (v->parsed()) return run_serve(serve);
  } catch (const ConfigError& err) {
    std::cerr << "cellprompt: invalid configuration\n";
    for (const auto& i : err.issues()) std::cerr << "  " << i.field << ": " << i.message << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "cellprompt: error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> owned{"cellprompt"};
  owned.insert(owned.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : owned) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run_cli(static_cast<int>(owned.size()), argv.data());
}

} // namespace cellprompt
