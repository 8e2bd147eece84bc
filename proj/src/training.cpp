#include "cellprompt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "cellprompt/error.hpp"

namespace cellprompt {

using nn::Matrix;
using nn::Tensor;

std::string to_string(NegativeLossMode m) {
  switch (m) {
    case NegativeLossMode::bce_only: return "bce_only";
    case NegativeLossMode::mse_only: return "mse_only";
    case NegativeLossMode::both: return "both";
  }
  return "";
}

NegativeLossMode negative_loss_mode_from_string(const std::string& s) {
  if (s == "bce_only" || s == "bce") return NegativeLossMode::bce_only;
  if (s == "mse_only" || s == "mse") return NegativeLossMode::mse_only;
  if (s == "both") return NegativeLossMode::both;
  throw InvalidArgument("unknown negative loss mode '" + s + "' (expected bce_only, mse_only or both)");
}

// ---- config ------------------------------------------------------------------

std::vector<FieldIssue> TrainConfig::issues() const {
  std::vector<FieldIssue> out;
  auto need = [&](bool ok, const char* field, const std::string& msg) {
    if (!ok) out.push_back({field, msg});
  };
  need(std::isfinite(max_lr) && max_lr > 0.0, "max_lr", "must be positive");
  need(pct_start > 0.0 && pct_start < 1.0, "pct_start", "must lie in (0,1)");
  need(div_factor > 0.0, "div_factor", "must be positive");
  need(final_div_factor > 0.0, "final_div_factor", "must be positive");
  need(beta1 >= 0.0 && beta1 < 1.0, "betas", "beta1 must lie in [0,1)");
  need(beta2 >= 0.0 && beta2 < 1.0, "betas", "beta2 must lie in [0,1)");
  need(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  need(batch_size >= 1, "batch_size", "must be at least 1");
  need(grad_accum >= 1, "grad_accum", "must be at least 1");
  if (batch_size >= 1 && grad_accum >= 1)
    need(effective_batch() == kEffectiveBatch, "grad_accum",
         "batch_size x grad_accum must equal " + std::to_string(kEffectiveBatch) + " (got " +
             std::to_string(batch_size) + " x " + std::to_string(grad_accum) + " = " +
             std::to_string(effective_batch()) + ")");
  need(epochs >= 1, "epochs", "must be at least 1");
  need(patch_size >= 1, "patch_size", "must be positive");
  need(patch_overlap >= 0.0 && patch_overlap < 1.0, "patch_overlap", "must lie in [0,1)");
  need(min_patches >= 1, "min_patches", "must be at least 1");
  need(sampler.max_positive >= 0, "sampler.max_positive", "must be non-negative");
  need(sampler.max_negative >= 0, "sampler.max_negative", "must be non-negative");
  need(sampler.max_positive + sampler.max_negative >= 1, "sampler", "at least one prompt per patch is required");
  need(sampler.top_fraction > 0.0 && sampler.top_fraction <= 1.0, "sampler.top_fraction", "must lie in (0,1]");
  try {
    augmentation.validate();
  } catch (const InvalidArgument& e) {
    out.push_back({"augmentation", e.what()});
  }
  try {
    lora.validate();
  } catch (const InvalidArgument& e) {
    out.push_back({"lora", e.what()});
  }
  return out;
}

void TrainConfig::validate() const {
  auto found = issues();
  if (!found.empty()) throw ConfigError(std::move(found));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"max_lr", max_lr},
          {"pct_start", pct_start},
          {"div_factor", div_factor},
          {"final_div_factor", final_div_factor},
          {"betas", {beta1, beta2}},
          {"weight_decay", weight_decay},
          {"batch_size", batch_size},
          {"grad_accum", grad_accum},
          {"epochs", epochs},
          {"seed", seed},
          {"negative_loss_mode", to_string(negative_loss_mode)},
          {"patch_size", patch_size},
          {"patch_overlap", patch_overlap},
          {"min_patches", min_patches},
          {"augment", augment},
          {"sampler",
           {{"max_positive", sampler.max_positive},
            {"max_negative", sampler.max_negative},
            {"top_fraction", sampler.top_fraction}}},
          {"lora", lora.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError(std::vector<FieldIssue>{{"config", "must be a JSON object"}});
  TrainConfig c;
  std::vector<FieldIssue> problems;
  auto read = [&](const nlohmann::json& obj, const std::string& prefix, const char* key, auto& field) {
    if (!obj.contains(key)) return;
    try {
      field = obj.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      problems.push_back({prefix + key, "has the wrong type"});
    }
  };
  static const std::vector<std::string> known{"max_lr",      "pct_start",  "div_factor",         "final_div_factor",
                                              "betas",       "weight_decay", "batch_size",       "grad_accum",
                                              "epochs",      "seed",       "negative_loss_mode", "patch_size",
                                              "patch_overlap", "min_patches", "augment",          "sampler",
                                              "lora",        "schema_version"};
  for (const auto& [key, value] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) problems.push_back({key, "unknown field"});

  read(j, "", "max_lr", c.max_lr);
  read(j, "", "pct_start", c.pct_start);
  read(j, "", "div_factor", c.div_factor);
  read(j, "", "final_div_factor", c.final_div_factor);
  read(j, "", "weight_decay", c.weight_decay);
  read(j, "", "batch_size", c.batch_size);
  read(j, "", "grad_accum", c.grad_accum);
  read(j, "", "epochs", c.epochs);
  read(j, "", "patch_size", c.patch_size);
  read(j, "", "patch_overlap", c.patch_overlap);
  read(j, "", "min_patches", c.min_patches);
  read(j, "", "augment", c.augment);
  if (j.contains("seed")) {
    if (j.at("seed").is_number_unsigned() || (j.at("seed").is_number_integer() && j.at("seed").get<std::int64_t>() >= 0))
      c.seed = j.at("seed").get<std::uint64_t>();
    else
      problems.push_back({"seed", "must be a non-negative integer"});
  }
  if (j.contains("betas")) {
    const auto& b = j.at("betas");
    if (b.is_array() && b.size() == 2 && b[0].is_number() && b[1].is_number()) {
      c.beta1 = b[0].get<double>();
      c.beta2 = b[1].get<double>();
    } else {
      problems.push_back({"betas", "must be an array of two numbers"});
    }
  }
  if (j.contains("negative_loss_mode")) {
    try {
      c.negative_loss_mode = negative_loss_mode_from_string(j.at("negative_loss_mode").get<std::string>());
    } catch (const std::exception& e) {
      problems.push_back({"negative_loss_mode", e.what()});
    }
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    if (s.is_object()) {
      read(s, "sampler.", "max_positive", c.sampler.max_positive);
      read(s, "sampler.", "max_negative", c.sampler.max_negative);
      read(s, "sampler.", "top_fraction", c.sampler.top_fraction);
    } else {
      problems.push_back({"sampler", "must be an object"});
    }
  }
  if (j.contains("lora")) {
    try {
      c.lora = LoRAConfig::from_json(j.at("lora"));
    } catch (const std::exception& e) {
      problems.push_back({"lora", e.what()});
    }
  }
  if (problems.empty()) problems = c.issues();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

// ---- losses ------------------------------------------------------------------

double bce_loss(const RealGrid& logits, const BinaryMask& target) {
  if (logits.height() != target.height() || logits.width() != target.width())
    throw DimensionMismatch("bce_loss: logits and target differ in shape");
  if (logits.empty()) throw InvalidArgument("bce_loss: empty input");
  double sum = 0.0;
  const auto v = logits.values();
  const auto t = target.pixels().values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = v[i];
    sum += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return sum / static_cast<double>(v.size());
}

double mse_loss(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.size() != targets.size()) throw DimensionMismatch("mse_loss: length mismatch");
  if (predictions.empty()) throw InvalidArgument("mse_loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) sum += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
  return sum / static_cast<double>(predictions.size());
}

void LossBatch::validate() const {
  const auto n = polarities.size();
  if (mask_targets.size() != n || mask_logits.size() != n || prob_targets.size() != n || prob_predictions.size() != n)
    throw InvalidArgument("loss batch: every list must have the same length");
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = polarities[i] == Polarity::positive;
    if (prob_targets[i] != (pos ? 1.0 : 0.0))
      throw InvalidArgument("loss batch: probability target must be 1 for positives and 0 for negatives");
    if (!pos && !mask_targets[i].is_empty()) throw InvalidArgument("loss batch: negative sample with a non-empty mask");
  }
}

double sample_loss(const LossBatch& batch, std::size_t i, NegativeLossMode mode) {
  const bool pos = batch.polarities[i] == Polarity::positive;
  const bool with_bce = pos || mode != NegativeLossMode::mse_only;
  const bool with_mse = pos || mode != NegativeLossMode::bce_only;
  double loss = 0.0;
  if (with_bce) loss += bce_loss(batch.mask_logits[i], batch.mask_targets[i]);
  if (with_mse) {
    const double d = batch.prob_targets[i] - batch.prob_predictions[i];
    loss += d * d;
  }
  return loss;
}

double combined_loss(const LossBatch& batch, NegativeLossMode mode) {
  batch.validate();
  if (batch.polarities.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.polarities.size(); ++i) sum += sample_loss(batch, i, mode);
  return sum / static_cast<double>(batch.polarities.size());
}

Tensor prompt_loss(const PromptableSegmenter& model, const DecoderOutput& out, const nn::ByteMatrix& targets,
                   std::span<const PromptSample> samples, NegativeLossMode mode) {
  const auto n = samples.size();
  if (n == 0) throw InvalidArgument("prompt_loss: no samples");
  if (static_cast<std::size_t>(out.iou.rows()) != n || static_cast<std::size_t>(targets.rows()) != n)
    throw DimensionMismatch("prompt_loss: outputs, targets and samples disagree in count");
  std::vector<nn::real> bce_w(n), mse_w(n);
  Matrix prob(static_cast<Eigen::Index>(n), 1);
  const nn::real inv = nn::real(1) / static_cast<nn::real>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = samples[i].polarity == Polarity::positive;
    bce_w[i] = (pos || mode != NegativeLossMode::mse_only) ? inv : 0;
    mse_w[i] = (pos || mode != NegativeLossMode::bce_only) ? inv : 0;
    prob(static_cast<Eigen::Index>(i), 0) = static_cast<nn::real>(samples[i].target_probability);
  }
  const Tensor bce = nn::upsampled_bce_rows(out.low_res_logits, model.mask_upsample_table(), targets);
  const Tensor mse = nn::squared_error(out.iou, prob);
  return nn::add(nn::weighted_sum(bce, bce_w), nn::weighted_sum(mse, mse_w));
}

// ---- schedule ----------------------------------------------------------------

double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  if (total_steps < 1 || step < 0 || step >= total_steps)
    throw InvalidArgument("lr_at_step: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) +
                          ")");
  const double initial = cfg.max_lr / cfg.div_factor;
  const double final_lr = initial / cfg.final_div_factor;
  const auto peak = static_cast<std::int64_t>(std::floor(cfg.pct_start * static_cast<double>(total_steps)));
  auto anneal = [](double from, double to, double pct) { return to + (from - to) * 0.5 * (1.0 + std::cos(M_PI * pct)); };
  if (step <= peak) {
    if (peak == 0) return cfg.max_lr;
    return anneal(initial, cfg.max_lr, static_cast<double>(step) / static_cast<double>(peak));
  }
  const auto span = total_steps - 1 - peak;
  return anneal(cfg.max_lr, final_lr, static_cast<double>(step - peak) / static_cast<double>(span));
}

// ---- fit ---------------------------------------------------------------------

nlohmann::json TrainReport::to_json() const {
  return {{"schema_version", 1},
          {"epochs", epochs},
          {"loss_per_epoch", loss_per_epoch},
          {"lr_per_epoch", lr_per_epoch},
          {"config_echo", config_echo},
          {"seed", seed},
          {"wall_time_s", wall_time_s},
          {"patches_per_epoch", patches_per_epoch},
          {"optimizer_steps", optimizer_steps},
          {"patch_steps", patch_steps},
          {"encoder_calls", encoder_calls},
          {"frozen_hash_before", frozen_hash_before},
          {"frozen_hash_after", frozen_hash_after}};
}

PatchSet training_patches(const std::vector<ImageRecord>& records, const TrainConfig& cfg) {
  if (records.empty()) throw InvalidArgument("fit: no training records");
  PatchSet all;
  all.source_name = records.front().name;
  for (const auto& rec : records) {
    if (!rec.labels) throw InvalidArgument("fit: record '" + rec.name + "' has no labels");
    auto ps = extract_patches(rec, cfg.patch_size, cfg.patch_overlap);
    for (auto& p : ps.patches) all.patches.push_back(std::move(p));
  }
  const bool any = std::any_of(all.patches.begin(), all.patches.end(),
                               [](const ImageRecord& p) { return instance_count(*p.labels) > 0; });
  if (!any) throw InvalidArgument("fit: no training patch contains a labelled instance");
  return replicate_to_minimum(all, cfg.min_patches);
}

namespace {

constexpr std::uint64_t kShuffleStream = 0xA5A5'0001ULL;
constexpr std::uint64_t kDropoutStream = 0xA5A5'0002ULL;

nn::ByteMatrix target_rows(std::span<const PromptSample> samples, int resolution) {
  nn::ByteMatrix t(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(resolution) * resolution);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& m = samples[i].target_mask;
    if (m.height() != resolution || m.width() != resolution) throw DimensionMismatch("fit: target mask size");
    const auto px = m.pixels().values();
    std::copy(px.begin(), px.end(), t.row(static_cast<Eigen::Index>(i)).data());
  }
  return t;
}

} // namespace

FitResult fit(const std::vector<ImageRecord>& records, const TrainConfig& cfg, PromptableSegmenter& model,
              const ProgressCallback& progress) {
  cfg.validate();
  if (!model.has_adapters()) throw InvalidArgument("fit: model carries no adapters");
  const auto started = std::chrono::steady_clock::now();
  const int resolution = model.config().input_resolution;
  const PatchSet patches = training_patches(records, cfg);
  const int count = static_cast<int>(patches.patches.size());
  const int eff = cfg.effective_batch();
  const std::int64_t steps_per_epoch = (count + eff - 1) / eff;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  TrainReport report;
  report.epochs = cfg.epochs;
  report.config_echo = cfg.to_json();
  report.seed = cfg.seed;
  report.patches_per_epoch = count;
  report.frozen_hash_before = model.fingerprint();

  nn::AdamW optimizer(model.trainable_tensors(), {static_cast<nn::real>(cfg.beta1), static_cast<nn::real>(cfg.beta2),
                                                  static_cast<nn::real>(1e-8), static_cast<nn::real>(cfg.weight_decay)});
  optimizer.zero_grad();
  Rng shuffle_rng = Rng::derive(cfg.seed, kShuffleStream);
  Rng dropout_rng = Rng::derive(cfg.seed, kDropoutStream);
  const ForwardContext ctx{true, &dropout_rng};
  const auto augmentation = cfg.augment ? cfg.augmentation : AugmentationConfig::none();

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffle_rng.sample_without_replacement(count, count);
    double epoch_loss = 0.0;
    int epoch_items = 0;
    double lr = 0.0;
    for (int start = 0; start < count; start += eff) {
      const int in_step = std::min(eff, count - start);
      const auto weight = static_cast<nn::real>(1.0 / in_step);
      for (int j = 0; j < in_step; ++j) {
        const auto position = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(count) +
                              static_cast<std::uint64_t>(start + j);
        Rng rng = Rng::derive(cfg.seed, position);
        ImageRecord rec = augment(patches.patches[static_cast<std::size_t>(order[static_cast<std::size_t>(start + j)])],
                                  augmentation, rng);
        if (rec.image.height != resolution || rec.image.width != resolution)
          rec = resize_record(rec, resolution, resolution);
        const auto samples = sample_prompts(*rec.labels, cfg.sampler, rng);
        if (samples.empty()) continue;
        std::vector<Point> points;
        points.reserve(samples.size());
        for (const auto& s : samples) points.push_back(s.point);

        const auto calls_before = model.encoder_invocations();
        const auto emb = model.encode_image(rec.image, ctx);
        const auto out = model.decode(emb, points, ctx);
        const Tensor loss = prompt_loss(model, out, target_rows(samples, resolution), samples, cfg.negative_loss_mode);
        nn::backward(nn::scale(loss, weight));
        report.encoder_calls += static_cast<std::int64_t>(model.encoder_invocations() - calls_before);
        ++report.patch_steps;
        epoch_loss += loss.item();
        ++epoch_items;
      }
      lr = lr_at_step(step, total_steps, cfg);
      optimizer.step(static_cast<nn::real>(lr));
      optimizer.zero_grad();
      ++step;
    }
    const double mean_loss = epoch_items ? epoch_loss / epoch_items : 0.0;
    report.loss_per_epoch.push_back(mean_loss);
    report.lr_per_epoch.push_back(lr);
    if (progress) progress({epoch + 1, cfg.epochs, mean_loss, lr});
  }
  report.optimizer_steps = step;
  report.frozen_hash_after = model.fingerprint();
  if (report.frozen_hash_after != report.frozen_hash_before)
    throw Error("fit: frozen backbone weights changed during training");
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  FitResult result{extract_adapter(model), std::move(report)};
  result.checkpoint.extra = {{"train_config", cfg.to_json()}};
  return result;
}

} // namespace cellprompt
