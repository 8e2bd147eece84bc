#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/datasets.hpp"
#include "cellprompt/geometry.hpp"
#include "cellprompt/model.hpp"
#include "cellprompt/sampler.hpp"

namespace cellprompt {

/// How negative prompts enter the loss. Positives always contribute mask BCE plus
/// probability MSE.
enum class NegativeLossMode { bce_only, mse_only, both };

std::string to_string(NegativeLossMode m);
/// Throws InvalidArgument on an unknown name.
NegativeLossMode negative_loss_mode_from_string(const std::string& s);

struct TrainConfig {
  double max_lr = 0.003;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  int batch_size = 4;
  int grad_accum = 8;
  int epochs = 300;
  std::uint64_t seed = 0;
  NegativeLossMode negative_loss_mode = NegativeLossMode::both;

  int patch_size = 256;
  double patch_overlap = 0.5;
  int min_patches = 32;
  bool augment = true;
  AugmentationConfig augmentation;
  SamplerConfig sampler;
  LoRAConfig lora;

  static constexpr int kEffectiveBatch = 32;
  int effective_batch() const { return batch_size * grad_accum; }

  /// Every problem found, one per field. Empty when valid.
  std::vector<FieldIssue> issues() const;
  /// Throws ConfigError listing issues().
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Mean over pixels of the binary cross-entropy between sigmoid(logits) and the target,
/// in the stable form max(x,0) - x·y + log(1 + exp(-|x|)).
double bce_loss(const RealGrid& logits, const BinaryMask& target);

/// (1/N)·Σ (y - ŷ)². Throws on empty or unequal inputs.
double mse_loss(std::span<const double> predictions, std::span<const double> targets);

struct LossBatch {
  std::vector<BinaryMask> mask_targets;
  std::vector<RealGrid> mask_logits;
  std::vector<double> prob_targets;
  std::vector<double> prob_predictions;
  std::vector<Polarity> polarities;

  /// Throws InvalidArgument when lengths or polarity/target pairings disagree.
  void validate() const;
};

/// Per-sample loss: BCE + MSE for positives, and for negatives the mode's share.
double sample_loss(const LossBatch& batch, std::size_t i, NegativeLossMode mode);
/// Mean of sample_loss over the batch; 0 for an empty batch.
double combined_loss(const LossBatch& batch, NegativeLossMode mode);

/// Differentiable combined_loss for one decoded prompt batch. `targets` holds one
/// flattened full-resolution 0/1 mask per row; the probability term uses the raw head output.
nn::Tensor prompt_loss(const PromptableSegmenter& model, const DecoderOutput& out, const nn::ByteMatrix& targets,
                       std::span<const PromptSample> samples, NegativeLossMode mode);

/// One-cycle learning rate: cosine ramp from max_lr/div to max_lr at step floor(pct_start·total),
/// then cosine decay to max_lr/(div·final_div) at the last step.
double lr_at_step(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);

struct TrainReport {
  int epochs = 0;
  std::vector<double> loss_per_epoch;
  std::vector<double> lr_per_epoch;  ///< rate of the epoch's last optimizer step
  nlohmann::json config_echo;
  std::uint64_t seed = 0;
  double wall_time_s = 0.0;
  int patches_per_epoch = 0;
  std::int64_t optimizer_steps = 0;
  std::int64_t patch_steps = 0;      ///< patches that reached the model
  std::int64_t encoder_calls = 0;    ///< image-encoder passes during training
  std::string frozen_hash_before;
  std::string frozen_hash_after;

  nlohmann::json to_json() const;
};

struct EpochProgress {
  int epoch = 0;  ///< 1-based, completed epochs
  int total_epochs = 0;
  double loss = 0.0;
  double lr = 0.0;
};

using ProgressCallback = std::function<void(const EpochProgress&)>;

struct FitResult {
  AdapterCheckpoint checkpoint;
  TrainReport report;
};

/// Training patches: every record cut into overlapping windows, then replicated to at least
/// cfg.min_patches. Throws when a record lacks labels or no patch contains an instance.
PatchSet training_patches(const std::vector<ImageRecord>& records, const TrainConfig& cfg);

/// Trains the adapters of `model` on labelled records. The model must carry adapters.
/// Deterministic for a fixed seed, model and record list.
FitResult fit(const std::vector<ImageRecord>& records, const TrainConfig& cfg, PromptableSegmenter& model,
              const ProgressCallback& progress = {});

} // namespace cellprompt
