#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/inference.hpp"
#include "cellprompt/model.hpp"
#include "cellprompt/training.hpp"

namespace cellprompt {

std::string to_string(BackboneVariant v);
/// Throws InvalidArgument on an unknown name.
BackboneVariant backbone_variant_from_string(const std::string& s);

struct BackboneSource {
  BackboneVariant variant = BackboneVariant::tiny;
  /// Backbone checkpoint; empty selects the bundled tiny backbone. Required for `external`.
  std::filesystem::path weights;

  nlohmann::json to_json() const;
};

std::unique_ptr<PromptableSegmenter> load_base_model(const BackboneSource& source);

/// Base model from `source` with the adapter checkpoint at `adapter` applied.
std::unique_ptr<PromptableSegmenter> load_adapted_model(const std::filesystem::path& adapter,
                                                        const BackboneSource& source);

/// Clones the base, injects adapters per cfg.lora (seeded by cfg.seed) and fits them.
FitResult train_adapter(const std::vector<ImageRecord>& records, const TrainConfig& cfg,
                        const PromptableSegmenter& base, const ProgressCallback& progress = {});

/// Images to segment: a dataset root (with images/) or a flat directory of image files,
/// sorted by stem. Labels are not read.
std::vector<ImageRecord> load_prediction_inputs(const std::filesystem::path& dir);

/// Label maps keyed by file stem: dir/masks/* when present, else dir/*. Only image files
/// are considered.
std::vector<std::pair<std::string, std::filesystem::path>> label_map_files(const std::filesystem::path& dir);

struct ImageScore {
  std::string name;
  double ap = 0.0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

struct EvaluationReport {
  std::vector<ImageScore> per_image;
  double map = 0.0;
  double threshold = 0.5;

  nlohmann::json to_json() const;
};

/// Scores every ground-truth label map against the stem-matched prediction. Throws NotFound
/// when a prediction is missing or the ground truth is empty.
EvaluationReport evaluate_directories(const std::filesystem::path& pred, const std::filesystem::path& gt,
                                      double threshold = 0.5);

struct NmsBenchRecord {
  std::string strategy;
  std::int64_t kept_count = 0;
  std::int64_t mask_iou_evaluations = 0;
  double wall_time_ms = 0.0;

  nlohmann::json to_json() const;
};

struct NmsBenchReport {
  std::vector<NmsBenchRecord> records;  ///< optimized, brute_force, box
  int scenes = 0;
  int max_masks = 0;
  int size = 0;
  std::uint64_t seed = 0;
  /// Scenes where the optimized and brute-force kept lists differ; 0 when correct.
  int disagreements = 0;

  nlohmann::json to_json() const;
};

/// Runs the three suppression strategies over the same random scenes, totals per strategy.
NmsBenchReport nms_benchmark(int scenes, int max_masks, int size = 128, std::uint64_t seed = 0,
                             double tau = kDefaultNmsTau);

/// Writes `j` to `path` via a temporary file and rename.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

} // namespace cellprompt
