#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cellprompt/datasets.hpp"
#include "cellprompt/geometry.hpp"
#include "cellprompt/model.hpp"
#include "cellprompt/nms.hpp"

namespace cellprompt {

struct GridConfig {
  int points_per_side = 32;
  double cell_probability_threshold = 0.5;
  double nms_tau = kDefaultNmsTau;
  double mask_binarize_threshold = 0.0;
  double stability_offset = 1.0;

  std::vector<FieldIssue> issues() const;
  /// Throws ConfigError listing issues().
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
  static GridConfig from_json(const nlohmann::json& j);
};

/// n² half-pixel-centred points ((i + 0.5) / n)·resolution, row-major. Throws when
/// resolution < points_per_side.
std::vector<Point> grid_points(const GridConfig& cfg, int resolution);

struct SegmentationResult {
  /// Instance ids 1..K at the input image's size; id k belongs to instances[k-1].
  LabelMap label_map;
  /// Kept detections at model resolution, descending score.
  std::vector<ScoredMask> instances;
  /// Tight box of each instance in `label_map` coordinates.
  std::vector<BoundingBox> boxes;
  double timing_ms = 0.0;
  int prompts = 0;
  int candidates = 0;  ///< predictions that passed the probability gate with a non-empty mask
  std::int64_t mask_iou_evaluations = 0;
  std::uint64_t encoder_calls = 0;
};

/// Grid-prompt segmentation: resize to the model resolution, encode once, predict every grid
/// point, gate by cell probability, binarize, score by probability × stability, mask NMS,
/// then paint a label map and resize it back (nearest). Instances that end up with no pixels
/// in the painted map are dropped so ids stay contiguous.
SegmentationResult segment_image(const Image& image, const PromptableSegmenter& model, const GridConfig& cfg);
SegmentationResult segment_image(const ImageRecord& rec, const PromptableSegmenter& model, const GridConfig& cfg);

/// JSON sidecar: {schema_version, name, image_size, instances: [{id, box, score,
/// cell_probability, stability, area}], timing_ms, ...}.
nlohmann::json result_sidecar(const SegmentationResult& result, const std::string& name, const GridConfig& cfg);

/// Writes <dir>/<stem>.png (16-bit label map) and <dir>/<stem>.json.
void write_prediction(const std::filesystem::path& dir, const std::string& stem, const SegmentationResult& result,
                      const GridConfig& cfg, const nlohmann::json& extra = {});

} // namespace cellprompt
