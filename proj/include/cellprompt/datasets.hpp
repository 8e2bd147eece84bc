#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellprompt/geometry.hpp"
#include "cellprompt/image.hpp"
#include "cellprompt/random.hpp"

namespace cellprompt {

struct ImageRecord {
  Image image;
  std::optional<LabelMap> labels;
  std::string name;
};

struct AugmentationConfig {
  double brightness_limit = 0.1;
  double contrast_limit = 0.1;
  double brightness_contrast_probability = 0.5;
  double flip_probability = 0.75;
  double crop_probability = 1.0;
  std::array<double, 2> crop_scale{0.3, 1.0};
  std::array<double, 2> crop_aspect{0.75, 1.33};
  double shift_limit = 0.0625;
  std::array<double, 2> shift_scale_rotate_scale_limit{-0.5, 0.5};
  double rotate_limit_degrees = 45.0;
  double rotate_probability = 0.8;

  /// Every transform disabled.
  static AugmentationConfig none();
  /// Throws InvalidArgument when a probability or range is malformed.
  void validate() const;
};

struct PatchSet {
  std::vector<ImageRecord> patches;
  std::string source_name;
  int replication_factor = 1;
};

enum class LoadMode { train, predict };

/// Reads root/images/* and stem-matched root/masks/*, sorted by name. In train mode every
/// image needs a mask.
std::vector<ImageRecord> load_dataset(const std::filesystem::path& root, LoadMode mode);

/// Builds a record from decoded pixels; labels are canonicalized and shape-checked.
ImageRecord make_record(const RawImage& raw, std::optional<LabelMap> labels, std::string name);

/// Window start offsets along one axis: multiples of the stride, last window clamped to the edge.
std::vector<int> window_starts(int extent, int size, int stride);

/// Square windows with the given overlap fraction. Inputs smaller than `size` are
/// reflect-padded first; mirrored instances receive fresh ids.
PatchSet extract_patches(const ImageRecord& rec, int size = 256, double overlap = 0.5);

/// Repeats the whole patch list ceil(minimum / n) times.
PatchSet replicate_to_minimum(const PatchSet& ps, int minimum = 32);

enum class FlipAxis { horizontal, vertical, both };

ImageRecord flip_record(const ImageRecord& rec, FlipAxis axis);

/// Random crop/flip/shift-scale-rotate applied identically to image (bilinear) and labels
/// (nearest), then brightness/contrast on the image. Label ids are kept as-is.
ImageRecord augment(const ImageRecord& rec, const AugmentationConfig& cfg, Rng& rng);

/// Image bilinear, labels nearest; vanished instances are dropped and ids re-canonicalized.
ImageRecord resize_record(const ImageRecord& rec, int height, int width);

} // namespace cellprompt
