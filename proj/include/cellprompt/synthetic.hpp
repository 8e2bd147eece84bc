#pragma once

#include <filesystem>
#include <vector>

#include "cellprompt/datasets.hpp"
#include "cellprompt/geometry.hpp"
#include "cellprompt/random.hpp"

namespace cellprompt::synthetic {

/// Random detections on a size x size canvas: disks, ellipses and rectangles, some of them
/// jittered near-duplicates so that suppression actually happens.
std::vector<ScoredMask> random_nms_scene(Rng& rng, int size, int max_masks);

/// Detections whose boxes are pairwise disjoint.
std::vector<ScoredMask> disjoint_box_scene(Rng& rng, int size, int count);

/// Detections that all cover the full canvas box (every box pair overlaps).
std::vector<ScoredMask> overlapping_box_scene(Rng& rng, int size, int count);

/// Two crescents, the smaller nested in the concavity of the larger: disjoint masks whose
/// boxes overlap heavily.
std::vector<ScoredMask> interlocking_crescents();

struct BlobImageConfig {
  int size = 256;
  int blob_count = 30;
  double min_radius = 5.0;
  double max_radius = 20.0;
  double noise_sigma = 8.0;
};

/// Fluorescence-like image of bright elliptical blobs on a dark, slowly varying background.
ImageRecord blob_image(Rng& rng, const BlobImageConfig& cfg, const std::string& name);

/// Writes root/images/<name>.png and root/masks/<name>.png (16-bit) for `count` images.
void write_blob_dataset(const std::filesystem::path& root, int count, std::uint64_t seed,
                        const BlobImageConfig& cfg = {}, const std::string& prefix = "blob");

/// Generic shapes (polygons, ellipses, rings, rectangles) in assorted contrasts and textures,
/// for training the base promptable segmenter.
ImageRecord shape_image(Rng& rng, int size, const std::string& name);

} // namespace cellprompt::synthetic
