#pragma once

#include <vector>

#include "cellprompt/geometry.hpp"
#include "cellprompt/random.hpp"

namespace cellprompt {

enum class Polarity { positive, negative };

struct PromptSample {
  Point point;  ///< integer pixel coordinates of the sampled pixel
  Polarity polarity = Polarity::positive;
  BinaryMask target_mask;  ///< instance mask, all-zero for negatives
  double target_probability = 0.0;
  std::int32_t instance_id = 0;  ///< 0 for negatives
};

struct SamplerConfig {
  int max_positive = 30;
  int max_negative = 15;
  double top_fraction = 0.2;
};

/// Linear-interpolated q-quantile of the strictly positive values of `field` where
/// `region` is set. Returns +inf when the region has no positive distances.
double positive_quantile(const RealGrid& field, const BinaryMask& region, double q);

/// Pixels of `region` whose distance is at least the (1 - top_fraction) quantile.
BinaryMask top_distance_region(const RealGrid& field, const BinaryMask& region, double top_fraction);

/// Distance-transform prompt sampling: at most one positive per instance (instances chosen
/// without replacement once they outnumber max_positive) and up to max_negative background
/// points, each drawn uniformly from the top fraction of its region's distance field.
std::vector<PromptSample> sample_prompts(const LabelMap& labels, const SamplerConfig& cfg, Rng& rng);

} // namespace cellprompt
