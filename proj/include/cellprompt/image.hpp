#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cellprompt/geometry.hpp"

namespace cellprompt {

/// H x W x 3 interleaved 8-bit RGB.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Decoded pixels of any numeric depth, before normalization. Interleaved channels.
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> values;
};

/// Per-image min-max scaling to [0,255] with round-half-to-even; grayscale is replicated to
/// three channels and a constant image maps to zeros. Throws on non-finite values or C not in {1,3}.
Image normalize_image(const RawImage& raw);

/// Bilinear resampling with half-pixel centers and edge clamping; values rounded half-to-even.
Image resize_image_bilinear(const Image& image, int height, int width);

/// Nearest-neighbor resampling with half-pixel centers.
LabelMap resize_labels_nearest(const LabelMap& labels, int height, int width);

/// Reads any image file into raw values (alpha dropped, BGR reordered to RGB).
RawImage read_raw_image(const std::filesystem::path& path);
RawImage decode_raw_image(const std::vector<std::uint8_t>& bytes);

/// Reads a single-channel integer label image (8 or 16 bit).
LabelMap read_label_map(const std::filesystem::path& path);
LabelMap decode_label_map(const std::vector<std::uint8_t>& bytes);

/// Writes a 16-bit PNG/TIFF label map. Throws when an id exceeds 65535.
void write_label_map(const std::filesystem::path& path, const LabelMap& labels);
std::vector<std::uint8_t> encode_label_map_png(const LabelMap& labels);

void write_image(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_image_png(const Image& image);

} // namespace cellprompt
