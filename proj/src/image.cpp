#include "cellprompt/image.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <limits>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace cellprompt {

namespace {

std::uint8_t round_to_u8(double v) {
  // nearbyint honours the default round-half-to-even mode.
  return static_cast<std::uint8_t>(std::clamp(std::nearbyint(v), 0.0, 255.0));
}

RawImage raw_from_mat(const cv::Mat& decoded, const std::string& what) {
  if (decoded.empty()) throw FormatError("cannot decode image: " + what);
  cv::Mat mat = decoded;
  int channels = mat.channels();
  if (channels == 4) {
    std::vector<cv::Mat> planes;
    cv::split(mat, planes);
    planes.resize(3);
    cv::merge(planes, mat);
    channels = 3;
  } else if (channels == 2) {
    std::vector<cv::Mat> planes;
    cv::split(mat, planes);
    mat = planes[0];
    channels = 1;
  } else if (channels != 1 && channels != 3) {
    throw FormatError("unsupported channel count in " + what);
  }
  cv::Mat as_double;
  mat.convertTo(as_double, CV_MAKETYPE(CV_64F, channels));
  RawImage raw;
  raw.height = as_double.rows;
  raw.width = as_double.cols;
  raw.channels = channels;
  raw.values.resize(static_cast<std::size_t>(raw.height) * raw.width * channels);
  for (int y = 0; y < raw.height; ++y) {
    const double* row = as_double.ptr<double>(y);
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < channels; ++c) {
        // OpenCV decodes colour as BGR.
        const int src_c = channels == 3 ? 2 - c : c;
        raw.values[(static_cast<std::size_t>(y) * raw.width + x) * channels + c] = row[x * channels + src_c];
      }
    }
  }
  return raw;
}

LabelMap labels_from_mat(const cv::Mat& decoded, const std::string& what) {
  if (decoded.empty()) throw FormatError("cannot decode label map: " + what);
  if (decoded.channels() != 1) throw FormatError("label map must be single-channel: " + what);
  cv::Mat as_int;
  decoded.convertTo(as_int, CV_32S);
  LabelMap labels(as_int.rows, as_int.cols, 0);
  for (int y = 0; y < as_int.rows; ++y) {
    const auto* row = as_int.ptr<std::int32_t>(y);
    for (int x = 0; x < as_int.cols; ++x) {
      if (row[x] < 0) throw FormatError("label map has negative ids: " + what);
      labels(y, x) = row[x];
    }
  }
  return labels;
}

cv::Mat labels_to_mat(const LabelMap& labels) {
  cv::Mat mat(labels.height(), labels.width(), CV_16UC1);
  for (int y = 0; y < labels.height(); ++y) {
    auto* row = mat.ptr<std::uint16_t>(y);
    for (int x = 0; x < labels.width(); ++x) {
      const auto id = labels(y, x);
      if (id < 0 || id > std::numeric_limits<std::uint16_t>::max())
        throw InvalidArgument("label id does not fit in 16 bits");
      row[x] = static_cast<std::uint16_t>(id);
    }
  }
  return mat;
}

} // namespace

Image normalize_image(const RawImage& raw) {
  if (raw.channels != 1 && raw.channels != 3) throw InvalidArgument("normalize_image: channels must be 1 or 3");
  if (raw.values.size() != static_cast<std::size_t>(raw.height) * raw.width * raw.channels)
    throw DimensionMismatch("normalize_image: value count does not match shape");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : raw.values) {
    if (!std::isfinite(v)) throw InvalidArgument("normalize_image: non-finite pixel value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Image out(raw.height, raw.width, 0);
  if (raw.values.empty() || !(hi > lo)) return out;
  const double scale = 255.0 / (hi - lo);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src_c = raw.channels == 1 ? 0 : c;
        const double v = raw.values[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + src_c];
        out.at(y, x, c) = round_to_u8((v - lo) * scale);
      }
    }
  }
  return out;
}

Image resize_image_bilinear(const Image& image, int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("resize: target must be positive");
  if (height == image.height && width == image.width) return image;
  Image out(height, width, 0);
  const double sy = static_cast<double>(image.height) / height;
  const double sx = static_cast<double>(image.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = image.at(y0, x0, c) * (1 - wx) + image.at(y0, x1, c) * wx;
        const double bottom = image.at(y1, x0, c) * (1 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = round_to_u8(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

LabelMap resize_labels_nearest(const LabelMap& labels, int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("resize: target must be positive");
  if (height == labels.height() && width == labels.width()) return labels;
  LabelMap out(height, width, 0);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(labels.height() - 1,
                            static_cast<int>(std::floor((y + 0.5) * labels.height() / static_cast<double>(height))));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(labels.width() - 1,
                              static_cast<int>(std::floor((x + 0.5) * labels.width() / static_cast<double>(width))));
      out(y, x) = labels(sy, sx);
    }
  }
  return out;
}

RawImage read_raw_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("image not found: " + path.string());
  return raw_from_mat(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
}

RawImage decode_raw_image(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty()) throw FormatError("cannot decode image: empty upload");
  return raw_from_mat(cv::imdecode(bytes, cv::IMREAD_UNCHANGED), "upload");
}

LabelMap read_label_map(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("label map not found: " + path.string());
  return labels_from_mat(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
}

LabelMap decode_label_map(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty()) throw FormatError("cannot decode label map: empty upload");
  return labels_from_mat(cv::imdecode(bytes, cv::IMREAD_UNCHANGED), "upload");
}

void write_label_map(const std::filesystem::path& path, const LabelMap& labels) {
  if (!cv::imwrite(path.string(), labels_to_mat(labels))) throw Error("cannot write label map: " + path.string());
}

std::vector<std::uint8_t> encode_label_map_png(const LabelMap& labels) {
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(".png", labels_to_mat(labels), bytes)) throw Error("cannot encode label map");
  return bytes;
}

namespace {

cv::Mat image_to_bgr(const Image& image) {
  cv::Mat mat(image.height, image.width, CV_8UC3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) mat.ptr<std::uint8_t>(y)[x * 3 + c] = image.at(y, x, 2 - c);
  return mat;
}

} // namespace

void write_image(const std::filesystem::path& path, const Image& image) {
  if (!cv::imwrite(path.string(), image_to_bgr(image))) throw Error("cannot write image: " + path.string());
}

std::vector<std::uint8_t> encode_image_png(const Image& image) {
  std::vector<std::uint8_t> bytes;
  if (!cv::imencode(".png", image_to_bgr(image), bytes)) throw Error("cannot encode image");
  return bytes;
}

} // namespace cellprompt
