#include "cellprompt/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace cellprompt {

namespace {

bool is_image_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".tif" || ext == ".tiff";
}

std::map<std::string, std::filesystem::path> files_by_stem(const std::filesystem::path& dir) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) return out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
    out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

ImageRecord reflect_pad(const ImageRecord& rec, int height, int width) {
  ImageRecord out;
  out.name = rec.name;
  out.image = Image(height, width, 0);
  const int h = rec.image.height;
  const int w = rec.image.width;
  std::int32_t max_id = 0;
  if (rec.labels)
    for (auto v : rec.labels->values()) max_id = std::max(max_id, v);
  if (rec.labels) out.labels = LabelMap(height, width, 0);
  for (int y = 0; y < height; ++y) {
    const int sy = reflect_index(y, h);
    for (int x = 0; x < width; ++x) {
      const int sx = reflect_index(x, w);
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = rec.image.at(sy, sx, c);
      if (rec.labels) {
        const auto id = (*rec.labels)(sy, sx);
        // Mirrored copies are distinct objects.
        const int region = (y >= h ? 2 : 0) + (x >= w ? 1 : 0);
        (*out.labels)(y, x) = id > 0 ? id + region * max_id : 0;
      }
    }
  }
  return out;
}

ImageRecord crop_record(const ImageRecord& rec, int y0, int x0, int height, int width) {
  ImageRecord out;
  out.name = rec.name + "@" + std::to_string(y0) + "," + std::to_string(x0);
  out.image = Image(height, width, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = rec.image.at(y0 + y, x0 + x, c);
  if (rec.labels) {
    LabelMap labels(height, width, 0);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) labels(y, x) = (*rec.labels)(y0 + y, x0 + x);
    canonicalize_labels(labels);
    out.labels = std::move(labels);
  }
  return out;
}

/// Maps destination pixel coordinates to source coordinates.
struct Affine {
  double a = 1, b = 0, c = 0;
  double d = 0, e = 1, f = 0;

  std::array<double, 2> apply(double x, double y) const { return {a * x + b * y + c, d * x + e * y + f}; }

  /// (this ∘ inner)(p) = this(inner(p)).
  Affine after(const Affine& inner) const {
    Affine r;
    r.a = a * inner.a + b * inner.d;
    r.b = a * inner.b + b * inner.e;
    r.c = a * inner.c + b * inner.f + c;
    r.d = d * inner.a + e * inner.d;
    r.e = d * inner.b + e * inner.e;
    r.f = d * inner.c + e * inner.f + f;
    return r;
  }
};

ImageRecord warp_record(const ImageRecord& rec, const Affine& dest_to_src) {
  const int h = rec.image.height;
  const int w = rec.image.width;
  ImageRecord out;
  out.name = rec.name;
  out.image = Image(h, w, 0);
  if (rec.labels) out.labels = LabelMap(h, w, 0);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const auto [sx, sy] = dest_to_src.apply(u, v);
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const double wx = sx - fx;
      const double wy = sy - fy;
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int yy = y0 + dy;
            const int xx = x0 + dx;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            acc += (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy) * rec.image.at(yy, xx, c);
          }
        }
        out.image.at(v, u, c) = static_cast<std::uint8_t>(std::clamp(std::nearbyint(acc), 0.0, 255.0));
      }
      if (rec.labels) {
        const int nx = static_cast<int>(std::floor(sx + 0.5));
        const int ny = static_cast<int>(std::floor(sy + 0.5));
        if (nx >= 0 && nx < w && ny >= 0 && ny < h) (*out.labels)(v, u) = (*rec.labels)(ny, nx);
      }
    }
  }
  return out;
}

} // namespace

AugmentationConfig AugmentationConfig::none() {
  AugmentationConfig cfg;
  cfg.brightness_contrast_probability = 0.0;
  cfg.flip_probability = 0.0;
  cfg.crop_probability = 0.0;
  cfg.rotate_probability = 0.0;
  return cfg;
}

void AugmentationConfig::validate() const {
  for (double p : {brightness_contrast_probability, flip_probability, crop_probability, rotate_probability})
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("augmentation probabilities must lie in [0,1]");
  if (!(crop_scale[0] > 0.0 && crop_scale[0] <= crop_scale[1] && crop_scale[1] <= 1.0))
    throw InvalidArgument("crop_scale must satisfy 0 < lo <= hi <= 1");
  if (!(crop_aspect[0] > 0.0 && crop_aspect[0] <= crop_aspect[1])) throw InvalidArgument("crop_aspect must be ordered");
  if (!(shift_scale_rotate_scale_limit[0] <= shift_scale_rotate_scale_limit[1] &&
        shift_scale_rotate_scale_limit[0] > -1.0))
    throw InvalidArgument("scale limit must be ordered and above -1");
  if (brightness_limit < 0.0 || contrast_limit < 0.0 || shift_limit < 0.0 || rotate_limit_degrees < 0.0)
    throw InvalidArgument("augmentation limits must be non-negative");
}

ImageRecord make_record(const RawImage& raw, std::optional<LabelMap> labels, std::string name) {
  ImageRecord rec;
  rec.image = normalize_image(raw);
  rec.name = std::move(name);
  if (labels) {
    if (labels->height() != rec.image.height || labels->width() != rec.image.width)
      throw DimensionMismatch("image and mask shapes differ for " + rec.name);
    canonicalize_labels(*labels);
    rec.labels = std::move(labels);
  }
  return rec;
}

std::vector<ImageRecord> load_dataset(const std::filesystem::path& root, LoadMode mode) {
  const auto images_dir = root / "images";
  if (!std::filesystem::is_directory(images_dir)) throw NotFound("missing images directory: " + images_dir.string());
  const auto images = files_by_stem(images_dir);
  const auto masks = files_by_stem(root / "masks");
  std::vector<ImageRecord> records;
  for (const auto& [stem, path] : images) {
    std::optional<LabelMap> labels;
    if (auto it = masks.find(stem); it != masks.end()) {
      labels = read_label_map(it->second);
    } else if (mode == LoadMode::train) {
      throw NotFound("missing mask for training image " + stem);
    }
    records.push_back(make_record(read_raw_image(path), std::move(labels), stem));
  }
  return records;
}

std::vector<int> window_starts(int extent, int size, int stride) {
  if (size <= 0 || stride <= 0) throw InvalidArgument("window size and stride must be positive");
  std::vector<int> starts;
  if (extent <= size) return {0};
  int s = 0;
  while (true) {
    starts.push_back(s);
    if (s + size >= extent) break;
    s = std::min(s + stride, extent - size);
  }
  return starts;
}

PatchSet extract_patches(const ImageRecord& rec, int size, double overlap) {
  if (size <= 0) throw InvalidArgument("extract_patches: size must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidArgument("extract_patches: overlap must lie in [0,1)");
  const ImageRecord* src = &rec;
  ImageRecord padded;
  if (rec.image.height < size || rec.image.width < size) {
    padded = reflect_pad(rec, std::max(size, rec.image.height), std::max(size, rec.image.width));
    src = &padded;
  }
  const int stride = std::max(1, static_cast<int>(std::lround(size * (1.0 - overlap))));
  PatchSet out;
  out.source_name = rec.name;
  for (int y0 : window_starts(src->image.height, size, stride))
    for (int x0 : window_starts(src->image.width, size, stride))
      out.patches.push_back(crop_record(*src, y0, x0, size, size));
  return out;
}

PatchSet replicate_to_minimum(const PatchSet& ps, int minimum) {
  if (ps.patches.empty()) throw InvalidArgument("replicate_to_minimum: empty patch set");
  const int n = static_cast<int>(ps.patches.size());
  const int factor = std::max(1, (minimum + n - 1) / n);
  PatchSet out;
  out.source_name = ps.source_name;
  out.replication_factor = factor;
  out.patches.reserve(static_cast<std::size_t>(n) * factor);
  for (int r = 0; r < factor; ++r)
    for (const auto& p : ps.patches) out.patches.push_back(p);
  return out;
}

ImageRecord flip_record(const ImageRecord& rec, FlipAxis axis) {
  const int h = rec.image.height;
  const int w = rec.image.width;
  const bool fx = axis != FlipAxis::vertical;
  const bool fy = axis != FlipAxis::horizontal;
  ImageRecord out = rec;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sy = fy ? h - 1 - y : y;
      const int sx = fx ? w - 1 - x : x;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = rec.image.at(sy, sx, c);
      if (rec.labels) (*out.labels)(y, x) = (*rec.labels)(sy, sx);
    }
  }
  return out;
}

ImageRecord augment(const ImageRecord& rec, const AugmentationConfig& cfg, Rng& rng) {
  if (!rec.labels) throw InvalidArgument("augment: record has no labels");
  const double h = rec.image.height;
  const double w = rec.image.width;
  Affine dest_to_src;
  bool geometric = false;

  if (rng.bernoulli(cfg.crop_probability)) {
    double cw = w, ch = h, cx = 0, cy = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double area = h * w * rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1]);
      const double ratio =
          std::exp(rng.uniform(std::log(cfg.crop_aspect[0]), std::log(cfg.crop_aspect[1])));
      const double tw = std::round(std::sqrt(area * ratio));
      const double th = std::round(std::sqrt(area / ratio));
      if (tw > 0 && tw <= w && th > 0 && th <= h) {
        cw = tw;
        ch = th;
        cx = rng.uniform_int(0, static_cast<int>(w - tw));
        cy = rng.uniform_int(0, static_cast<int>(h - th));
        break;
      }
    }
    Affine crop;
    crop.a = cw / w;
    crop.c = cx + 0.5 * cw / w - 0.5;
    crop.e = ch / h;
    crop.f = cy + 0.5 * ch / h - 0.5;
    dest_to_src = crop;
    geometric = true;
  }

  if (rng.bernoulli(cfg.flip_probability)) {
    const int code = rng.uniform_int(0, 2);
    Affine flip;
    if (code != 1) {
      flip.a = -1;
      flip.c = w - 1;
    }
    if (code != 0) {
      flip.e = -1;
      flip.f = h - 1;
    }
    dest_to_src = dest_to_src.after(flip);
    geometric = true;
  }

  if (rng.bernoulli(cfg.rotate_probability)) {
    const double scale =
        1.0 + rng.uniform(cfg.shift_scale_rotate_scale_limit[0], cfg.shift_scale_rotate_scale_limit[1]);
    const double angle = rng.uniform(-cfg.rotate_limit_degrees, cfg.rotate_limit_degrees) * M_PI / 180.0;
    const double dx = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * w;
    const double dy = rng.uniform(-cfg.shift_limit, cfg.shift_limit) * h;
    const double cx = (w - 1) / 2.0;
    const double cy = (h - 1) / 2.0;
    // Inverse of dest = s * R(angle) * (src - c) + c + shift.
    const double ca = std::cos(angle) / scale;
    const double sa = std::sin(angle) / scale;
    Affine ssr;
    ssr.a = ca;
    ssr.b = sa;
    ssr.d = -sa;
    ssr.e = ca;
    const double tx = -cx - dx;
    const double ty = -cy - dy;
    ssr.c = ca * tx + sa * ty + cx;
    ssr.f = -sa * tx + ca * ty + cy;
    dest_to_src = dest_to_src.after(ssr);
    geometric = true;
  }

  ImageRecord out = geometric ? warp_record(rec, dest_to_src) : rec;

  if (rng.bernoulli(cfg.brightness_contrast_probability)) {
    const double alpha = 1.0 + rng.uniform(-cfg.contrast_limit, cfg.contrast_limit);
    const double beta = rng.uniform(-cfg.brightness_limit, cfg.brightness_limit) * 255.0;
    for (auto& p : out.image.pixels)
      p = static_cast<std::uint8_t>(std::clamp(std::nearbyint(p * alpha + beta), 0.0, 255.0));
  }
  return out;
}

ImageRecord resize_record(const ImageRecord& rec, int height, int width) {
  if (height <= 0 || width <= 0) throw InvalidArgument("resize_record: target must be positive");
  ImageRecord out;
  out.name = rec.name;
  out.image = resize_image_bilinear(rec.image, height, width);
  if (rec.labels) {
    out.labels = resize_labels_nearest(*rec.labels, height, width);
    canonicalize_labels(*out.labels);
  }
  return out;
}

} // namespace cellprompt
