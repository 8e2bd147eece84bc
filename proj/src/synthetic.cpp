#include "cellprompt/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "cellprompt/image.hpp"

namespace cellprompt::synthetic {

namespace {

struct Ellipse {
  double cx, cy, rx, ry, angle;

  // Normalized radial coordinate: < 1 inside.
  double radial(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx;
    const double v = (-s * dx + c * dy) / ry;
    return std::sqrt(u * u + v * v);
  }
};

ScoredMask random_shape_detection(Rng& rng, int size) {
  for (;;) {
    BinaryMask m(size, size);
    const int kind = rng.uniform_int(0, 2);
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    if (kind == 0) {
      const double r = rng.uniform(2.0, 18.0);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.set(y, x, (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r);
    } else if (kind == 1) {
      const Ellipse e{cx, cy, rng.uniform(2.0, 22.0), rng.uniform(2.0, 12.0), rng.uniform(0.0, M_PI)};
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) m.set(y, x, e.radial(x, y) <= 1.0);
    } else {
      const int w = rng.uniform_int(2, 30), h = rng.uniform_int(2, 30);
      for (int y = static_cast<int>(cy); y < std::min(size, static_cast<int>(cy) + h); ++y)
        for (int x = static_cast<int>(cx); x < std::min(size, static_cast<int>(cx) + w); ++x) m.set(y, x, true);
    }
    if (m.is_empty()) continue;
    return make_scored_mask(std::move(m), rng.uniform(), rng.uniform(0.5, 1.0));
  }
}

ScoredMask jittered_copy(Rng& rng, const ScoredMask& src) {
  const int size = src.mask.height();
  const int dx = rng.uniform_int(-3, 3), dy = rng.uniform_int(-3, 3);
  BinaryMask m(size, src.mask.width());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < src.mask.width(); ++x) {
      const int sx = x - dx, sy = y - dy;
      if (sx >= 0 && sy >= 0 && sx < src.mask.width() && sy < size && src.mask(sy, sx)) m.set(y, x, true);
    }
  if (m.is_empty()) return src;
  return make_scored_mask(std::move(m), rng.uniform(), rng.uniform(0.5, 1.0));
}

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::nearbyint(v), 0.0, 255.0)); }

} // namespace

std::vector<ScoredMask> random_nms_scene(Rng& rng, int size, int max_masks) {
  const int n = rng.uniform_int(1, std::max(1, max_masks));
  std::vector<ScoredMask> out;
  out.reserve(n);
  while (static_cast<int>(out.size()) < n) {
    if (!out.empty() && rng.bernoulli(0.4))
      out.push_back(jittered_copy(rng, out[rng.below(out.size())]));
    else
      out.push_back(random_shape_detection(rng, size));
  }
  return out;
}

std::vector<ScoredMask> disjoint_box_scene(Rng& rng, int size, int count) {
  const int per_row = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
  const int cell = size / per_row;
  if (cell < 3) throw InvalidArgument("disjoint_box_scene: canvas too small for count");
  std::vector<ScoredMask> out;
  for (int i = 0; i < count; ++i) {
    const int gx = (i % per_row) * cell, gy = (i / per_row) * cell;
    BinaryMask m(size, size);
    const int w = rng.uniform_int(1, cell - 1), h = rng.uniform_int(1, cell - 1);
    for (int y = gy; y < gy + h; ++y)
      for (int x = gx; x < gx + w; ++x) m.set(y, x, true);
    out.push_back(make_scored_mask(std::move(m), rng.uniform(), rng.uniform(0.5, 1.0)));
  }
  return out;
}

std::vector<ScoredMask> overlapping_box_scene(Rng& rng, int size, int count) {
  std::vector<ScoredMask> out;
  for (int i = 0; i < count; ++i) {
    BinaryMask m(size, size);
    // Anchor pixels at two opposite corners give every mask the full-canvas box.
    m.set(0, 0, true);
    m.set(size - 1, size - 1, true);
    const int cx = rng.uniform_int(0, size - 1), cy = rng.uniform_int(0, size - 1);
    const int r = rng.uniform_int(1, size / 4);
    for (int y = std::max(0, cy - r); y < std::min(size, cy + r); ++y)
      for (int x = std::max(0, cx - r); x < std::min(size, cx + r); ++x) m.set(y, x, true);
    out.push_back(make_scored_mask(std::move(m), rng.uniform(), rng.uniform(0.5, 1.0)));
  }
  return out;
}

std::vector<ScoredMask> interlocking_crescents() {
  constexpr int size = 128;
  auto inside = [](double x, double y, double cx, double cy, double r) {
    return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
  };
  BinaryMask outer(size, size), inner(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      outer.set(y, x, inside(x, y, 60, 64, 30) && !inside(x, y, 75, 64, 28));
      inner.set(y, x, inside(x, y, 80, 64, 20) && !inside(x, y, 95, 64, 18));
    }
  }
  std::vector<ScoredMask> out;
  out.push_back(make_scored_mask(std::move(outer), 0.9, 1.0));
  out.push_back(make_scored_mask(std::move(inner), 0.8, 1.0));
  return out;
}

ImageRecord blob_image(Rng& rng, const BlobImageConfig& cfg, const std::string& name) {
  const int size = cfg.size;
  std::vector<Ellipse> blobs;
  for (int attempt = 0; attempt < cfg.blob_count * 200 && static_cast<int>(blobs.size()) < cfg.blob_count; ++attempt) {
    const double r = rng.uniform(cfg.min_radius, cfg.max_radius);
    const double aspect = rng.uniform(0.75, 1.0);
    Ellipse e{rng.uniform(0, size), rng.uniform(0, size), r, r * aspect, rng.uniform(0.0, M_PI)};
    bool clear = true;
    for (const auto& b : blobs) {
      const double d = std::hypot(b.cx - e.cx, b.cy - e.cy);
      if (d < b.rx + e.rx + 2.0) {
        clear = false;
        break;
      }
    }
    if (clear) blobs.push_back(e);
  }

  const double bg = rng.uniform(15, 45);
  const double gx = rng.uniform(-0.05, 0.05), gy = rng.uniform(-0.05, 0.05);
  std::vector<double> brightness(blobs.size());
  for (auto& b : brightness) b = rng.uniform(130, 230);

  RawImage raw;
  raw.height = raw.width = size;
  raw.channels = 1;
  raw.values.assign(static_cast<std::size_t>(size) * size, 0.0);
  LabelMap labels(size, size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double v = bg + gx * x + gy * y;
      for (std::size_t k = 0; k < blobs.size(); ++k) {
        const double rho = blobs[k].radial(x, y);
        if (rho > 1.3) continue;
        // Soft edge around rho = 1, slightly brighter core.
        const double cover = 1.0 - smoothstep(0.85, 1.15, rho);
        v += cover * (brightness[k] - bg) * (1.0 - 0.25 * rho * rho);
        if (rho <= 1.0) labels(y, x) = static_cast<std::int32_t>(k + 1);
      }
      raw.values[static_cast<std::size_t>(y) * size + x] = v + cfg.noise_sigma * rng.normal();
    }
  }
  // Clamp into an 8-bit-like range before normalization so images look alike.
  for (auto& v : raw.values) v = std::clamp(v, 0.0, 255.0);
  canonicalize_labels(labels);
  return make_record(raw, std::move(labels), name);
}

void write_blob_dataset(const std::filesystem::path& root, int count, std::uint64_t seed,
                        const BlobImageConfig& cfg, const std::string& prefix) {
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%03d", prefix.c_str(), i);
    const auto rec = blob_image(rng, cfg, name);
    write_image(root / "images" / (std::string(name) + ".png"), rec.image);
    write_label_map(root / "masks" / (std::string(name) + ".png"), *rec.labels);
  }
}

ImageRecord shape_image(Rng& rng, int size, const std::string& name) {
  Image image(size, size, 0);
  LabelMap labels(size, size, 0);

  double base[3], tint[3];
  const bool dark_background = rng.bernoulli(0.7);
  for (int c = 0; c < 3; ++c) {
    base[c] = dark_background ? rng.uniform(0, 80) : rng.uniform(150, 255);
    tint[c] = rng.uniform(-0.15, 0.15);
  }
  const double noise = rng.uniform(0, 15);
  std::vector<double> canvas(static_cast<std::size_t>(size) * size * 3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        canvas[(static_cast<std::size_t>(y) * size + x) * 3 + c] = base[c] + tint[c] * (x + y - size);

  const int count = rng.uniform_int(3, 40);
  const double max_r = rng.uniform(8, 40);
  for (int k = 1; k <= count; ++k) {
    const int kind = rng.uniform_int(0, 3);
    const double cx = rng.uniform(0, size), cy = rng.uniform(0, size);
    const double r = rng.uniform(4, max_r);
    const Ellipse e{cx, cy, r, r * rng.uniform(0.4, 1.0), rng.uniform(0.0, M_PI)};
    const int vertices = rng.uniform_int(3, 8);
    std::vector<double> radii(vertices);
    for (auto& rr : radii) rr = r * rng.uniform(0.5, 1.0);
    const double rot = rng.uniform(0, 2 * M_PI);
    double color[3];
    const double level = dark_background ? rng.uniform(100, 255) : rng.uniform(0, 120);
    for (int c = 0; c < 3; ++c) color[c] = std::clamp(level + rng.uniform(-40, 40), 0.0, 255.0);
    const double shade = rng.uniform(-0.4, 0.4);

    auto inside = [&](double x, double y) {
      switch (kind) {
        case 0: return e.radial(x, y) <= 1.0;
        case 1: {
          const double rho = e.radial(x, y);
          return rho <= 1.0 && rho >= 0.55;
        }
        case 2: return std::abs(x - cx) <= e.rx * 0.8 && std::abs(y - cy) <= e.ry * 0.8;
        default: {
          // Star-shaped polygon: interpolate radius between vertices by angle.
          const double ang = std::atan2(y - cy, x - cx) - rot;
          double t = ang / (2 * M_PI) * vertices;
          t -= std::floor(t / vertices) * vertices;
          const int i0 = static_cast<int>(t) % vertices;
          const int i1 = (i0 + 1) % vertices;
          const double f = t - std::floor(t);
          return std::hypot(x - cx, y - cy) <= radii[i0] * (1 - f) + radii[i1] * f;
        }
      }
    };
    const int x0 = std::max(0, static_cast<int>(cx - r - 1)), x1 = std::min(size, static_cast<int>(cx + r + 2));
    const int y0 = std::max(0, static_cast<int>(cy - r - 1)), y1 = std::min(size, static_cast<int>(cy + r + 2));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        if (!inside(x, y)) continue;
        labels(y, x) = k;
        const double g = 1.0 + shade * ((x - cx) / (r + 1));
        for (int c = 0; c < 3; ++c) canvas[(static_cast<std::size_t>(y) * size + x) * 3 + c] = color[c] * g;
      }
    }
  }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        image.at(y, x, c) = to_u8(canvas[(static_cast<std::size_t>(y) * size + x) * 3 + c] + noise * rng.normal());

  // Drop fragments too small to prompt reliably.
  for (auto& [id, m] : label_map_to_masks(labels)) {
    if (m.area() >= 12) continue;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (m(y, x)) labels(y, x) = 0;
  }
  canonicalize_labels(labels);
  ImageRecord rec;
  rec.image = std::move(image);
  rec.labels = std::move(labels);
  rec.name = name;
  return rec;
}

} // namespace cellprompt::synthetic
