#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "weaktr/io.hpp"
#include "weaktr/rng.hpp"
#include "weaktr/tensor.hpp"

namespace weaktr {

/// Shape category per class index: disk, square, triangle, ring.
constexpr std::int64_t kMaxShapeKinds = 4;

struct DataConfig {
  std::int64_t image_size = 64;  // O
  std::int64_t num_classes = 4;  // C
  std::int64_t min_shapes = 1;
  std::int64_t max_shapes = 3;
  float min_scale = 0.25f;  // shape diameter as a fraction of image_size
  float max_scale = 0.45f;
  float noise_std = 0.03f;
  float bg_gradient = 0.18f;
  std::uint64_t seed = 0;

  void validate() const {
    if (image_size < 8) throw std::invalid_argument("DataConfig: image_size too small");
    if (num_classes < 1 || num_classes > kMaxShapeKinds) {
      throw std::invalid_argument("DataConfig: num_classes must be in [1, " + std::to_string(kMaxShapeKinds) + "]");
    }
    if (min_shapes < 0 || max_shapes < min_shapes || max_shapes > num_classes) {
      throw std::invalid_argument("DataConfig: invalid shapes_per_image range");
    }
    if (!(min_scale > 0.0f) || max_scale < min_scale || max_scale > 0.9f) {
      throw std::invalid_argument("DataConfig: invalid scale range");
    }
    if (noise_std < 0.0f) throw std::invalid_argument("DataConfig: noise_std must be >= 0");
  }
};

struct Sample {
  Tensor image;               // [O×O×3] in [0,1]
  std::vector<float> label;   // C multi-hot
  Tensor gt_mask;             // [O×O] values in {0..C}, 0 = background
};

namespace detail {

struct ShapeSpec {
  std::int64_t klass = 0;  // 0-based class index; kind = klass
  double cx = 0, cy = 0, radius = 0, rot = 0;
  float color[3] = {0, 0, 0};
};

inline bool point_in_shape(const ShapeSpec& sp, double x, double y) {
  const double dx = x - sp.cx, dy = y - sp.cy;
  switch (sp.klass % kMaxShapeKinds) {
    case 0:  // disk
      return dx * dx + dy * dy <= sp.radius * sp.radius;
    case 1: {  // axis-aligned square
      const double half = sp.radius * 0.9;
      return std::fabs(dx) <= half && std::fabs(dy) <= half;
    }
    case 2: {  // rotated equilateral triangle inscribed in the radius
      double vx[3], vy[3];
      for (int i = 0; i < 3; ++i) {
        const double a = sp.rot + 2.0 * 3.14159265358979323846 * i / 3.0 - 3.14159265358979323846 / 2.0;
        vx[i] = sp.cx + sp.radius * std::cos(a);
        vy[i] = sp.cy + sp.radius * std::sin(a);
      }
      double sign = 0.0;
      for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3;
        const double cross = (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]);
        if (cross == 0.0) continue;
        if (sign == 0.0) {
          sign = cross > 0 ? 1.0 : -1.0;
        } else if ((cross > 0 ? 1.0 : -1.0) != sign) {
          return false;
        }
      }
      return true;
    }
    default: {  // ring
      const double d2 = dx * dx + dy * dy;
      const double inner = sp.radius * 0.55;
      return d2 <= sp.radius * sp.radius && d2 >= inner * inner;
    }
  }
}

/// Coverage of a pixel by a shape, via a 4x4 subsample grid.
inline double pixel_coverage(const ShapeSpec& sp, std::int64_t px, std::int64_t py) {
  constexpr int k = 4;
  int inside = 0;
  for (int sy = 0; sy < k; ++sy)
    for (int sx = 0; sx < k; ++sx)
      if (point_in_shape(sp, px + (sx + 0.5) / k, py + (sy + 0.5) / k)) ++inside;
  return static_cast<double>(inside) / (k * k);
}

inline const float* class_palette(std::int64_t klass) {
  static const float palette[kMaxShapeKinds][3] = {
      {0.85f, 0.25f, 0.20f},  // disk: red
      {0.20f, 0.75f, 0.30f},  // square: green
      {0.25f, 0.40f, 0.90f},  // triangle: blue
      {0.90f, 0.80f, 0.20f},  // ring: yellow
  };
  return palette[klass % kMaxShapeKinds];
}

}  // namespace detail

/// Renders one sample from a counter-based stream keyed by `seed`. Later
/// shapes occlude earlier ones; anti-aliased edges in the image, majority
/// coverage in the mask. Retries (deterministically) until every drawn
/// class covers between 1% and 40% of the pixels.
inline Sample generate_sample(std::uint64_t seed, const DataConfig& cfg) {
  cfg.validate();
  const std::int64_t o = cfg.image_size;
  const std::int64_t total_px = o * o;
  const auto min_px = static_cast<std::int64_t>(std::ceil(0.01 * total_px));
  const auto max_px = static_cast<std::int64_t>(std::floor(0.40 * total_px));

  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    CounterRng rng(mix_key(seed, attempt));

    // Background: two-tone vertical gradient plus Gaussian noise.
    float bg0[3], bg1[3];
    for (int c = 0; c < 3; ++c) {
      bg0[c] = static_cast<float>(rng.uniform(0.05, 0.45));
      bg1[c] = static_cast<float>(std::clamp(bg0[c] + cfg.bg_gradient * rng.uniform(-1.0, 1.0), 0.0, 1.0));
    }
    Tensor image = Tensor::zeros({o, o, 3});
    for (std::int64_t y = 0; y < o; ++y) {
      const float t = o > 1 ? static_cast<float>(y) / (o - 1) : 0.0f;
      for (std::int64_t x = 0; x < o; ++x) {
        float* px = image.ptr() + (y * o + x) * 3;
        for (int c = 0; c < 3; ++c) {
          const float base = (1.0f - t) * bg0[c] + t * bg1[c];
          const float noisy = base + static_cast<float>(cfg.noise_std * rng.normal());
          px[c] = std::clamp(noisy, 0.0f, 1.0f);
        }
      }
    }

    // Classes without repetition, then one shape per class.
    const std::int64_t n_shapes = rng.uniform_int(cfg.min_shapes, cfg.max_shapes);
    std::vector<std::int64_t> classes(static_cast<std::size_t>(cfg.num_classes));
    std::iota(classes.begin(), classes.end(), 0);
    for (std::int64_t i = cfg.num_classes - 1; i > 0; --i) {
      std::swap(classes[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    }
    classes.resize(static_cast<std::size_t>(n_shapes));

    Tensor mask = Tensor::zeros({o, o});
    for (std::int64_t klass : classes) {
      detail::ShapeSpec sp;
      sp.klass = klass;
      sp.radius = rng.uniform(cfg.min_scale, cfg.max_scale) * o / 2.0;
      sp.cx = rng.uniform(sp.radius, o - 1 - sp.radius);
      sp.cy = rng.uniform(sp.radius, o - 1 - sp.radius);
      sp.rot = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const float* base = detail::class_palette(klass);
      for (int c = 0; c < 3; ++c) {
        sp.color[c] = std::clamp(base[c] + static_cast<float>(rng.uniform(-0.08, 0.08)), 0.0f, 1.0f);
      }
      const auto x0 = static_cast<std::int64_t>(std::floor(sp.cx - sp.radius - 1));
      const auto x1 = static_cast<std::int64_t>(std::ceil(sp.cx + sp.radius + 1));
      const auto y0 = static_cast<std::int64_t>(std::floor(sp.cy - sp.radius - 1));
      const auto y1 = static_cast<std::int64_t>(std::ceil(sp.cy + sp.radius + 1));
      for (std::int64_t y = std::max<std::int64_t>(0, y0); y <= std::min(o - 1, y1); ++y) {
        for (std::int64_t x = std::max<std::int64_t>(0, x0); x <= std::min(o - 1, x1); ++x) {
          const double cov = detail::pixel_coverage(sp, x, y);
          if (cov <= 0.0) continue;
          float* px = image.ptr() + (y * o + x) * 3;
          for (int c = 0; c < 3; ++c) {
            px[c] = static_cast<float>((1.0 - cov) * px[c] + cov * sp.color[c]);
          }
          if (cov >= 0.5) mask.ptr()[y * o + x] = static_cast<float>(klass + 1);
        }
      }
    }

    // Occlusion can shrink earlier shapes; keep only attempts where every
    // drawn class still covers its required pixel range.
    std::vector<std::int64_t> counts(static_cast<std::size_t>(cfg.num_classes), 0);
    for (std::int64_t i = 0; i < total_px; ++i) {
      const auto v = static_cast<std::int64_t>(mask.ptr()[i]);
      if (v > 0) ++counts[static_cast<std::size_t>(v - 1)];
    }
    bool ok = true;
    for (std::int64_t klass : classes) {
      const std::int64_t c = counts[static_cast<std::size_t>(klass)];
      if (c < min_px || c > max_px) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;

    Sample s;
    s.image = std::move(image);
    s.gt_mask = std::move(mask);
    s.label.assign(static_cast<std::size_t>(cfg.num_classes), 0.0f);
    for (std::int64_t k = 0; k < cfg.num_classes; ++k) {
      if (counts[static_cast<std::size_t>(k)] > 0) s.label[static_cast<std::size_t>(k)] = 1.0f;
    }
    return s;
  }
  throw std::runtime_error("generate_sample: no valid layout found; scale range likely violates coverage bounds");
}

/// Sample i of a named split uses seed hash(base_seed, name, i), so splits
/// with different names are disjoint by construction.
inline std::vector<Sample> generate_split(const std::string& name, std::int64_t count, std::uint64_t base_seed,
                                          const DataConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    out.push_back(generate_sample(derive_key(base_seed, name, static_cast<std::uint64_t>(i)), cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/XXXX.wtt, masks/XXXX.wtt, labels.csv, config.json
// (config.json is written by the caller, which owns the JSON dependency).
// ---------------------------------------------------------------------------

inline void write_split(const std::string& dir, const std::vector<Sample>& samples, std::int64_t num_classes) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::ostringstream labels;
  labels << "index";
  for (std::int64_t c = 0; c < num_classes; ++c) labels << ",class" << c;
  labels << "\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string id = zero_pad(static_cast<std::int64_t>(i));
    write_wtt((fs::path(dir) / "images" / (id + ".wtt")).string(), samples[i].image);
    write_wtt((fs::path(dir) / "masks" / (id + ".wtt")).string(), samples[i].gt_mask);
    labels << i;
    for (float v : samples[i].label) labels << "," << (v > 0.5f ? 1 : 0);
    labels << "\n";
  }
  write_text_file((fs::path(dir) / "labels.csv").string(), labels.str());
}

inline std::vector<Sample> read_split(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string csv = read_text_file((fs::path(dir) / "labels.csv").string());
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_split: empty labels.csv in " + dir);
  std::vector<Sample> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    const std::int64_t index = std::stoll(cell);
    Sample s;
    while (std::getline(row, cell, ',')) s.label.push_back(std::stof(cell));
    const std::string id = zero_pad(index);
    s.image = read_wtt((fs::path(dir) / "images" / (id + ".wtt")).string());
    s.gt_mask = read_wtt((fs::path(dir) / "masks" / (id + ".wtt")).string());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace weaktr
