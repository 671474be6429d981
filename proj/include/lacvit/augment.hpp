#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "lacvit/data.hpp"
#include "lacvit/error.hpp"
#include "lacvit/rng.hpp"

namespace lacvit {

enum class PolicyStage { kOne, kTwo };

// Stochastic view recipe. Stage one is the full contrastive recipe; stage two
// keeps only the geometric transforms.
struct AugmentationPolicy {
  PolicyStage stage = PolicyStage::kOne;
  double crop_scale_lo = 0.4;
  double crop_scale_hi = 1.0;
  double aspect_lo = 3.0 / 4.0;
  double aspect_hi = 4.0 / 3.0;
  double rotation_lo_deg = -30.0;
  double rotation_hi_deg = 30.0;
  // Half the usual 0.8: at 0.8 the colour noise swamps every class cue a
  // freshly initialised tiny ViT can see and stage one collapses z.
  double color_jitter_strength = 0.4;
  double grayscale_probability = 0.2;
  double blur_probability = 0.5;
  double hflip_probability = 0.5;

  static AugmentationPolicy stage_one() { return {}; }

  static AugmentationPolicy stage_two() {
    AugmentationPolicy p;
    p.stage = PolicyStage::kTwo;
    p.color_jitter_strength = 0.0;
    p.grayscale_probability = 0.0;
    p.blur_probability = 0.0;
    return p;
  }

  // Every transform reduced to the identity.
  static AugmentationPolicy identity(PolicyStage stage) {
    AugmentationPolicy p;
    p.stage = stage;
    p.crop_scale_lo = p.crop_scale_hi = 1.0;
    p.aspect_lo = p.aspect_hi = 1.0;
    p.rotation_lo_deg = p.rotation_hi_deg = 0.0;
    p.color_jitter_strength = 0.0;
    p.grayscale_probability = 0.0;
    p.blur_probability = 0.0;
    p.hflip_probability = 0.0;
    return p;
  }

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!(crop_scale_lo > 0.0 && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
      throw ConfigError("augment: crop scale range must satisfy 0 < lo <= hi <= 1");
    if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi)) throw ConfigError("augment: invalid aspect range");
    if (!(rotation_lo_deg <= rotation_hi_deg)) throw ConfigError("augment: invalid rotation range");
    if (!(color_jitter_strength >= 0.0)) throw ConfigError("augment: color jitter strength must be >= 0");
    if (!prob(grayscale_probability) || !prob(blur_probability) || !prob(hflip_probability))
      throw ConfigError("augment: probabilities must lie in [0, 1]");
    if (stage == PolicyStage::kTwo &&
        (color_jitter_strength != 0.0 || blur_probability != 0.0 || grayscale_probability != 0.0))
      throw ConfigError("augment: stage-two policy must not enable colour distortion or blur");
  }
};

// Names of transforms actually applied, in order (optional instrumentation).
using AugmentTrace = std::vector<std::string>;

namespace detail {

// Reflect-101 index into [0, n).
inline std::ptrdiff_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Bilinear sample at continuous (y, x); taps outside the image are reflected.
inline void bilinear(const Image& img, double y, double x, double out[3]) {
  const auto n = static_cast<std::ptrdiff_t>(img.size);
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const auto ya = static_cast<std::size_t>(reflect_index(y0, n)), yb = static_cast<std::size_t>(reflect_index(y0 + 1, n));
  const auto xa = static_cast<std::size_t>(reflect_index(x0, n)), xb = static_cast<std::size_t>(reflect_index(x0 + 1, n));
  for (std::size_t c = 0; c < 3; ++c) {
    double v = (1 - wy) * (1 - wx) * img.at(ya, xa, c);
    if (wx != 0.0) v += (1 - wy) * wx * img.at(ya, xb, c);
    if (wy != 0.0) v += wy * (1 - wx) * img.at(yb, xa, c);
    if (wy != 0.0 && wx != 0.0) v += wy * wx * img.at(yb, xb, c);
    out[c] = v;
  }
}

inline void clamp_unit(Image& img) {
  for (double& p : img.pixels) p = std::clamp(p, 0.0, 1.0);
}

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace detail

struct CropBox {
  double y0, x0, height, width;
};

// Crops `box` out of `img` and bilinearly resamples it to the full size.
inline Image crop_resize(const Image& img, const CropBox& box) {
  Image out(img.size);
  const double n = static_cast<double>(img.size);
  const double sy = box.height / n, sx = box.width / n;
  double px[3];
  for (std::size_t y = 0; y < img.size; ++y) {
    const double src_y = std::clamp(box.y0 + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, n - 1.0);
    for (std::size_t x = 0; x < img.size; ++x) {
      const double src_x = std::clamp(box.x0 + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, n - 1.0);
      detail::bilinear(img, src_y, src_x, px);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = px[c];
    }
  }
  return out;
}

// Samples the crop rectangle: area fraction in scale range, log-uniform
// aspect ratio, each side at least 2 pixels and at most the image side.
inline CropBox sample_crop_box(std::size_t size, RngStream& rng, double scale_lo, double scale_hi,
                               double aspect_lo = 3.0 / 4.0, double aspect_hi = 4.0 / 3.0) {
  const double n = static_cast<double>(size);
  const double area = n * n * rng.uniform(scale_lo, scale_hi);
  const double aspect = std::exp(rng.uniform(std::log(aspect_lo), std::log(aspect_hi)));
  const double min_side = std::min(2.0, n);
  const double w = std::clamp(std::sqrt(area * aspect), min_side, n);
  const double h = std::clamp(std::sqrt(area / aspect), min_side, n);
  const double y0 = rng.uniform(0.0, n - h);
  const double x0 = rng.uniform(0.0, n - w);
  return {y0, x0, h, w};
}

inline Image random_crop_resize(const Image& img, RngStream& rng, double scale_lo, double scale_hi,
                                double aspect_lo = 3.0 / 4.0, double aspect_hi = 4.0 / 3.0) {
  return crop_resize(img, sample_crop_box(img.size, rng, scale_lo, scale_hi, aspect_lo, aspect_hi));
}

inline Image hflip(const Image& img) {
  Image out(img.size);
  for (std::size_t y = 0; y < img.size; ++y)
    for (std::size_t x = 0; x < img.size; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.size - 1 - x, c);
  return out;
}

// Rotation about the image centre by `degrees` (counter-clockwise in image
// coordinates), bilinear sampling, reflected borders.
inline Image rotate_by(const Image& img, double degrees) {
  if (degrees == 0.0) return img;
  const double theta = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double centre = 0.5 * (static_cast<double>(img.size) - 1.0);
  Image out(img.size);
  double px[3];
  for (std::size_t y = 0; y < img.size; ++y) {
    for (std::size_t x = 0; x < img.size; ++x) {
      const double dy = static_cast<double>(y) - centre, dx = static_cast<double>(x) - centre;
      // inverse map: source = R(-theta) * destination
      const double src_x = centre + cs * dx + sn * dy;
      const double src_y = centre - sn * dx + cs * dy;
      detail::bilinear(img, src_y, src_x, px);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = px[c];
    }
  }
  detail::clamp_unit(out);
  return out;
}

inline Image rotate(const Image& img, RngStream& rng, double lo_deg, double hi_deg) {
  return rotate_by(img, rng.uniform(lo_deg, hi_deg));
}

// Parameters drawn for one colour-jitter call; exposed for tests.
struct JitterDraw {
  std::array<int, 4> order;  // 0 brightness, 1 contrast, 2 saturation, 3 hue
  double brightness, contrast, saturation, hue;
  bool grayscale;
};

inline Image apply_jitter(const Image& img, const JitterDraw& d) {
  Image out = img;
  const std::size_t npx = img.size * img.size;
  for (int op : d.order) {
    switch (op) {
      case 0:
        for (double& p : out.pixels) p *= d.brightness;
        break;
      case 1: {
        double mean = 0.0;
        for (std::size_t i = 0; i < npx; ++i)
          mean += detail::luma(out.pixels[3 * i], out.pixels[3 * i + 1], out.pixels[3 * i + 2]);
        mean /= static_cast<double>(npx);
        for (double& p : out.pixels) p = (p - mean) * d.contrast + mean;
        break;
      }
      case 2:
        for (std::size_t i = 0; i < npx; ++i) {
          const double g = detail::luma(out.pixels[3 * i], out.pixels[3 * i + 1], out.pixels[3 * i + 2]);
          for (std::size_t c = 0; c < 3; ++c) out.pixels[3 * i + c] = (out.pixels[3 * i + c] - g) * d.saturation + g;
        }
        break;
      default: {
        if (d.hue == 0.0) break;
        // Rotate chroma in YIQ space by hue * 2 pi.
        const double a = d.hue * 2.0 * std::numbers::pi;
        const double ca = std::cos(a), sa = std::sin(a);
        for (std::size_t i = 0; i < npx; ++i) {
          double* p = &out.pixels[3 * i];
          const double yy = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
          const double ii = 0.595716 * p[0] - 0.274453 * p[1] - 0.321263 * p[2];
          const double qq = 0.211456 * p[0] - 0.522591 * p[1] + 0.311135 * p[2];
          const double i2 = ca * ii - sa * qq, q2 = sa * ii + ca * qq;
          p[0] = yy + 0.9563 * i2 + 0.6210 * q2;
          p[1] = yy - 0.2721 * i2 - 0.6474 * q2;
          p[2] = yy - 1.1070 * i2 + 1.7046 * q2;
        }
        break;
      }
    }
    detail::clamp_unit(out);
  }
  if (d.grayscale) {
    for (std::size_t i = 0; i < npx; ++i) {
      const double g = detail::luma(out.pixels[3 * i], out.pixels[3 * i + 1], out.pixels[3 * i + 2]);
      out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = g;
    }
    detail::clamp_unit(out);
  }
  return out;
}

inline JitterDraw sample_jitter(RngStream& rng, double strength, double grayscale_probability) {
  JitterDraw d{};
  const double lo = std::max(0.0, 1.0 - 0.8 * strength), hi = 1.0 + 0.8 * strength;
  d.brightness = rng.uniform(lo, hi);
  d.contrast = rng.uniform(lo, hi);
  d.saturation = rng.uniform(lo, hi);
  d.hue = rng.uniform(-0.2 * strength, 0.2 * strength);
  d.order = {0, 1, 2, 3};
  for (std::size_t i = 4; i > 1; --i) std::swap(d.order[i - 1], d.order[rng.below(i)]);
  d.grayscale = rng.bernoulli(grayscale_probability);
  return d;
}

inline Image color_jitter(const Image& img, RngStream& rng, double strength, double grayscale_probability = 0.2) {
  if (strength < 0.0) throw ContractError("color_jitter: strength must be >= 0");
  return apply_jitter(img, sample_jitter(rng, strength, grayscale_probability));
}

// Normalised 1-D Gaussian, half-width ceil(2 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ContractError("gaussian_kernel: sigma must be positive");
  const auto half = static_cast<std::ptrdiff_t>(std::ceil(2.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double s = 0.0;
  for (std::ptrdiff_t i = -half; i <= half; ++i)
    s += (k[static_cast<std::size_t>(i + half)] = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma)));
  for (double& v : k) v /= s;
  return k;
}

// Separable Gaussian convolution with reflected borders.
inline Image blur_with_sigma(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const auto half = static_cast<std::ptrdiff_t>(k.size() / 2);
  const auto n = static_cast<std::ptrdiff_t>(img.size);
  Image tmp(img.size), out(img.size);
  for (std::ptrdiff_t y = 0; y < n; ++y)
    for (std::ptrdiff_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t i = -half; i <= half; ++i)
          s += k[static_cast<std::size_t>(i + half)] *
               img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(detail::reflect_index(x + i, n)), c);
        tmp.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
      }
  for (std::ptrdiff_t y = 0; y < n; ++y)
    for (std::ptrdiff_t x = 0; x < n; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::ptrdiff_t i = -half; i <= half; ++i)
          s += k[static_cast<std::size_t>(i + half)] *
               tmp.at(static_cast<std::size_t>(detail::reflect_index(y + i, n)), static_cast<std::size_t>(x), c);
        out.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = s;
      }
  detail::clamp_unit(out);
  return out;
}

inline Image gaussian_blur(const Image& img, RngStream& rng, double blur_probability) {
  if (!rng.bernoulli(blur_probability)) return img;
  return blur_with_sigma(img, rng.uniform(0.1, 2.0));
}

// ---------------------------------------------------------------------------
// View generation.

struct ViewPair {
  Image view_a;
  Image view_b;
  std::size_t source_index = 0;
  int label = 0;
};

// Per-view stream: depends only on (seed, epoch, example index, view index).
inline RngStream view_stream(std::uint64_t seed, std::size_t epoch, std::size_t index, std::size_t view) {
  return RngStream(seed, stream_id(streams::kAugment, epoch, index, view));
}

namespace detail {

inline Image geometric_chain(const Image& img, const AugmentationPolicy& p, RngStream& rng, AugmentTrace* trace) {
  Image out = random_crop_resize(img, rng, p.crop_scale_lo, p.crop_scale_hi, p.aspect_lo, p.aspect_hi);
  if (trace) trace->push_back("random_crop_resize");
  if (rng.bernoulli(p.hflip_probability)) {
    out = hflip(out);
    if (trace) trace->push_back("hflip");
  }
  out = rotate(out, rng, p.rotation_lo_deg, p.rotation_hi_deg);
  if (trace) trace->push_back("rotate");
  return out;
}

inline Image stage_one_chain(const Image& img, const AugmentationPolicy& p, RngStream& rng, AugmentTrace* trace) {
  Image out = geometric_chain(img, p, rng, trace);
  out = color_jitter(out, rng, p.color_jitter_strength, p.grayscale_probability);
  if (trace) trace->push_back("color_jitter");
  out = gaussian_blur(out, rng, p.blur_probability);
  if (trace) trace->push_back("gaussian_blur");
  return out;
}

}  // namespace detail

inline ViewPair make_view_pair(const LabeledExample& ex, std::size_t source_index, const AugmentationPolicy& policy,
                               std::uint64_t seed, std::size_t epoch, AugmentTrace* trace = nullptr) {
  if (policy.stage != PolicyStage::kOne) throw ContractError("make_view_pair: requires a stage-one policy");
  RngStream ra = view_stream(seed, epoch, source_index, 0);
  RngStream rb = view_stream(seed, epoch, source_index, 1);
  ViewPair pair;
  pair.view_a = detail::stage_one_chain(ex, policy, ra, trace);
  pair.view_b = detail::stage_one_chain(ex, policy, rb, trace);
  pair.source_index = source_index;
  pair.label = ex.label;
  return pair;
}

// Reduced chain: crop-resize, flip, rotate. No colour distortion, no blur.
inline Image make_single_view(const LabeledExample& ex, std::size_t source_index, const AugmentationPolicy& policy,
                              std::uint64_t seed, std::size_t epoch, AugmentTrace* trace = nullptr) {
  if (policy.stage != PolicyStage::kTwo) throw ContractError("make_single_view: requires a stage-two policy");
  RngStream r = view_stream(seed, epoch, source_index, 0);
  return detail::geometric_chain(ex, policy, r, trace);
}

// Runs fn(i) for i in [0, n) over up to `workers` threads. Each index is
// processed by exactly one worker, so results are schedule-independent when
// fn writes only to slot i.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

inline std::vector<ViewPair> augment_pairs(const ImageDataset& ds, const std::vector<std::size_t>& indices,
                                           const AugmentationPolicy& policy, std::uint64_t seed, std::size_t epoch,
                                           std::size_t workers = 1) {
  std::vector<ViewPair> out(indices.size());
  parallel_for(indices.size(), workers, [&](std::size_t i) {
    out[i] = make_view_pair(ds.examples[indices[i]], indices[i], policy, seed, epoch);
  });
  return out;
}

inline std::vector<Image> augment_single(const ImageDataset& ds, const std::vector<std::size_t>& indices,
                                         const AugmentationPolicy& policy, std::uint64_t seed, std::size_t epoch,
                                         std::size_t workers = 1) {
  std::vector<Image> out(indices.size());
  parallel_for(indices.size(), workers, [&](std::size_t i) {
    out[i] = make_single_view(ds.examples[indices[i]], indices[i], policy, seed, epoch);
  });
  return out;
}

}  // namespace lacvit
