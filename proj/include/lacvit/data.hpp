#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "lacvit/error.hpp"
#include "lacvit/rng.hpp"
#include "lacvit/tensor.hpp"

namespace lacvit {

// Square RGB image, pixels interleaved as (y, x, channel) in [0, 1].
struct Image {
  std::size_t size = 0;
  std::vector<double> pixels;

  Image() = default;
  explicit Image(std::size_t s, double fill = 0.0) : size(s), pixels(s * s * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * size + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * size + x) * 3 + c]; }
};

struct LabeledExample : Image {
  int label = 0;
};

enum class Split { kTrain, kValidation };

inline const char* split_name(Split s) { return s == Split::kTrain ? "train" : "validation"; }

struct ImageDataset {
  std::vector<LabeledExample> examples;
  int num_classes = 0;
  Split split = Split::kTrain;

  std::size_t size() const { return examples.size(); }
  std::size_t image_size() const { return examples.empty() ? 0 : examples.front().size; }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(examples.size());
    for (const auto& e : examples) out.push_back(e.label);
    return out;
  }

  void validate() const {
    if (examples.empty()) throw FormatError("dataset is empty");
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& e = examples[i];
      if (e.label < 0 || e.label >= num_classes)
        throw FormatError("example " + std::to_string(i) + " has label " + std::to_string(e.label) +
                          " outside [0, " + std::to_string(num_classes) + ")");
      if (e.size != examples.front().size || e.pixels.size() != e.size * e.size * 3)
        throw FormatError("example " + std::to_string(i) + " has inconsistent geometry");
    }
  }
};

// ---------------------------------------------------------------------------
// CIFAR binary layout: per record, label byte(s) then three size x size
// row-major planes R, G, B. CIFAR-100 records carry (coarse, fine) labels;
// the fine label is used.

enum class CifarLayout { kCifar10, kCifar100 };

inline std::size_t cifar_label_bytes(CifarLayout layout) { return layout == CifarLayout::kCifar10 ? 1 : 2; }

inline std::size_t cifar_record_size(CifarLayout layout, std::size_t image_size = 32) {
  return cifar_label_bytes(layout) + 3 * image_size * image_size;
}

inline ImageDataset parse_cifar_binary(const std::vector<std::uint8_t>& bytes, int num_classes,
                                       CifarLayout layout = CifarLayout::kCifar10, std::size_t image_size = 32,
                                       Split split = Split::kTrain) {
  const std::size_t rec = cifar_record_size(layout, image_size);
  const std::size_t label_bytes = cifar_label_bytes(layout);
  const std::size_t plane = image_size * image_size;
  if (bytes.empty() || bytes.size() % rec != 0)
    throw FormatError("CIFAR file length " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                      std::to_string(rec) + "-byte records");
  if (num_classes <= 0 || num_classes > 256) throw ConfigError("num_classes must be in [1, 256]");
  ImageDataset ds;
  ds.num_classes = num_classes;
  ds.split = split;
  const std::size_t n = bytes.size() / rec;
  ds.examples.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t off = r * rec;
    const int label = bytes[off + label_bytes - 1];
    if (label >= num_classes)
      throw FormatError("record " + std::to_string(r) + " at byte offset " + std::to_string(off + label_bytes - 1) +
                        ": label " + std::to_string(label) + " >= num_classes " + std::to_string(num_classes));
    LabeledExample ex;
    ex.size = image_size;
    ex.label = label;
    ex.pixels.resize(plane * 3);
    const std::uint8_t* px = bytes.data() + off + label_bytes;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) ex.pixels[i * 3 + c] = static_cast<double>(px[c * plane + i]) / 255.0;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline ImageDataset load_cifar_binary(const std::filesystem::path& path, int num_classes,
                                      CifarLayout layout = CifarLayout::kCifar10, std::size_t image_size = 32,
                                      Split split = Split::kTrain) {
  try {
    return parse_cifar_binary(read_file_bytes(path), num_classes, layout, image_size, split);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Pixel byte as written by the CIFAR writer.
inline std::uint8_t quantize_pixel(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<std::uint8_t> encode_cifar_binary(const ImageDataset& ds, CifarLayout layout = CifarLayout::kCifar10) {
  const std::size_t size = ds.image_size();
  const std::size_t plane = size * size;
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * cifar_record_size(layout, size));
  for (const auto& ex : ds.examples) {
    if (ex.label < 0 || ex.label > 255) throw FormatError("label does not fit in one byte");
    if (layout == CifarLayout::kCifar100) out.push_back(0);  // coarse label unused
    out.push_back(static_cast<std::uint8_t>(ex.label));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) out.push_back(quantize_pixel(ex.pixels[i * 3 + c]));
  }
  return out;
}

inline void write_cifar_binary(const ImageDataset& ds, const std::filesystem::path& path,
                               CifarLayout layout = CifarLayout::kCifar10) {
  const auto bytes = encode_cifar_binary(ds, layout);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Synthetic classes. Class k picks a pattern family (k mod 4: horizontal
// stripes, checkerboard, disk, vertical stripes), a spatial period from
// k / 4, and a two-colour palette from a golden-ratio hue walk.

inline constexpr int kMaxSyntheticClasses = 16;

inline LabeledExample synthetic_template(int k, std::size_t size) {
  // Odd periods: a pattern whose period divides the patch size lines up with
  // the patch grid on un-augmented images only, which augmented training
  // views never show.
  static constexpr double kPeriods[4] = {9.0, 13.0, 7.0, 17.0};
  const int family = k % 4;
  const double period = kPeriods[(k / 4) % 4];
  const double two_pi = 2.0 * std::numbers::pi;
  double tint[3];
  for (int c = 0; c < 3; ++c) tint[c] = 0.5 + 0.5 * std::cos(two_pi * (0.618034 * k + c / 3.0));
  LabeledExample ex;
  ex.size = size;
  ex.label = k;
  ex.pixels.resize(size * size * 3);
  const double centre = 0.5 * (static_cast<double>(size) - 1.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double v = 0.0;
      switch (family) {
        case 0: v = 0.5 + 0.5 * std::sin(two_pi * fy / period); break;
        case 1: v = 0.5 + 0.5 * std::sin(two_pi * fx / period) * std::sin(two_pi * fy / period); break;
        case 2: {
          const double r = std::hypot(fx - centre, fy - centre);
          const double radius = static_cast<double>(size) * (0.22 + 0.03 * (k / 4));
          v = 1.0 / (1.0 + std::exp(r - radius));
          break;
        }
        default: v = 0.5 + 0.5 * std::sin(two_pi * fx / period); break;
      }
      for (std::size_t c = 0; c < 3; ++c)
        ex.at(y, x, c) = 0.1 + 0.8 * (v * tint[c] + (1.0 - v) * (1.0 - tint[c]));
    }
  }
  return ex;
}

struct SyntheticSpec {
  int num_classes = 4;
  std::size_t per_class = 100;
  std::size_t size = 32;
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  Split split = Split::kTrain;
};

// Examples are interleaved by class: index i has label i mod num_classes.
inline ImageDataset gen_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.num_classes > kMaxSyntheticClasses)
    throw ContractError("gen_synthetic: num_classes must be in [1, 16]");
  if (spec.per_class == 0 || spec.size < 4) throw ContractError("gen_synthetic: empty dataset requested");
  if (spec.noise_sigma < 0.0) throw ContractError("gen_synthetic: noise_sigma must be >= 0");
  std::vector<LabeledExample> templates;
  for (int k = 0; k < spec.num_classes; ++k) templates.push_back(synthetic_template(k, spec.size));
  ImageDataset ds;
  ds.num_classes = spec.num_classes;
  ds.split = spec.split;
  const std::size_t n = spec.per_class * static_cast<std::size_t>(spec.num_classes);
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    LabeledExample ex = templates[i % static_cast<std::size_t>(spec.num_classes)];
    if (spec.noise_sigma > 0.0) {
      RngStream rng(spec.seed, stream_id(streams::kSynthetic, static_cast<std::uint64_t>(spec.split), i));
      for (double& p : ex.pixels) p = std::clamp(p + rng.normal(0.0, spec.noise_sigma), 0.0, 1.0);
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Patch serialisation. Row t holds patch (t / g, t mod g) of the g x g patch
// grid; within a row values run over (y, x, channel) row-major.

inline Tensor patchify(const Image& ex, std::size_t p) {
  if (p == 0 || ex.size % p != 0)
    throw ContractError("patchify: image size " + std::to_string(ex.size) + " not divisible by patch size " +
                        std::to_string(p));
  const std::size_t grid = ex.size / p;
  Tensor out = Tensor::matrix(grid * grid, p * p * 3);
  for (std::size_t t = 0; t < grid * grid; ++t) {
    const std::size_t py = t / grid, px = t % grid;
    std::size_t col = 0;
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x)
        for (std::size_t c = 0; c < 3; ++c) out(t, col++) = ex.at(py * p + y, px * p + x, c);
  }
  return out;
}

inline Image unpatchify(const Tensor& patches, std::size_t p) {
  const std::size_t tokens = patches.rows();
  const auto grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (grid * grid != tokens || patches.cols() != p * p * 3)
    throw DimensionError("unpatchify: " + shape_str(patches.shape()) + " is not a square grid of " +
                         std::to_string(p) + "x" + std::to_string(p) + " patches");
  Image ex(grid * p);
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t py = t / grid, px = t % grid;
    std::size_t col = 0;
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x)
        for (std::size_t c = 0; c < 3; ++c) ex.at(py * p + y, px * p + x, c) = patches(t, col++);
  }
  return ex;
}

// ---------------------------------------------------------------------------
// Batching.

struct Batch {
  std::vector<std::size_t> indices;  // into the source dataset
};

// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline std::vector<Batch> make_batches(std::size_t dataset_size, std::size_t batch_size, RngStream& rng,
                                       bool contrastive) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (contrastive && batch_size < 2) throw ConfigError("contrastive training needs batch_size >= 2");
  const auto order = shuffled_indices(dataset_size, rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < dataset_size; start += batch_size) {
    const std::size_t end = std::min(dataset_size, start + batch_size);
    out.push_back(Batch{std::vector<std::size_t>(order.begin() + start, order.begin() + end)});
  }
  return out;
}

// Shuffle stream for a given epoch.
inline RngStream epoch_shuffle_stream(std::uint64_t seed, std::size_t epoch) {
  return RngStream(seed, stream_id(streams::kShuffle, epoch));
}

}  // namespace lacvit
