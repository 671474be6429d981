#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "lacvit/data.hpp"

using namespace lacvit;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("lacvit_test_data_" + name);
}

}  // namespace

TEST(Cifar, ZeroRecordIsBlackImageWithLabelZero) {
  std::vector<std::uint8_t> bytes(3073, 0);
  const auto ds = parse_cifar_binary(bytes, 10);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.examples[0].label, 0);
  EXPECT_EQ(ds.examples[0].size, 32u);
  for (double p : ds.examples[0].pixels) EXPECT_EQ(p, 0.0);
}

TEST(Cifar, RecordsInFileOrderAndPlanarLayout) {
  std::vector<std::uint8_t> bytes(2 * 3073, 0);
  bytes[0] = 7;
  bytes[3073] = 3;
  bytes[1 + 0] = 255;            // R of pixel (0,0), record 0
  bytes[3073 + 1 + 1024 + 5] = 51;  // G of pixel (0,5), record 1
  const auto ds = parse_cifar_binary(bytes, 10);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.examples[0].label, 7);
  EXPECT_EQ(ds.examples[1].label, 3);
  EXPECT_EQ(ds.examples[0].at(0, 0, 0), 1.0);
  EXPECT_EQ(ds.examples[1].at(0, 5, 1), 0.2);
}

TEST(Cifar, Cifar100UsesFineLabel) {
  std::vector<std::uint8_t> bytes(3074, 0);
  bytes[0] = 4;   // coarse
  bytes[1] = 42;  // fine
  EXPECT_EQ(parse_cifar_binary(bytes, 100, CifarLayout::kCifar100).examples[0].label, 42);
}

TEST(Cifar, FormatErrors) {
  EXPECT_THROW(parse_cifar_binary(std::vector<std::uint8_t>(3072, 0), 10), FormatError);
  EXPECT_THROW(parse_cifar_binary({}, 10), FormatError);
  std::vector<std::uint8_t> bytes(2 * 3073, 0);
  bytes[3073] = 10;
  try {
    parse_cifar_binary(bytes, 10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 3073"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_cifar_binary(temp_path("missing.bin"), 10), FormatError);
}

TEST(Cifar, WriterReaderRoundTripIsExact) {
  const auto ds = gen_synthetic({.num_classes = 4, .per_class = 5, .seed = 3});
  const auto path = temp_path("roundtrip.bin");
  write_cifar_binary(ds, path);
  EXPECT_EQ(std::filesystem::file_size(path), ds.size() * cifar_record_size(CifarLayout::kCifar10));
  const auto back = load_cifar_binary(path, 4);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.examples[i].label, ds.examples[i].label);
    for (std::size_t j = 0; j < ds.examples[i].pixels.size(); ++j)
      ASSERT_EQ(back.examples[i].pixels[j], quantize_pixel(ds.examples[i].pixels[j]) / 255.0);
  }
  // Re-encoding the loaded set reproduces the file bytes.
  EXPECT_EQ(encode_cifar_binary(back), read_file_bytes(path));
  std::filesystem::remove(path);
}

TEST(Synthetic, NoiseFreeClassesAreConstant) {
  const auto ds = gen_synthetic({.num_classes = 4, .per_class = 3, .noise_sigma = 0.0});
  for (std::size_t i = 4; i < ds.size(); ++i) EXPECT_EQ(ds.examples[i].pixels, ds.examples[i % 4].pixels);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.examples[i].label, static_cast<int>(i % 4));
}

TEST(Synthetic, DeterministicAndSplitsDiffer) {
  SyntheticSpec spec{.seed = 9};
  EXPECT_EQ(gen_synthetic(spec).examples[17].pixels, gen_synthetic(spec).examples[17].pixels);
  SyntheticSpec val = spec;
  val.split = Split::kValidation;
  EXPECT_NE(gen_synthetic(spec).examples[17].pixels, gen_synthetic(val).examples[17].pixels);
}

TEST(Synthetic, NearestTemplateClassifiesEverything) {
  const auto ds = gen_synthetic({.num_classes = 4, .per_class = 100, .noise_sigma = 0.05, .seed = 1});
  std::vector<LabeledExample> templates;
  for (int k = 0; k < 4; ++k) templates.push_back(synthetic_template(k, 32));
  std::size_t correct = 0;
  for (const auto& ex : ds.examples) {
    int best = -1;
    double best_d = INFINITY;
    for (int k = 0; k < 4; ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < ex.pixels.size(); ++j) d += std::pow(ex.pixels[j] - templates[k].pixels[j], 2);
      if (d < best_d) best_d = d, best = k;
    }
    correct += best == ex.label;
  }
  EXPECT_EQ(correct, ds.size());
}

TEST(Synthetic, RejectsBadSpecs) {
  EXPECT_THROW(gen_synthetic({.num_classes = 17}), ContractError);
  EXPECT_THROW(gen_synthetic({.per_class = 0}), ContractError);
}

TEST(Patchify, GeometryAndRasterOrder) {
  Image img(32);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<double>(y * 1000 + x * 10 + c);
  const Tensor p = patchify(img, 4);
  EXPECT_EQ(p.shape(), (Shape{64, 48}));
  // Patch 9 = grid row 1, column 1; its first entry is pixel (4, 4) channel 0,
  // entry 3 is pixel (4, 5) channel 0, entry 12 is pixel (5, 4).
  EXPECT_EQ(p(9, 0), 4 * 1000 + 4 * 10);
  EXPECT_EQ(p(9, 3), 4 * 1000 + 5 * 10);
  EXPECT_EQ(p(9, 12), 5 * 1000 + 4 * 10);
  EXPECT_EQ(p(7, 0), 0 * 1000 + 28 * 10);
  EXPECT_EQ(unpatchify(p, 4).pixels, img.pixels);
  EXPECT_EQ(patchify(Image(224), 16).rows(), 196u);
  EXPECT_THROW(patchify(Image(30), 4), ContractError);
}

TEST(Patchify, ConstantImageGivesIdenticalRows) {
  const Tensor p = patchify(Image(16, 0.3), 4);
  for (std::size_t t = 1; t < p.rows(); ++t)
    for (std::size_t c = 0; c < p.cols(); ++c) EXPECT_EQ(p(t, c), p(0, c));
}

TEST(Batching, SizesAndDeterminism) {
  RngStream a(5, 1), b(5, 1);
  const auto ba = make_batches(10, 4, a, false);
  ASSERT_EQ(ba.size(), 3u);
  EXPECT_EQ(ba[0].indices.size(), 4u);
  EXPECT_EQ(ba[1].indices.size(), 4u);
  EXPECT_EQ(ba[2].indices.size(), 2u);
  const auto bb = make_batches(10, 4, b, false);
  std::set<std::size_t> all;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ba[i].indices, bb[i].indices);
    all.insert(ba[i].indices.begin(), ba[i].indices.end());
  }
  EXPECT_EQ(all.size(), 10u);
  RngStream c(5, 1);
  EXPECT_THROW(make_batches(10, 1, c, true), ConfigError);
  EXPECT_NO_THROW(make_batches(10, 1, c, false));
}

TEST(Batching, ShuffleIsUniformOverFirstPosition) {
  const std::size_t n = 10, trials = 10000;
  std::vector<std::size_t> first(n, 0);
  for (std::uint64_t s = 0; s < trials; ++s) {
    RngStream rng = epoch_shuffle_stream(s, 0);
    ++first[shuffled_indices(n, rng)[0]];
  }
  const double p = 1.0 / n, sigma = std::sqrt(p * (1 - p) / trials);
  for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(static_cast<double>(first[k]) / trials, p, 3 * sigma) << k;
}

TEST(Dataset, ValidateCatchesBadLabels) {
  auto ds = gen_synthetic({.num_classes = 2, .per_class = 2});
  ds.examples[1].label = 5;
  EXPECT_THROW(ds.validate(), FormatError);
  EXPECT_THROW(ImageDataset{}.validate(), FormatError);
}
