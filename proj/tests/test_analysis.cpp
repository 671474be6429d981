#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "lacvit/analysis.hpp"
#include "lacvit/trainer.hpp"
#include "oracles.hpp"

using namespace lacvit;

namespace {

EmbeddingSet make_set(Tensor v, std::vector<int> labels, int classes) {
  EmbeddingSet s;
  s.vectors = std::move(v);
  s.labels = std::move(labels);
  s.num_classes = classes;
  s.source = "test";
  return s;
}

Tensor gaussian(RngStream& rng, std::size_t n, std::size_t d, double sd = 1.0) {
  Tensor t = Tensor::matrix(n, d);
  for (double& x : t.data()) x = rng.normal(0.0, sd);
  return t;
}

// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
Tensor random_rotation(RngStream& rng, std::size_t d) {
  Tensor q = gaussian(rng, d, d);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += q(i, k) * q(i, j);
      for (std::size_t i = 0; i < d; ++i) q(i, k) -= dot * q(i, j);
    }
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += q(i, k) * q(i, k);
    for (std::size_t i = 0; i < d; ++i) q(i, k) /= std::sqrt(n);
  }
  return q;
}

Model tiny_stage1() {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.projection_dim = 8;
  c.vit.image_size = 8;
  c.vit.patch_size = 4;
  c.vit.embed_dim = 16;
  c.vit.depth = 1;
  c.vit.heads = 2;
  c.vit.mlp_ratio = 2;
  MetricsLog log(false);
  return train_stage1(c, gen_synthetic({.per_class = 2, .size = 8}), log);
}

}  // namespace

TEST(Isotropy, SymmetricBasisScoresOne) {
  const auto r = isotropy_score(Tensor::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}}));
  EXPECT_NEAR(r.score, 1.0, 1e-12);
  EXPECT_EQ(r.candidate_count, 4u);
  EXPECT_EQ(r.f_values.size(), 4u);
}

TEST(Isotropy, TripleCopyClosedForm) {
  const double s = 1.0 / std::sqrt(2.0);
  const auto r = isotropy_score(Tensor::from_rows({{s, s}, {s, s}, {s, s}}));
  EXPECT_NEAR(r.score, std::exp(-2.0), 1e-12);
  const auto [lo, hi] = std::minmax_element(r.f_values.begin(), r.f_values.end());
  EXPECT_NEAR(*hi, 3.0 * std::exp(1.0), 1e-12);
  EXPECT_NEAR(*lo, 3.0 / std::exp(1.0), 1e-12);
}

TEST(Isotropy, MatchesIndependentImplementation) {
  RngStream rng(11, 1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng.below(200), d = 2 + rng.below(9);
    const Tensor v = gaussian(rng, n, d, 0.3);
    const auto r = isotropy_score(v);
    EXPECT_LT(oracle::rel_err(r.score, oracle::isotropy(v)), 1e-10) << trial;
    EXPECT_EQ(r.candidate_count, 2 * d);
    EXPECT_GT(r.score, 0.0);
    EXPECT_LE(r.score, 1.0);
    const auto [lo, hi] = std::minmax_element(r.f_values.begin(), r.f_values.end());
    EXPECT_NEAR(r.score, *lo / *hi, 1e-12);
  }
  // The reference case: N = 200, d = 8.
  const Tensor v = gaussian(rng, 200, 8, 0.5);
  EXPECT_LT(oracle::rel_err(isotropy_score(v).score, oracle::isotropy(v)), 1e-10);
}

TEST(Isotropy, RotationAndPermutationInvariance) {
  RngStream rng(12, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 100, d = 6;
    Tensor v = gaussian(rng, n, d, 0.4);
    // Stretch axes so V^T V has well separated eigenvalues.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) v(i, c) *= 1.0 + 0.5 * static_cast<double>(c);
    const double base = isotropy_score(v).score;
    EXPECT_NEAR(isotropy_score(matmul(v, random_rotation(rng, d))).score, base, 1e-6);
    Tensor perm = v;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) perm(i, c) = v((i * 37 + 5) % n, c);
    EXPECT_EQ(isotropy_score(perm).score, base);
  }
}

TEST(Isotropy, LargeNormsDoNotOverflow) {
  RngStream rng(13, 1);
  const Tensor v = gaussian(rng, 64, 4, 400.0);
  const auto r = isotropy_score(v);
  EXPECT_TRUE(std::isfinite(r.score));
  EXPECT_GE(r.score, 0.0);
}

TEST(Isotropy, ErrorsAndWarnings) {
  EXPECT_THROW(isotropy_score(Tensor({3, 2})), DegenerateInputError);
  RngStream rng(14, 1);
  EXPECT_FALSE(isotropy_score(gaussian(rng, 3, 5)).warning.empty());
  EXPECT_TRUE(isotropy_score(gaussian(rng, 8, 5)).warning.empty());
}

TEST(Cosine, IdenticalVectors) {
  const auto s = make_set(Tensor({6, 3}, 0.5), {0, 0, 0, 1, 1, 1}, 2);
  const auto r = cosine_report(s, 0, 1);
  EXPECT_NEAR(r.positive_mean, 1.0, 1e-12);
  EXPECT_NEAR(r.negative_mean, 1.0, 1e-12);
  EXPECT_EQ(r.positive_pairs, 6u);
  EXPECT_EQ(r.negative_pairs, 9u);
}

TEST(Cosine, OrthogonalClasses) {
  const auto s = make_set(Tensor::from_rows({{1, 0}, {2, 0}, {0, 3}, {0, 1}, {0, 5}}), {0, 0, 1, 1, 1}, 2);
  const auto r = cosine_report(s, 0, 1);
  EXPECT_NEAR(r.positive_mean, 1.0, 1e-12);
  EXPECT_NEAR(r.negative_mean, 0.0, 1e-12);
  EXPECT_NEAR(r.separation(), 1.0, 1e-12);
  EXPECT_EQ(std::accumulate(r.positive_hist.begin(), r.positive_hist.end(), std::size_t{0}), 4u);
  EXPECT_EQ(std::accumulate(r.negative_hist.begin(), r.negative_hist.end(), std::size_t{0}), 6u);
  EXPECT_EQ(r.positive_hist.back(), 4u);
  EXPECT_EQ(r.negative_hist[25], 6u);
}

TEST(Cosine, MatchesDoubleLoopAndIgnoresScale) {
  RngStream rng(15, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 10 + rng.below(30), d = 2 + rng.below(10);
    Tensor v = gaussian(rng, n, d);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
    const auto s = make_set(v, labels, 3);
    const auto r = cosine_report(s, 0, 2);
    const auto o = oracle::cosine_means(v, labels, 0, 2);
    EXPECT_NEAR(r.positive_mean, o.positive, 1e-12);
    EXPECT_NEAR(r.negative_mean, o.negative, 1e-12);
    EXPECT_EQ(r.positive_pairs, o.n_pos);
    EXPECT_EQ(r.negative_pairs, o.n_neg);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) v(i, c) *= 0.1 + static_cast<double>(i);
    const auto scaled = cosine_report(make_set(v, labels, 3), 0, 2);
    EXPECT_NEAR(scaled.positive_mean, r.positive_mean, 1e-12);
    EXPECT_NEAR(scaled.negative_mean, r.negative_mean, 1e-12);
  }
}

TEST(Cosine, SamplingIsSeededAndUnbiased) {
  RngStream rng(16, 1);
  const std::size_t n = 200;
  Tensor v = gaussian(rng, n, 4);
  for (std::size_t i = 0; i < n; ++i) v(i, 0) += (i % 2) ? 2.0 : -2.0;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 2);
  const auto s = make_set(v, labels, 2);
  const auto exact = cosine_report(s, 0, 1);
  const auto a = cosine_report(s, 0, 1, 7, 2000), b = cosine_report(s, 0, 1, 7, 2000);
  EXPECT_FALSE(exact.sampled);
  EXPECT_TRUE(a.sampled);
  EXPECT_EQ(a.positive_mean, b.positive_mean);
  EXPECT_EQ(a.positive_hist, b.positive_hist);
  EXPECT_EQ(std::accumulate(a.negative_hist.begin(), a.negative_hist.end(), std::size_t{0}), 2000u);
  EXPECT_NEAR(a.positive_mean, exact.positive_mean, 0.05);
  EXPECT_NEAR(a.negative_mean, exact.negative_mean, 0.05);
}

TEST(Cosine, Contracts) {
  const auto s = make_set(Tensor::from_rows({{1, 0}, {1, 1}, {0, 1}, {2, 1}}), {0, 0, 1, 2}, 3);
  EXPECT_THROW(cosine_report(s, 0, 0), ContractError);
  EXPECT_THROW(cosine_report(s, 0, 1), ContractError);  // class 1 has one member
  const auto z = make_set(Tensor::from_rows({{0, 0}, {1, 1}, {0, 1}, {2, 1}}), {0, 0, 1, 1}, 2);
  EXPECT_THROW(cosine_report(z, 0, 1), DegenerateInputError);
  const auto [a, b] = pick_two_classes(10, 3);
  EXPECT_LT(a, b);
  EXPECT_EQ(pick_two_classes(10, 3), std::make_pair(a, b));
}

TEST(Cosine, HistogramCsvHasFiftyRows) {
  const auto s = make_set(Tensor::from_rows({{1, 0}, {2, 0}, {0, 3}, {0, 1}}), {0, 0, 1, 1}, 2);
  const std::string csv = cosine_histogram_csv(cosine_report(s, 0, 1), "abc");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 52);
  EXPECT_EQ(csv.rfind("# config_hash=abc\nbin,lower,upper,positive_count,negative_count\n0,-1.00,-0.96,", 0), 0u);
}

TEST(Accuracy, TiesAndOneHot) {
  EXPECT_EQ(accuracy_top1(Tensor::from_rows({{1, 0, 0}, {0, 0, 1}, {0, 1, 0}}), {0, 2, 1}), 1.0);
  // Equal logits: argmax is class 0, so accuracy is the frequency of class 0.
  EXPECT_DOUBLE_EQ(accuracy_top1(Tensor({5, 3}, 0.2), {0, 1, 0, 2, 0}), 0.6);
  EXPECT_THROW(accuracy_top1(Tensor({2, 3}), {0}), DimensionError);
}

TEST(Accuracy, MonotoneTransformInvariance) {
  RngStream rng(17, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = gaussian(rng, 30, 5);
    std::vector<int> labels(30);
    for (auto& l : labels) l = static_cast<int>(rng.below(5));
    const double base = accuracy_top1(logits, labels);
    for (double& x : logits.data()) x = std::exp(3.0 * x) + 7.0;
    EXPECT_EQ(accuracy_top1(logits, labels), base);
  }
}

TEST(Embeddings, ExtractionShapesAndContracts) {
  Model m = tiny_stage1();
  const auto ds = gen_synthetic({.per_class = 3, .size = 8, .seed = 4, .split = Split::kValidation});
  const auto h = extract_embeddings(m, ds, Representation::kH);
  EXPECT_EQ(h.vectors.shape(), (Shape{12, 16}));
  EXPECT_EQ(h.labels, ds.labels());
  EXPECT_EQ(extract_embeddings(m, ds, Representation::kH).vectors, h.vectors);
  const auto z = extract_embeddings(m, ds, Representation::kZ);
  EXPECT_EQ(z.vectors.shape(), (Shape{12, 8}));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(oracle::dot(z.vectors, i, i), 1.0, 1e-12);
  m.projection.reset();
  EXPECT_THROW(extract_embeddings(m, ds, Representation::kZ), ContractError);
  EXPECT_THROW(predict_logits(m, ds), ContractError);
  EXPECT_THROW(extract_embeddings(m, gen_synthetic({.per_class = 1, .size = 16}), Representation::kH), ConfigError);
}

TEST(Projection, TwoColumnsAndDeterministic) {
  RngStream rng(18, 1);
  const auto s = make_set(gaussian(rng, 20, 6), std::vector<int>(20, 0), 1);
  const Tensor p = project_2d(s);
  EXPECT_EQ(p.shape(), (Shape{20, 2}));
  EXPECT_EQ(project_2d(s), p);
  const std::string csv = projection_csv(p, s.labels, "h");
  EXPECT_EQ(csv.rfind("# config_hash=h\nindex,label,x,y\n0,0,", 0), 0u);
  EXPECT_THROW(project_2d(make_set(gaussian(rng, 2, 3), {0, 0}, 1)), ContractError);
}

TEST(Reports, JsonFields) {
  const auto r = isotropy_score(Tensor::from_rows({{1, 0}, {-1, 0}, {0, 1}, {0, -1}}));
  const auto j = isotropy_json(r, "src", "hash");
  EXPECT_EQ(j["analysis"], "isotropy");
  EXPECT_EQ(j["config_hash"], "hash");
  EXPECT_EQ(j["candidate_count"], 4);
  EXPECT_EQ(j["f_values"].size(), 4u);
}
