#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "lacvit/losses.hpp"
#include "oracles.hpp"

using namespace lacvit;
using lacvit::testing::check_gradients;
using lacvit::testing::random_tensor;

namespace {

constexpr double kTaus[] = {0.05, 0.1, 0.5};

ContrastiveBatch as_batch(const oracle::RandomBatch& rb) { return {rb.z, rb.labels, rb.sources}; }

}  // namespace

TEST(Losses, SupConMatchesDoubleLoop) {
  RngStream rng(1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.below(8), d = 1 + rng.below(32);
    const double tau = kTaus[trial % 3];
    auto rb = oracle::random_batch(rng, b, d, 1 + static_cast<int>(rng.below(4)), true);
    const auto lv = supcon_loss(as_batch(rb), tau);
    EXPECT_LT(oracle::rel_err(lv.scalar, oracle::supcon(rb.z, rb.labels, tau)), 1e-10) << "trial " << trial;
    double sum = 0.0;
    for (double v : lv.per_anchor) sum += v;
    EXPECT_DOUBLE_EQ(sum, lv.scalar);
  }
}

TEST(Losses, NtXentMatchesDoubleLoop) {
  RngStream rng(2, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.below(8), d = 1 + rng.below(32);
    const double tau = kTaus[trial % 3];
    auto rb = oracle::random_batch(rng, b, d, 3, true);
    EXPECT_LT(oracle::rel_err(ntxent_loss(as_batch(rb), tau).scalar, oracle::ntxent(rb.z, rb.sources, tau)), 1e-10);
  }
}

TEST(Losses, NPairMatchesDoubleLoop) {
  RngStream rng(3, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 2 + rng.below(7), d = 1 + rng.below(32);
    auto rb = oracle::random_batch(rng, b, d, 3, false);
    const auto lv = npair_loss(as_batch(rb));
    EXPECT_EQ(lv.per_anchor.size(), b);
    EXPECT_LT(oracle::rel_err(lv.scalar, oracle::npair(rb.z)), 1e-10);
  }
}

TEST(Losses, CrossEntropyMatchesDoubleLoop) {
  RngStream rng(4, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.below(16), k = 2 + rng.below(10);
    Tensor logits = random_tensor({b, k}, rng, 3.0);
    std::vector<int> labels(b);
    for (auto& l : labels) l = static_cast<int>(rng.below(k));
    EXPECT_LT(oracle::rel_err(cross_entropy(logits, labels).scalar, oracle::cross_entropy(logits, labels)), 1e-10);
  }
}

TEST(Losses, AnalyticValues) {
  // One image, two views: the only candidate is the positive.
  Tensor two = Tensor::from_rows({{0.6, 0.8}, {1.0, 0.0}});
  EXPECT_NEAR(supcon_loss({two, {0, 0}, {0, 0}}, 0.1).scalar, 0.0, 1e-12);
  // Four identical same-class rows: each anchor scores ln 3.
  Tensor same = Tensor::from_rows({{1, 0}, {1, 0}, {1, 0}, {1, 0}});
  EXPECT_NEAR(supcon_loss({same, {2, 2, 2, 2}, {0, 1, 0, 1}}, 0.1).scalar, 4 * std::log(3.0), 1e-9);
  Tensor uniform({5, 10}, 0.7);
  EXPECT_NEAR(cross_entropy(uniform, {0, 1, 2, 3, 9}).scalar, std::log(10.0), 1e-12);
}

TEST(Losses, SupConReducesToNtXentForUniqueLabels) {
  RngStream rng(5, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 2 + rng.below(7), d = 2 + rng.below(30);
    auto rb = oracle::random_batch(rng, b, d, 1, true);
    for (std::size_t r = 0; r < rb.labels.size(); ++r) rb.labels[r] = static_cast<int>(rb.sources[r]);
    const double tau = kTaus[trial % 3];
    EXPECT_LT(oracle::rel_err(supcon_loss(as_batch(rb), tau).scalar, ntxent_loss(as_batch(rb), tau).scalar), 1e-10);
  }
}

TEST(Losses, ContractErrors) {
  Tensor z = Tensor::from_rows({{1, 0}, {0, 1}, {1, 0}});
  EXPECT_THROW(supcon_loss({z, {0, 1, 0}, {0, 1, 0}}, 0.0), ContractError);
  // Row 1 has no positive.
  EXPECT_THROW(supcon_loss({z, {0, 1, 0}, {0, 1, 0}}, 0.1), ContractError);
  EXPECT_THROW(npair_loss({z, {0, 1, 0}, {0, 1, 0}}), ContractError);
  Tensor one = Tensor::from_rows({{1, 0}, {0, 1}});
  EXPECT_THROW(npair_loss({one, {0, 0}, {0, 0}}), ContractError);
  EXPECT_THROW(cross_entropy(one, {0, 2}), ContractError);
  EXPECT_THROW(ContrastiveBatch::from_pairs(z, {0, 1}), DimensionError);
}

TEST(Losses, FromPairsLayout) {
  Tensor z({6, 2});
  const auto cb = ContrastiveBatch::from_pairs(z, {4, 5, 6});
  EXPECT_EQ(cb.labels, (std::vector<int>{4, 5, 6, 4, 5, 6}));
  EXPECT_EQ(cb.view_source, (std::vector<std::size_t>{0, 1, 2, 0, 1, 2}));
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RngStream rng(100 + seed, 1);
    auto rb = oracle::random_batch(rng, 4, 6, 2, false);
    std::vector<int> ce_labels{0, 2, 1, 2, 0};
    ParameterSet ps;
    Parameter& z = ps.add("z", rb.z);
    Parameter& logits = ps.add("logits", random_tensor({5, 3}, rng));
    for (LossKind kind : {LossKind::kSupCon, LossKind::kNtXent, LossKind::kNPair}) {
      for (double tau : kTaus) {
        auto r = check_gradients({&z}, [&](Graph& g, bool bw) {
          // Normalise inside the graph for the softmax losses, as training does.
          Var zz = g.param(z);
          if (kind != LossKind::kNPair) zz = l2_normalize_rows(zz);
          Var loss = contrastive_loss(zz, rb.labels, rb.sources, kind, tau);
          if (bw) g.backward(loss);
          return loss.value()[0];
        });
        EXPECT_TRUE(r.ok) << loss_kind_name(kind) << " tau " << tau << " seed " << seed << " worst " << r.worst_rel;
        if (kind == LossKind::kNPair) break;
      }
    }
    auto r = check_gradients({&logits}, [&](Graph& g, bool bw) {
      Var loss = cross_entropy(g.param(logits), ce_labels);
      if (bw) g.backward(loss);
      return loss.value()[0];
    });
    EXPECT_TRUE(r.ok) << "cross_entropy seed " << seed << " worst " << r.worst_rel;
  }
}

TEST(Heads, ProjectionHeadGradientsAndUnitRows) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ProjectionHead head = ProjectionHead::init(6, 6, 5, seed);
    RngStream rng(200 + seed, 1);
    Tensor h = random_tensor({8, 6}, rng);
    std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1};
    std::vector<std::size_t> sources{0, 1, 2, 3, 0, 1, 2, 3};
    std::vector<Parameter*> params;
    for (auto& p : head.params()) params.push_back(&p);
    auto r = check_gradients(params, [&](Graph& g, bool bw) {
      Var loss = contrastive_loss(head.forward(g, g.constant(h)), labels, sources, LossKind::kSupCon, 0.1);
      if (bw) g.backward(loss);
      return loss.value()[0];
    });
    EXPECT_TRUE(r.ok) << "seed " << seed << " worst " << r.worst_rel << " at " << r.worst_name;
    Graph g;
    Tensor z = head.forward(g, g.constant(h)).value();
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double n = 0.0;
      for (double v : z.row(i)) n += v * v;
      EXPECT_NEAR(n, 1.0, 1e-12);
    }
  }
}

TEST(Heads, ShapesAndNames) {
  ProjectionHead p = ProjectionHead::init(64, 64, 128, 1);
  EXPECT_EQ(p.output_dim(), 128u);
  EXPECT_TRUE(p.params().contains("projection.w1"));
  LinearHead l = LinearHead::init(64, 4, 1);
  EXPECT_EQ(l.num_classes(), 4u);
  Graph g;
  EXPECT_EQ(l.forward(g, g.constant(Tensor({3, 64}, 0.1))).shape(), (Shape{3, 4}));
  // Fan-in bound.
  for (double v : l.params().get("classifier.weight").value.data()) EXPECT_LE(std::abs(v), 1.0 / 8.0);
}

TEST(Losses, PerAnchorBoundAndPermutationInvariance) {
  RngStream rng(6, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 2 + rng.below(7), d = 2 + rng.below(16);
    const double tau = kTaus[trial % 3];
    auto rb = oracle::random_batch(rng, b, d, 3, true);
    const auto lv = supcon_loss(as_batch(rb), tau);
    const double bound = 2.0 / tau + std::log(static_cast<double>(2 * b - 1));
    for (double a : lv.per_anchor) EXPECT_LE(a, bound + 1e-12);
    // Reverse the rows: same multiset of anchors, same total.
    oracle::RandomBatch rev = rb;
    const std::size_t m = 2 * b;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < d; ++c) rev.z(i, c) = rb.z(m - 1 - i, c);
      rev.labels[i] = rb.labels[m - 1 - i];
      rev.sources[i] = rb.sources[m - 1 - i];
    }
    EXPECT_NEAR(supcon_loss(as_batch(rev), tau).scalar, lv.scalar, 1e-12 * std::max(1.0, lv.scalar));
  }
}
