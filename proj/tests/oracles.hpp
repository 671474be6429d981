#pragma once

// Brute-force reference implementations used only by tests. Written
// straight from the loss and score definitions, without sharing code paths
// (no log-sum-exp, no matrix products) with the library.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <vector>

#include "lacvit/rng.hpp"
#include "lacvit/tensor.hpp"

namespace lacvit::oracle {

inline double dot(const Tensor& z, std::size_t a, std::size_t b) {
  double s = 0.0;
  for (std::size_t c = 0; c < z.cols(); ++c) s += z(a, c) * z(b, c);
  return s;
}

inline double dot(const Tensor& x, std::size_t a, const Tensor& y, std::size_t b) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.cols(); ++c) s += x(a, c) * y(b, c);
  return s;
}

// sum_i -1/|P_i| sum_{p in P_i} log( exp(z_i.z_p/t) / sum_{a != i} exp(z_i.z_a/t) )
template <typename Pos>
double softmax_loss(const Tensor& z, double tau, Pos positive) {
  const std::size_t m = z.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double denom = 0.0;
    for (std::size_t a = 0; a < m; ++a)
      if (a != i) denom += std::exp(dot(z, i, a) / tau);
    double inner = 0.0;
    int np = 0;
    for (std::size_t p = 0; p < m; ++p) {
      if (p == i || !positive(i, p)) continue;
      inner += std::log(std::exp(dot(z, i, p) / tau) / denom);
      ++np;
    }
    total += -inner / np;
  }
  return total;
}

inline double supcon(const Tensor& z, const std::vector<int>& labels, double tau) {
  return softmax_loss(z, tau, [&](std::size_t i, std::size_t p) { return labels[i] == labels[p]; });
}

inline double ntxent(const Tensor& z, const std::vector<std::size_t>& source, double tau) {
  return softmax_loss(z, tau, [&](std::size_t i, std::size_t p) { return source[i] == source[p]; });
}

// Rows [0, n) anchors, rows [n, 2n) their positives.
inline double npair(const Tensor& z) {
  const std::size_t n = z.rows() / 2;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 1.0;
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) s += std::exp(dot(z, i, n + k) - dot(z, i, n + i));
    total += std::log(s);
  }
  return total;
}

inline double cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) s += std::exp(logits(i, c));
    total += -std::log(std::exp(logits(i, static_cast<std::size_t>(labels[i]))) / s);
  }
  return total / static_cast<double>(logits.rows());
}

// Eigenvectors from Eigen's solver rather than the library's Jacobi sweep;
// both signs are tried so the sign convention does not matter.
inline double isotropy(const Tensor& v) {
  const std::size_t n = v.rows(), d = v.cols();
  Eigen::MatrixXd vm(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) vm(i, c) = v(i, c);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(vm.transpose() * vm);
  double lo = INFINITY, hi = 0.0;
  for (std::size_t k = 0; k < d; ++k)
    for (double sign : {1.0, -1.0}) {
      double f = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double proj = 0.0;
        for (std::size_t c = 0; c < d; ++c) proj += sign * es.eigenvectors()(c, k) * vm(i, c);
        f += std::exp(proj);
      }
      lo = std::min(lo, f);
      hi = std::max(hi, f);
    }
  return lo / hi;
}

struct CosineMeans {
  double positive = 0.0, negative = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
};

inline CosineMeans cosine_means(const Tensor& v, const std::vector<int>& labels, int a, int b) {
  CosineMeans r;
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (std::size_t j = i + 1; j < v.rows(); ++j) {
      const int li = labels[i], lj = labels[j];
      if ((li != a && li != b) || (lj != a && lj != b)) continue;
      const double c = dot(v, i, j) / std::sqrt(dot(v, i, i) * dot(v, j, j));
      if (li == lj) {
        r.positive += c;
        ++r.n_pos;
      } else {
        r.negative += c;
        ++r.n_neg;
      }
    }
  r.positive /= static_cast<double>(r.n_pos);
  r.negative /= static_cast<double>(r.n_neg);
  return r;
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

// Random contrastive batch: b images, two views each (rows [0,b) first views,
// [b,2b) second views), labels drawn from `classes`, unit rows if asked.
struct RandomBatch {
  Tensor z;
  std::vector<int> labels;
  std::vector<std::size_t> sources;
};

inline RandomBatch random_batch(RngStream& rng, std::size_t b, std::size_t d, int classes, bool unit) {
  RandomBatch out;
  out.z = Tensor::matrix(2 * b, d);
  for (double& x : out.z.data()) x = rng.normal();
  if (unit)
    for (std::size_t i = 0; i < 2 * b; ++i) {
      const double n = std::sqrt(dot(out.z, i, i));
      for (std::size_t c = 0; c < d; ++c) out.z(i, c) /= n;
    }
  std::vector<int> image_labels(b);
  for (auto& l : image_labels) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < b; ++i) {
      out.labels.push_back(image_labels[i]);
      out.sources.push_back(i);
    }
  return out;
}

}  // namespace lacvit::oracle
