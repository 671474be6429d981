#pragma once

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lacvit/error.hpp"
#include "lacvit/tensor.hpp"

namespace lacvit {

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap as_matrix(Tensor& t) {
  return MatMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
}  // namespace detail

// Dense products over the matrix view of each tensor (leading dims flattened
// into rows). The kernels are Eigen's single-threaded GEMM.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b);
  return out;
}

// a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "^T");
  Tensor out = Tensor::matrix(a.rows(), b.rows());
  detail::as_matrix(out).noalias() = detail::as_matrix(a) * detail::as_matrix(b).transpose();
  return out;
}

// a^T * b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: inner dimensions disagree for " + shape_str(a.shape()) + "^T and " +
                         shape_str(b.shape()));
  Tensor out = Tensor::matrix(a.cols(), b.cols());
  detail::as_matrix(out).noalias() = detail::as_matrix(a).transpose() * detail::as_matrix(b);
  return out;
}

// Accumulating variants used by backward passes.
inline void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  detail::as_matrix(out).noalias() += detail::as_matrix(a) * detail::as_matrix(b).transpose();
}
inline void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  detail::as_matrix(out).noalias() += detail::as_matrix(a).transpose() * detail::as_matrix(b);
}
inline void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  detail::as_matrix(out).noalias() += detail::as_matrix(a) * detail::as_matrix(b);
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

struct SymEigResult {
  std::vector<double> eigenvalues;  // descending
  Tensor eigenvectors;              // column k pairs with eigenvalues[k]
};

inline constexpr double kSymmetryTolerance = 1e-10;
inline constexpr double kEigenTieTolerance = 1e-12;

// Cyclic Jacobi eigensolver for a real symmetric matrix. Rotations sweep the
// strict upper triangle in row-major (p, q) order. Eigenpairs are sorted by
// descending eigenvalue; pairs whose eigenvalues agree within 1e-12 keep the
// order of the diagonal position they converged on. Each eigenvector is
// signed so its first nonzero component is positive.
inline SymEigResult sym_eig(const Tensor& input) {
  if (input.rank() != 2 || input.dim(0) != input.dim(1))
    throw DimensionError("sym_eig: expected a square matrix, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0);
  double scale = 0.0;
  for (double v : input.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > kSymmetryTolerance * std::max(1.0, scale))
        throw ContractError("sym_eig: matrix is not symmetric at (" + std::to_string(i) + ", " +
                            std::to_string(j) + ")");

  Tensor a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (input(i, j) + input(j, i));
  Tensor v = Tensor::identity(n);

  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  double frob = 0.0;
  for (double x : a.data()) frob += x * x;
  frob = std::sqrt(frob);

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    if (off_norm() <= 1e-15 * frob || frob == 0.0) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a(i, i) > a(j, j) + kEigenTieTolerance;
  });

  SymEigResult out{std::vector<double>(n), Tensor::matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t src = order[k];
    out.eigenvalues[k] = a(src, src);
    double norm = 0.0, vmax = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      norm += v(r, src) * v(r, src);
      vmax = std::max(vmax, std::abs(v(r, src)));
    }
    norm = std::sqrt(norm);
    double sign = 1.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (std::abs(v(r, src)) > 1e-12 * vmax) {
        sign = v(r, src) < 0 ? -1.0 : 1.0;
        break;
      }
    }
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, k) = sign * v(r, src) / norm;
  }
  return out;
}

// Covariance (divided by N-1) of the rows of x after centering.
inline Tensor covariance(const Tensor& x) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw ContractError("covariance: need at least 2 rows");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Tensor centered = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) = x(i, j) - mean[j];
  Tensor cov = matmul_tn(centered, centered);
  for (auto& c : cov.data()) c /= static_cast<double>(n - 1);
  return cov;
}

// Projects centered rows onto the top-k covariance eigenvectors.
inline Tensor pca_project(const Tensor& x, std::size_t k) {
  const std::size_t n = x.rows(), d = x.cols();
  if (x.rank() != 2) throw DimensionError("pca_project: expected a matrix, got " + shape_str(x.shape()));
  if (n < 2) throw ContractError("pca_project: need at least 2 rows");
  if (k == 0 || k > d)
    throw ContractError("pca_project: k=" + std::to_string(k) + " must be in [1, " + std::to_string(d) + "]");
  const SymEigResult eig = sym_eig(covariance(x));
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Tensor out = Tensor::matrix(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (x(i, j) - mean[j]) * eig.eigenvectors(j, c);
      out(i, c) = s;
    }
  return out;
}

}  // namespace lacvit
