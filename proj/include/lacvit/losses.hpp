#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "lacvit/autograd.hpp"
#include "lacvit/encoder.hpp"
#include "lacvit/error.hpp"

namespace lacvit {

enum class LossKind { kSupCon, kNtXent, kNPair };

inline const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::kSupCon: return "supcon";
    case LossKind::kNtXent: return "ntxent";
    default: return "npair";
  }
}

// Embeddings of 2B views plus, per row, the class label and the index of the
// source image. Every source contributes exactly two rows.
struct ContrastiveBatch {
  Tensor z;
  std::vector<int> labels;
  std::vector<std::size_t> view_source;

  std::size_t size() const { return labels.size(); }

  // Row layout used by the trainer: rows [0, B) are first views, rows
  // [B, 2B) second views of the same images.
  static ContrastiveBatch from_pairs(Tensor z, const std::vector<int>& image_labels) {
    const std::size_t b = image_labels.size();
    if (z.rows() != 2 * b) throw DimensionError("contrastive batch: expected 2B rows");
    ContrastiveBatch out{std::move(z), {}, {}};
    for (std::size_t v = 0; v < 2; ++v)
      for (std::size_t i = 0; i < b; ++i) {
        out.labels.push_back(image_labels[i]);
        out.view_source.push_back(i);
      }
    return out;
  }
};

// scalar == sum(per_anchor); grad is d scalar / d input, same shape as input.
struct LossValue {
  double scalar = 0.0;
  std::vector<double> per_anchor;
  Tensor grad;

  // Loss divided by the number of anchors (reporting only).
  double mean() const { return per_anchor.empty() ? 0.0 : scalar / static_cast<double>(per_anchor.size()); }
};

namespace detail {

inline void check_batch(const ContrastiveBatch& batch, double tau) {
  if (!(tau > 0.0)) throw ContractError("contrastive loss: tau must be positive");
  const std::size_t m = batch.size();
  if (m < 2 || batch.z.rows() != m || batch.view_source.size() != m)
    throw DimensionError("contrastive loss: z has " + std::to_string(batch.z.rows()) + " rows, labels " +
                         std::to_string(m) + ", sources " + std::to_string(batch.view_source.size()));
}

// Shared softmax-over-others loss. For anchor i:
//   loss_i = logsumexp_{a != i}(s_ia) - mean_{p in P(i)} s_ip,  s = z z^T / tau
// where `positive(i, a)` defines P(i).
template <typename PositiveFn>
LossValue softmax_contrastive(const ContrastiveBatch& batch, double tau, PositiveFn positive) {
  const std::size_t m = batch.size();
  const Tensor sim = matmul_nt(batch.z, batch.z);
  Tensor coef = Tensor::matrix(m, m);  // d loss / d s_ia
  LossValue out;
  out.per_anchor.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < m; ++a)
      if (a != i) mx = std::max(mx, sim(i, a) / tau);
    double denom = 0.0;
    for (std::size_t a = 0; a < m; ++a)
      if (a != i) denom += std::exp(sim(i, a) / tau - mx);
    const double lse = mx + std::log(denom);
    std::size_t npos = 0;
    double pos_sum = 0.0;
    for (std::size_t a = 0; a < m; ++a)
      if (a != i && positive(i, a)) {
        ++npos;
        pos_sum += sim(i, a) / tau;
      }
    if (npos == 0) throw ContractError("contrastive loss: anchor " + std::to_string(i) + " has no positives");
    out.per_anchor[i] = lse - pos_sum / static_cast<double>(npos);
    for (std::size_t a = 0; a < m; ++a) {
      if (a == i) continue;
      coef(i, a) = std::exp(sim(i, a) / tau - lse) - (positive(i, a) ? 1.0 / static_cast<double>(npos) : 0.0);
    }
  }
  for (double v : out.per_anchor) out.scalar += v;
  // d s_ia / d z_i = z_a / tau and d s_ia / d z_a = z_i / tau.
  Tensor sym = Tensor::matrix(m, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < m; ++a) sym(i, a) = (coef(i, a) + coef(a, i)) / tau;
  out.grad = matmul(sym, batch.z);
  return out;
}

}  // namespace detail

// Label-aware contrastive loss: every same-label view is a positive; the
// denominator runs over all other views. Summed over anchors.
inline LossValue supcon_loss(const ContrastiveBatch& batch, double tau) {
  detail::check_batch(batch, tau);
  return detail::softmax_contrastive(batch, tau, [&](std::size_t i, std::size_t a) {
    return batch.labels[i] == batch.labels[a];
  });
}

// NT-Xent: the only positive is the sibling view of the same source image.
inline LossValue ntxent_loss(const ContrastiveBatch& batch, double tau) {
  detail::check_batch(batch, tau);
  return detail::softmax_contrastive(batch, tau, [&](std::size_t i, std::size_t a) {
    return batch.view_source[i] == batch.view_source[a];
  });
}

// Multi-class N-pair loss on unnormalised embeddings. The first row of each
// source is its anchor, the second its positive:
//   loss_i = log(1 + sum_{k != i} exp(f_i . f+_k - f_i . f+_i))
inline LossValue npair_loss(const ContrastiveBatch& batch) {
  const std::size_t m = batch.size();
  if (batch.z.rows() != m || batch.view_source.size() != m)
    throw DimensionError("npair_loss: z rows, labels and sources disagree");
  std::vector<std::size_t> anchor, pos;
  {
    std::vector<std::int64_t> first(m, -1);
    std::vector<int> count(m, 0);
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t s = batch.view_source[r];
      if (s >= m) throw ContractError("npair_loss: source index out of range");
      if (++count[s] > 2) throw ContractError("npair_loss: source " + std::to_string(s) + " has more than two views");
      if (first[s] < 0) {
        first[s] = static_cast<std::int64_t>(r);
      } else {
        anchor.push_back(static_cast<std::size_t>(first[s]));
        pos.push_back(r);
      }
    }
    for (std::size_t s = 0; s < m; ++s)
      if (count[s] == 1) throw ContractError("npair_loss: source " + std::to_string(s) + " has a single view");
  }
  const std::size_t n = anchor.size();
  if (n < 2) throw ContractError("npair_loss: need at least 2 distinct images");
  const Tensor& z = batch.z;
  const std::size_t d = z.cols();
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += z(a, c) * z(b, c);
    return s;
  };
  LossValue out;
  out.per_anchor.assign(n, 0.0);
  out.grad = Tensor(z.shape());
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double self = dot(anchor[i], pos[i]);
    double mx = 0.0;  // the implicit "1" term is exp(0)
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, u[k] = dot(anchor[i], pos[k]) - self);
    double s = std::exp(-mx);
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) s += std::exp(u[k] - mx);
    out.per_anchor[i] = mx + std::log(s);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const double w = std::exp(u[k] - mx) / s;  // d loss_i / d u_k
      for (std::size_t c = 0; c < d; ++c) {
        out.grad(anchor[i], c) += w * (z(pos[k], c) - z(pos[i], c));
        out.grad(pos[k], c) += w * z(anchor[i], c);
        out.grad(pos[i], c) -= w * z(anchor[i], c);
      }
    }
  }
  for (double v : out.per_anchor) out.scalar += v;
  return out;
}

// Mean over the batch of -log softmax(logits)[label]. per_anchor holds each
// example's share (its loss / B) so that scalar == sum(per_anchor).
inline LossValue cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t b = logits.rows(), k = logits.cols();
  if (labels.size() != b) throw DimensionError("cross_entropy: label count != batch rows");
  LossValue out;
  out.per_anchor.assign(b, 0.0);
  out.grad = Tensor(logits.shape());
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                          std::to_string(k) + ")");
    double mx = logits(i, 0);
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(i, c));
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += std::exp(logits(i, c) - mx);
    const double lse = mx + std::log(s);
    const auto y = static_cast<std::size_t>(labels[i]);
    out.per_anchor[i] = (lse - logits(i, y)) * inv_b;
    for (std::size_t c = 0; c < k; ++c)
      out.grad(i, c) = (std::exp(logits(i, c) - lse) - (c == y ? 1.0 : 0.0)) * inv_b;
  }
  for (double v : out.per_anchor) out.scalar += v;
  return out;
}

// Graph adapters: evaluate the loss on the node's value and attach its
// gradient.
inline Var contrastive_loss(Var z, const std::vector<int>& labels, const std::vector<std::size_t>& sources,
                            LossKind kind, double tau, LossValue* report = nullptr) {
  ContrastiveBatch batch{z.value(), labels, sources};
  LossValue lv = kind == LossKind::kSupCon   ? supcon_loss(batch, tau)
                 : kind == LossKind::kNtXent ? ntxent_loss(batch, tau)
                                             : npair_loss(batch);
  if (report) *report = lv;
  return custom_scalar(z, lv.scalar, std::move(lv.grad));
}

inline Var cross_entropy(Var logits, const std::vector<int>& labels, LossValue* report = nullptr) {
  LossValue lv = cross_entropy(logits.value(), labels);
  if (report) *report = lv;
  return custom_scalar(logits, lv.scalar, std::move(lv.grad));
}

// Fan-in scaled initialisation for the heads, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_fan_in(Parameter& p, std::uint64_t seed, std::size_t fan_in) {
  RngStream rng(seed, stream_id(streams::kInit, fnv1a64(p.name)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : p.value.data()) v = rng.uniform(-bound, bound);
}

// z = normalize(relu(h W1 + b1) W2 + b2). Stage one only.
class ProjectionHead {
 public:
  static constexpr const char* kPrefix = "projection.";

  ProjectionHead() = default;
  ProjectionHead(std::size_t d_in, std::size_t d_hidden, std::size_t d_proj) {
    params_.add("projection.w1", Tensor::matrix(d_in, d_hidden));
    params_.add("projection.b1", Tensor({d_hidden}));
    params_.add("projection.w2", Tensor::matrix(d_hidden, d_proj));
    params_.add("projection.b2", Tensor({d_proj}));
  }

  static ProjectionHead init(std::size_t d_in, std::size_t d_hidden, std::size_t d_proj, std::uint64_t seed) {
    ProjectionHead head(d_in, d_hidden, d_proj);
    init_fan_in(head.params_.get("projection.w1"), seed, d_in);
    init_fan_in(head.params_.get("projection.b1"), seed, d_in);
    init_fan_in(head.params_.get("projection.w2"), seed, d_hidden);
    init_fan_in(head.params_.get("projection.b2"), seed, d_hidden);
    return head;
  }

  std::size_t input_dim() const { return params_.get("projection.w1").value.dim(0); }
  std::size_t hidden_dim() const { return params_.get("projection.w1").value.dim(1); }
  std::size_t output_dim() const { return params_.get("projection.w2").value.dim(1); }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Var forward(Graph& g, Var h, bool normalize = true) {
    Var x = relu(add_bias(matmul(h, g.param(params_.get("projection.w1"))), g.param(params_.get("projection.b1"))));
    x = add_bias(matmul(x, g.param(params_.get("projection.w2"))), g.param(params_.get("projection.b2")));
    return normalize ? l2_normalize_rows(x) : x;
  }

 private:
  ParameterSet params_;
};

// logits = h W^T + b with W of shape K x d.
class LinearHead {
 public:
  static constexpr const char* kPrefix = "classifier.";

  LinearHead() = default;
  LinearHead(std::size_t d_in, std::size_t classes) {
    params_.add("classifier.weight", Tensor::matrix(classes, d_in));
    params_.add("classifier.bias", Tensor({classes}));
  }

  static LinearHead init(std::size_t d_in, std::size_t classes, std::uint64_t seed) {
    LinearHead head(d_in, classes);
    init_fan_in(head.params_.get("classifier.weight"), seed, d_in);
    return head;
  }

  std::size_t num_classes() const { return params_.get("classifier.weight").value.dim(0); }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  Var forward(Graph& g, Var h) {
    return add_bias(matmul_nt(h, g.param(params_.get("classifier.weight"))), g.param(params_.get("classifier.bias")));
  }

 private:
  ParameterSet params_;
};

}  // namespace lacvit
