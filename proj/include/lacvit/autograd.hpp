#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lacvit/error.hpp"
#include "lacvit/linalg.hpp"
#include "lacvit/tensor.hpp"

namespace lacvit {

// A trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

// Named parameters with stable addresses (graphs hold raw pointers into the
// store for the duration of a step). Iteration follows insertion order.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.emplace_back(std::move(name), std::move(value));
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void set_trainable(bool on) {
    for (auto& p : params_) p.trainable = on;
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

class Graph;

// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Define-by-run tape. Nodes are appended in topological order as ops execute;
// backward() walks them in reverse. A fresh Graph is built for every step.
class Graph {
 public:
  // Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Graph&, const Tensor&)>;

  Var constant(Tensor value) { return push(std::move(value), false, nullptr, nullptr); }

  Var param(Parameter& p) { return push(p.value, grad_enabled_, nullptr, &p); }

  // With gradients disabled parameters enter as constants and no backward
  // closures are kept (inference).
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.graph != this) throw ContractError("graph: mixing nodes from different graphs");
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr, nullptr);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient slot of an input during backward, or nullptr if the input does
  // not lead to any parameter.
  Tensor* grad_slot(Var v) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return &n.grad;
  }

  // Reverse-mode sweep from a scalar; accumulates into Parameter::grad.
  void backward(Var loss) {
    const Tensor& lv = value(loss);
    if (lv.size() != 1)
      throw ContractError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor(lv.shape(), 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      } else if (n.backward) {
        Tensor g = std::move(n.grad);
        n.backward(*this, g);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn, Parameter* p) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, std::move(fn), p});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {
inline void expect_same(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
inline void add_into(Tensor* dst, const Tensor& src, double alpha = 1.0) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += alpha * s[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Op suite. Every op computes its forward value eagerly and records the exact
// vector-Jacobian product needed for backward.

inline Var matmul(Var a, Var b) {
  Graph& g = *a.graph;
  return g.record(matmul(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a)) matmul_nt_acc(dy, b.value(), *ga);
    if (Tensor* gb = g.grad_slot(b)) matmul_tn_acc(a.value(), dy, *gb);
  });
}

// a * b^T
inline Var matmul_nt(Var a, Var b) {
  Graph& g = *a.graph;
  return g.record(matmul_nt(a.value(), b.value()), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a)) matmul_acc(dy, b.value(), *ga);
    if (Tensor* gb = g.grad_slot(b)) matmul_tn_acc(dy, a.value(), *gb);
  });
}

inline Var add(Var a, Var b) {
  detail::expect_same(a, b, "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    detail::add_into(g.grad_slot(a), dy);
    detail::add_into(g.grad_slot(b), dy);
  });
}

inline Var sub(Var a, Var b) {
  detail::expect_same(a, b, "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    detail::add_into(g.grad_slot(a), dy);
    detail::add_into(g.grad_slot(b), dy, -1.0);
  });
}

inline Var mul(Var a, Var b) {
  detail::expect_same(a, b, "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a)) {
      auto bv = b.value().data();
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += dy[i] * bv[i];
    }
    if (Tensor* gb = g.grad_slot(b)) {
      auto av = a.value().data();
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += dy[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph->record(std::move(out), {a},
                         [a, s](Graph& g, const Tensor& dy) { detail::add_into(g.grad_slot(a), dy, s); });
}

inline Var relu(Var a) {
  Tensor out = a.value();
  // NaN passes through so a diverged input still reaches the loss check.
  for (auto& v : out.data()) v = v < 0.0 ? 0.0 : v;
  return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a)) {
      auto x = a.value().data();
      for (std::size_t i = 0; i < ga->size(); ++i)
        if (x[i] > 0.0) (*ga)[i] += dy[i];
    }
  });
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::exp(v);
  Tensor y = out;
  return a.graph->record(std::move(out), {a}, [a, y = std::move(y)](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a))
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += dy[i] * y[i];
  });
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) {
    if (!(v > 0.0)) throw DegenerateInputError("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a)) {
      auto x = a.value().data();
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += dy[i] / x[i];
    }
  });
}

// Plain-tensor kernels shared by the graph ops and by inference paths.
inline Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double s = 0.0;
    for (double& v : row) s += (v = std::exp(v - m));
    for (double& v : row) v /= s;
  }
  return out;
}

inline Tensor l2_normalize_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double s = 0.0;
    for (double v : row) s += v * v;
    if (s == 0.0) throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(r) + " is all zero");
    const double inv = 1.0 / std::sqrt(s);
    for (double& v : row) v *= inv;
  }
  return out;
}

inline Var softmax_rows(Var a) {
  Tensor out = softmax_rows(a.value());
  Tensor y = out;
  return a.graph->record(std::move(out), {a}, [a, y = std::move(y)](Graph& g, const Tensor& dy) {
    Tensor* ga = g.grad_slot(a);
    if (!ga) return;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += dy(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) (*ga)(r, c) += y(r, c) * (dy(r, c) - dot);
    }
  });
}

inline Var l2_normalize_rows(Var a) {
  Tensor out = l2_normalize_rows(a.value());
  std::vector<double> inv_norm(out.rows());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double s = 0.0;
    for (double v : a.value().row(r)) s += v * v;
    inv_norm[r] = 1.0 / std::sqrt(s);
  }
  Tensor copy = out;
  return a.graph->record(std::move(out), {a},
                         [a, y = std::move(copy), inv_norm = std::move(inv_norm)](Graph& g, const Tensor& dy) {
                           Tensor* ga = g.grad_slot(a);
                           if (!ga) return;
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < y.cols(); ++c) dot += dy(r, c) * y(r, c);
                             for (std::size_t c = 0; c < y.cols(); ++c)
                               (*ga)(r, c) += (dy(r, c) - y(r, c) * dot) * inv_norm[r];
                           }
                         });
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise (x - mean) / sqrt(var + eps) * gain + bias; gain and bias have
// one entry per column.
inline Var layer_norm_rows(Var x, Var gain, Var bias, double eps = kLayerNormEps) {
  if (!(eps > 0.0)) throw ContractError("layer_norm_rows: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm_rows: gain/bias length must equal " + std::to_string(d));
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(n);
  Tensor out(xv.shape());
  const auto gv = gain.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xv(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xv(r, c) - mean) * (xv(r, c) - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (xv(r, c) - mean) * inv_std[r];
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  return x.graph->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, const Tensor& dy) {
        const std::size_t n = xhat.rows(), d = xhat.cols();
        if (Tensor* gg = g.grad_slot(gain))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gg)[c] += dy(r, c) * xhat(r, c);
        if (Tensor* gb = g.grad_slot(bias))
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) (*gb)[c] += dy(r, c);
        if (Tensor* gx = g.grad_slot(x)) {
          const auto gv = gain.value().data();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dxh = dy(r, c) * gv[c];
              m1 += dxh;
              m2 += dxh * xhat(r, c);
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t c = 0; c < d; ++c)
              (*gx)(r, c) += inv_std[r] * (dy(r, c) * gv[c] - m1 - xhat(r, c) * m2);
          }
        }
      });
}

// Sum of all entries as a 1-element tensor.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor({1}, s), {a}, [a](Graph& g, const Tensor& dy) {
    if (Tensor* ga = g.grad_slot(a))
      for (auto& v : ga->data()) v += dy[0];
  });
}

// x[r, :] + bias for every row.
inline Var add_bias(Var x, Var bias) {
  const std::size_t d = x.value().cols();
  if (bias.value().size() != d)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  Tensor out = x.value();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += bv[c];
  return x.graph->record(std::move(out), {x, bias}, [x, bias](Graph& g, const Tensor& dy) {
    detail::add_into(g.grad_slot(x), dy);
    if (Tensor* gb = g.grad_slot(bias)) {
      const std::size_t d = dy.cols();
      for (std::size_t r = 0; r < dy.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) (*gb)[c] += dy(r, c);
    }
  });
}

// x has groups of `tile.rows()` consecutive rows; tile is added to each group.
inline Var add_tiled(Var x, Var tile) {
  const Tensor& xv = x.value();
  const Tensor& tv = tile.value();
  if (tv.cols() != xv.cols() || xv.rows() % tv.rows() != 0)
    throw DimensionError("add_tiled: cannot tile " + shape_str(tv.shape()) + " over " + shape_str(xv.shape()));
  Tensor out = xv;
  const std::size_t period = tv.rows();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += tv(r % period, c);
  return x.graph->record(std::move(out), {x, tile}, [x, tile, period](Graph& g, const Tensor& dy) {
    detail::add_into(g.grad_slot(x), dy);
    if (Tensor* gt = g.grad_slot(tile))
      for (std::size_t r = 0; r < dy.rows(); ++r)
        for (std::size_t c = 0; c < dy.cols(); ++c) (*gt)(r % period, c) += dy(r, c);
  });
}

// Inserts `token` (1 x d) ahead of every group of `seq` rows.
inline Var prepend_token(Var x, Var token, std::size_t seq) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (token.value().size() != d || xv.rows() % seq != 0)
    throw DimensionError("prepend_token: incompatible shapes " + shape_str(xv.shape()) + " and " +
                         shape_str(token.shape()));
  const std::size_t batch = xv.rows() / seq;
  Tensor out = Tensor::matrix(batch * (seq + 1), d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < d; ++c) out(b * (seq + 1), c) = token.value()[c];
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t c = 0; c < d; ++c) out(b * (seq + 1) + 1 + t, c) = xv(b * seq + t, c);
  }
  return x.graph->record(std::move(out), {x, token}, [x, token, seq, batch](Graph& g, const Tensor& dy) {
    const std::size_t d = dy.cols();
    if (Tensor* gx = g.grad_slot(x))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq; ++t)
          for (std::size_t c = 0; c < d; ++c) (*gx)(b * seq + t, c) += dy(b * (seq + 1) + 1 + t, c);
    if (Tensor* gt = g.grad_slot(token))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < d; ++c) (*gt)[c] += dy(b * (seq + 1), c);
  });
}

// Mean over each group of `seq` consecutive rows -> (rows/seq) x d.
inline Var mean_pool(Var x, std::size_t seq) {
  const Tensor& xv = x.value();
  if (xv.rows() % seq != 0) throw DimensionError("mean_pool: rows not divisible by sequence length");
  const std::size_t batch = xv.rows() / seq, d = xv.cols();
  Tensor out = Tensor::matrix(batch, d);
  const double inv = 1.0 / static_cast<double>(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t c = 0; c < d; ++c) out(b, c) += xv(b * seq + t, c) * inv;
  return x.graph->record(std::move(out), {x}, [x, seq, inv](Graph& g, const Tensor& dy) {
    if (Tensor* gx = g.grad_slot(x))
      for (std::size_t r = 0; r < gx->rows(); ++r)
        for (std::size_t c = 0; c < gx->cols(); ++c) (*gx)(r, c) += dy(r / seq, c) * inv;
  });
}

// First row of each group of `seq` rows -> (rows/seq) x d.
inline Var take_first_of_group(Var x, std::size_t seq) {
  const Tensor& xv = x.value();
  if (xv.rows() % seq != 0) throw DimensionError("take_first_of_group: rows not divisible by sequence length");
  const std::size_t batch = xv.rows() / seq, d = xv.cols();
  Tensor out = Tensor::matrix(batch, d);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < d; ++c) out(b, c) = xv(b * seq, c);
  return x.graph->record(std::move(out), {x}, [x, seq](Graph& g, const Tensor& dy) {
    if (Tensor* gx = g.grad_slot(x))
      for (std::size_t b = 0; b < dy.rows(); ++b)
        for (std::size_t c = 0; c < dy.cols(); ++c) (*gx)(b * seq, c) += dy(b, c);
  });
}

// Multi-head scaled dot-product self-attention over groups of `seq` rows.
// qkv holds [Q | K | V] column blocks of width d each; heads split d evenly.
// If `weights` is non-null it receives the (batch*heads*seq) x seq
// attention probabilities.
inline Var multi_head_attention(Var qkv, std::size_t seq, std::size_t heads, Tensor* weights = nullptr) {
  using Strided = Eigen::Map<const detail::RowMat, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<detail::RowMat, 0, Eigen::OuterStride<>>;
  const Tensor& in = qkv.value();
  if (in.cols() % 3 != 0 || in.rows() % seq != 0)
    throw DimensionError("multi_head_attention: bad qkv shape " + shape_str(in.shape()));
  const std::size_t d = in.cols() / 3;
  if (d % heads != 0) throw DimensionError("multi_head_attention: width not divisible by heads");
  const std::size_t batch = in.rows() / seq, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto S = static_cast<Eigen::Index>(seq), Dh = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));

  Tensor probs = Tensor::matrix(batch * heads * seq, seq);
  Tensor out = Tensor::matrix(batch * seq, d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* base = in.data().data() + b * seq * 3 * d + h * dh;
      Strided q(base, S, Dh, in_stride), k(base + d, S, Dh, in_stride), v(base + 2 * d, S, Dh, in_stride);
      detail::MatMap p(probs.data().data() + (b * heads + h) * seq * seq, S, S);
      p.noalias() = (q * k.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < S; ++r) {
        const double m = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
      }
      StridedMut o(out.data().data() + b * seq * d + h * dh, S, Dh, out_stride);
      o.noalias() = p * v;
    }
  }
  if (weights) *weights = probs;
  return qkv.graph->record(
      std::move(out), {qkv},
      [qkv, seq, heads, batch, d, dh, inv_sqrt, probs = std::move(probs)](Graph& g, const Tensor& dy) {
        Tensor* gq = g.grad_slot(qkv);
        if (!gq) return;
        const Tensor& in = qkv.value();
        const auto S = static_cast<Eigen::Index>(seq), Dh = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
        const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));
        detail::RowMat dp(S, S), ds(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * 3 * d + h * dh;
            Strided q(in.data().data() + off, S, Dh, in_stride);
            Strided k(in.data().data() + off + d, S, Dh, in_stride);
            Strided v(in.data().data() + off + 2 * d, S, Dh, in_stride);
            StridedMut dq(gq->data().data() + off, S, Dh, in_stride);
            StridedMut dk(gq->data().data() + off + d, S, Dh, in_stride);
            StridedMut dv(gq->data().data() + off + 2 * d, S, Dh, in_stride);
            Strided dout(dy.data().data() + b * seq * d + h * dh, S, Dh, out_stride);
            detail::ConstMatMap p(probs.data().data() + (b * heads + h) * seq * seq, S, S);
            dv.noalias() += p.transpose() * dout;
            dp.noalias() = dout * v.transpose();
            for (Eigen::Index r = 0; r < S; ++r) {
              const double dot = dp.row(r).dot(p.row(r));
              ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
            }
            ds *= inv_sqrt;
            dq.noalias() += ds * k;
            dk.noalias() += ds.transpose() * q;
          }
        }
      });
}

// Attaches an externally computed scalar and its gradient w.r.t. `x`.
inline Var custom_scalar(Var x, double value, Tensor grad_x) {
  if (!grad_x.same_shape(x.value()))
    throw DimensionError("custom_scalar: gradient shape " + shape_str(grad_x.shape()) + " vs input " +
                         shape_str(x.shape()));
  return x.graph->record(Tensor({1}, value), {x}, [x, gx = std::move(grad_x)](Graph& g, const Tensor& dy) {
    detail::add_into(g.grad_slot(x), gx, dy[0]);
  });
}

}  // namespace lacvit
