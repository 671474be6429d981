#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "lacvit/autograd.hpp"
#include "lacvit/data.hpp"
#include "lacvit/error.hpp"
#include "lacvit/rng.hpp"

namespace lacvit {

enum class Pooling { kMean, kCls };

inline const char* pooling_name(Pooling p) { return p == Pooling::kMean ? "mean" : "cls"; }

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  Pooling pooling = Pooling::kMean;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  std::size_t seq_len() const { return num_patches() + (pooling == Pooling::kCls ? 1 : 0); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("vit: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
      throw ConfigError("vit: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                        std::to_string(heads));
    if (depth == 0 || mlp_ratio == 0) throw ConfigError("vit: depth and mlp_ratio must be positive");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

// Optional instrumentation collected during a forward pass.
struct ForwardTrace {
  std::vector<Tensor> attention;  // one (batch*heads*seq) x seq tensor per block
};

inline constexpr double kInitStd = 0.02;
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

// Fills a parameter from its own stream, keyed by name, so adding a
// parameter never shifts another one's values.
inline void init_truncated_normal(Parameter& p, std::uint64_t seed, double stddev = kInitStd) {
  RngStream rng(seed, stream_id(streams::kInit, fnv1a64(p.name)));
  for (double& v : p.value.data()) v = rng.truncated_normal(0.0, stddev);
}

inline void init_normal(Parameter& p, std::uint64_t seed, double stddev = kInitStd) {
  RngStream rng(seed, stream_id(streams::kInit, fnv1a64(p.name)));
  for (double& v : p.value.data()) v = rng.normal(0.0, stddev);
}

// Pre-norm Vision Transformer. All parameter names start with "encoder.".
class ViTEncoder {
 public:
  static constexpr const char* kPrefix = "encoder.";

  ViTEncoder() = default;

  // Allocates every parameter (zero-filled) for the given geometry.
  explicit ViTEncoder(const ViTConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.embed_dim, hidden = config_.mlp_ratio * d;
    params_.add(name("patch_proj"), Tensor::matrix(config_.patch_dim(), d));
    params_.add(name("pos_embed"), Tensor::matrix(config_.seq_len(), d));
    if (config_.pooling == Pooling::kCls) params_.add(name("cls_token"), Tensor::matrix(1, d));
    for (std::size_t b = 0; b < config_.depth; ++b) {
      params_.add(block(b, "ln1.gain"), Tensor({d}, 1.0));
      params_.add(block(b, "ln1.bias"), Tensor({d}));
      params_.add(block(b, "attn.qkv.weight"), Tensor::matrix(d, 3 * d));
      params_.add(block(b, "attn.qkv.bias"), Tensor({3 * d}));
      params_.add(block(b, "attn.out.weight"), Tensor::matrix(d, d));
      params_.add(block(b, "attn.out.bias"), Tensor({d}));
      params_.add(block(b, "ln2.gain"), Tensor({d}, 1.0));
      params_.add(block(b, "ln2.bias"), Tensor({d}));
      params_.add(block(b, "mlp.fc1.weight"), Tensor::matrix(d, hidden));
      params_.add(block(b, "mlp.fc1.bias"), Tensor({hidden}));
      params_.add(block(b, "mlp.fc2.weight"), Tensor::matrix(hidden, d));
      params_.add(block(b, "mlp.fc2.bias"), Tensor({d}));
    }
    params_.add(name("ln_final.gain"), Tensor({d}, 1.0));
    params_.add(name("ln_final.bias"), Tensor({d}));
  }

  // Weights ~ N(0, 0.02) truncated at 2 sigma; positional embeddings and
  // the cls token ~ N(0, 0.02); biases 0; layer-norm gains 1.
  static ViTEncoder init(const ViTConfig& config, std::uint64_t seed) {
    ViTEncoder enc(config);
    for (Parameter& p : enc.params_) {
      if (p.name.ends_with("weight") || p.name.ends_with("patch_proj"))
        init_truncated_normal(p, seed);
      else if (p.name.ends_with("pos_embed") || p.name.ends_with("cls_token"))
        init_normal(p, seed);
    }
    return enc;
  }

  const ViTConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  void freeze() { params_.set_trainable(false); }
  void unfreeze() { params_.set_trainable(true); }
  bool frozen() const {
    for (const auto& p : params_)
      if (p.trainable) return false;
    return true;
  }

  // patches: (batch * num_patches) x patch_dim, images stacked in order.
  // Returns batch x embed_dim pooled representations.
  Var forward(Graph& g, Var patches, ForwardTrace* trace = nullptr) {
    const Tensor& pv = patches.value();
    const std::size_t t = config_.num_patches();
    if (pv.cols() != config_.patch_dim() || pv.rows() % t != 0)
      throw ContractError("encoder: patch input " + shape_str(pv.shape()) + " does not match " +
                          std::to_string(t) + " patches of length " + std::to_string(config_.patch_dim()));
    const std::size_t seq = config_.seq_len();
    Var x = matmul(patches, p(g, "patch_proj"));
    if (config_.pooling == Pooling::kCls) x = prepend_token(x, p(g, "cls_token"), t);
    x = add_tiled(x, p(g, "pos_embed"));
    for (std::size_t b = 0; b < config_.depth; ++b) {
      Var h = layer_norm_rows(x, pb(g, b, "ln1.gain"), pb(g, b, "ln1.bias"));
      Var qkv = add_bias(matmul(h, pb(g, b, "attn.qkv.weight")), pb(g, b, "attn.qkv.bias"));
      Tensor* weights = nullptr;
      if (trace) weights = &trace->attention.emplace_back();
      Var att = multi_head_attention(qkv, seq, config_.heads, weights);
      x = add(x, add_bias(matmul(att, pb(g, b, "attn.out.weight")), pb(g, b, "attn.out.bias")));
      h = layer_norm_rows(x, pb(g, b, "ln2.gain"), pb(g, b, "ln2.bias"));
      h = relu(add_bias(matmul(h, pb(g, b, "mlp.fc1.weight")), pb(g, b, "mlp.fc1.bias")));
      x = add(x, add_bias(matmul(h, pb(g, b, "mlp.fc2.weight")), pb(g, b, "mlp.fc2.bias")));
    }
    x = layer_norm_rows(x, p(g, "ln_final.gain"), p(g, "ln_final.bias"));
    return config_.pooling == Pooling::kCls ? take_first_of_group(x, seq) : mean_pool(x, seq);
  }

  // Stacks patchified images into one (batch * T) x patch_dim tensor, with
  // pixels shifted and scaled from [0, 1] to roughly zero mean, unit spread.
  Tensor patch_batch(const std::vector<const Image*>& images) const {
    const std::size_t t = config_.num_patches(), pd = config_.patch_dim();
    Tensor out = Tensor::matrix(images.size() * t, pd);
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (images[i]->size != config_.image_size)
        throw ContractError("encoder: image size " + std::to_string(images[i]->size) + " != configured " +
                            std::to_string(config_.image_size));
      const Tensor pt = patchify(*images[i], config_.patch_size);
      std::transform(pt.data().begin(), pt.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * t * pd),
                     [](double v) { return (v - kPixelMean) / kPixelStd; });
    }
    return out;
  }

  // Inference helper: representations for a list of images, no gradients.
  Tensor embed(const std::vector<const Image*>& images, std::size_t chunk = 64) {
    Tensor out = Tensor::matrix(images.size(), config_.embed_dim);
    for (std::size_t start = 0; start < images.size(); start += chunk) {
      const std::size_t end = std::min(images.size(), start + chunk);
      std::vector<const Image*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                     images.begin() + static_cast<std::ptrdiff_t>(end));
      Graph g;
      g.set_grad_enabled(false);
      const Tensor h = forward(g, g.constant(patch_batch(part))).value();
      std::copy(h.data().begin(), h.data().end(),
                out.data().begin() + static_cast<std::ptrdiff_t>(start * config_.embed_dim));
    }
    return out;
  }

 private:
  static std::string name(const std::string& n) { return kPrefix + n; }
  static std::string block(std::size_t b, const std::string& n) {
    return std::string(kPrefix) + "blocks." + std::to_string(b) + "." + n;
  }
  Var p(Graph& g, const std::string& n) { return g.param(params_.get(name(n))); }
  Var pb(Graph& g, std::size_t b, const std::string& n) { return g.param(params_.get(block(b, n))); }

  ViTConfig config_;
  ParameterSet params_;
};

}  // namespace lacvit
