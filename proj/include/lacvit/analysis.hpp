#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "lacvit/checkpoint.hpp"
#include "lacvit/data.hpp"
#include "lacvit/error.hpp"
#include "lacvit/linalg.hpp"
#include "lacvit/rng.hpp"

namespace lacvit {

// ---------------------------------------------------------------------------
// Accuracy.

// Row-wise argmax; the lowest index wins ties.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy_top1(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rows() != labels.size())
    throw DimensionError("accuracy: " + std::to_string(logits.rows()) + " logit rows vs " +
                         std::to_string(labels.size()) + " labels");
  if (labels.empty()) return 0.0;
  const auto pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline std::vector<const Image*> dataset_images(const ImageDataset& ds) {
  std::vector<const Image*> out;
  out.reserve(ds.size());
  for (const auto& e : ds.examples) out.push_back(&e);
  return out;
}

// Un-augmented logits for every example, in dataset order.
inline Tensor predict_logits(Model& m, const ImageDataset& ds) {
  if (!m.classifier) throw ContractError("predict: model has no classifier head");
  if (m.classifier->num_classes() != static_cast<std::size_t>(ds.num_classes))
    throw ConfigError("predict: classifier has " + std::to_string(m.classifier->num_classes()) +
                      " classes, dataset " + std::to_string(ds.num_classes));
  Graph g;
  g.set_grad_enabled(false);
  return m.classifier->forward(g, g.constant(m.encoder.embed(dataset_images(ds)))).value();
}

inline double accuracy_top1(Model& m, const ImageDataset& ds) { return accuracy_top1(predict_logits(m, ds), ds.labels()); }

// ---------------------------------------------------------------------------
// Embeddings.

enum class Representation { kH, kZ };

inline const char* representation_name(Representation r) { return r == Representation::kH ? "h" : "z"; }

struct EmbeddingSet {
  Tensor vectors;  // N x d
  std::vector<int> labels;
  int num_classes = 0;
  std::string source;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return vectors.cols(); }

  void validate() const {
    if (vectors.rank() != 2 || vectors.rows() != labels.size())
      throw DimensionError("embedding set: " + shape_str(vectors.shape()) + " vectors vs " +
                           std::to_string(labels.size()) + " labels");
    if (labels.size() < 2) throw ContractError("embedding set needs at least 2 vectors");
    for (int l : labels)
      if (l < 0 || l >= num_classes) throw ContractError("embedding set: label " + std::to_string(l) + " out of range");
  }
};

// Deterministic forward pass over the dataset, no augmentation. z is only
// available while the projection head is still attached.
inline EmbeddingSet extract_embeddings(Model& m, const ImageDataset& ds, Representation which) {
  if (which == Representation::kZ && !m.projection)
    throw ContractError("extract_embeddings: z requested but the checkpoint has no projection head");
  if (ds.image_size() != m.encoder.config().image_size)
    throw ConfigError("extract_embeddings: dataset image size " + std::to_string(ds.image_size()) +
                      " does not match the encoder (" + std::to_string(m.encoder.config().image_size) + ")");
  EmbeddingSet out;
  out.vectors = m.encoder.embed(dataset_images(ds));
  if (which == Representation::kZ) {
    Graph g;
    g.set_grad_enabled(false);
    const bool normalize = m.meta("normalize_z", "true") == "true" && m.meta("loss_kind") != "npair";
    out.vectors = m.projection->forward(g, g.constant(out.vectors), normalize).value();
  }
  out.labels = ds.labels();
  out.num_classes = ds.num_classes;
  out.source = "stage=" + m.meta("stage", "unknown") + " rep=" + representation_name(which) + " split=" +
               split_name(ds.split) + " n=" + std::to_string(ds.size());
  return out;
}

// ---------------------------------------------------------------------------
// Isotropy: IS(V) = min_c F(c) / max_c F(c), F(c) = sum_i exp(c . v_i), with
// c ranging over {+u_k, -u_k} for the eigenvectors u_k of V^T V.

struct IsotropyReport {
  double score = 0.0;
  std::vector<double> f_values;  // candidate order: +u_1, -u_1, +u_2, -u_2, ...
  std::size_t candidate_count = 0;
  std::string warning;
};

inline IsotropyReport isotropy_score(const Tensor& v) {
  if (v.rank() != 2) throw DimensionError("isotropy: expected a matrix, got " + shape_str(v.shape()));
  const std::size_t n = v.rows(), d = v.cols();
  bool nonzero = false;
  for (double x : v.data()) nonzero |= x != 0.0;
  if (!nonzero) throw DegenerateInputError("isotropy: all vectors are zero");
  IsotropyReport r;
  if (n < d)
    r.warning = "N=" + std::to_string(n) + " < d=" + std::to_string(d) + ": V^T V is rank-deficient";
  // Every sum below runs over sorted terms, so permuting the rows of V
  // reproduces the score bit for bit.
  auto sorted_sum = [](std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
  };
  std::vector<double> terms(n);
  Tensor gram = Tensor::matrix(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      for (std::size_t i = 0; i < n; ++i) terms[i] = v(i, a) * v(i, b);
      gram(a, b) = gram(b, a) = sorted_sum(terms);
    }
  const SymEigResult eig = sym_eig(gram);
  // log F via log-sum-exp so large unnormalised embeddings cannot overflow.
  std::vector<double> log_f;
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<double> proj(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += eig.eigenvectors(c, k) * v(i, c);
      proj[i] = s;
    }
    for (double sign : {1.0, -1.0}) {
      double mx = -std::numeric_limits<double>::infinity();
      for (double p : proj) mx = std::max(mx, sign * p);
      for (std::size_t i = 0; i < n; ++i) terms[i] = std::exp(sign * proj[i] - mx);
      log_f.push_back(mx + std::log(sorted_sum(terms)));
    }
  }
  const auto [lo, hi] = std::minmax_element(log_f.begin(), log_f.end());
  r.score = std::exp(*lo - *hi);
  for (double l : log_f) r.f_values.push_back(std::exp(l));
  r.candidate_count = log_f.size();
  return r;
}

inline IsotropyReport isotropy_score(const EmbeddingSet& v) {
  v.validate();
  return isotropy_score(v.vectors);
}

// ---------------------------------------------------------------------------
// Cosine-pair analysis over two classes.

inline constexpr std::size_t kHistogramBins = 50;
inline constexpr std::size_t kMaxExactPairs = 1000000;

struct CosineReport {
  int class_a = 0, class_b = 0;
  double positive_mean = 0.0, negative_mean = 0.0;
  std::size_t positive_pairs = 0, negative_pairs = 0;  // pairs that exist
  bool sampled = false;                                // true if either side was reservoir-sampled
  std::vector<std::size_t> positive_hist, negative_hist;

  double separation() const { return positive_mean - negative_mean; }
};

inline std::size_t histogram_bin(double c) {
  const double t = (std::clamp(c, -1.0, 1.0) + 1.0) / 2.0 * static_cast<double>(kHistogramBins);
  return std::min(kHistogramBins - 1, static_cast<std::size_t>(t));
}

namespace detail {

// Collects f(pair) for pair index 0..total-1, or a uniform reservoir sample of
// `cap` of them when total exceeds cap.
template <typename F>
std::vector<double> collect_pairs(std::size_t total, std::size_t cap, RngStream& rng, F&& f) {
  std::vector<double> out;
  if (total <= cap) {
    out.reserve(total);
    for (std::size_t k = 0; k < total; ++k) out.push_back(f(k));
    return out;
  }
  out.reserve(cap);
  for (std::size_t k = 0; k < total; ++k) {
    if (k < cap) {
      out.push_back(f(k));
    } else {
      const std::uint64_t j = rng.below(k + 1);
      if (j < cap) out[j] = f(k);
    }
  }
  return out;
}

inline std::pair<std::size_t, std::size_t> unrank_pair(std::size_t k) {
  // k-th unordered pair (i < j) in the order (0,1), (0,2), (1,2), (0,3), ...
  std::size_t j = static_cast<std::size_t>((1.0 + std::sqrt(1.0 + 8.0 * static_cast<double>(k))) / 2.0);
  while (j * (j - 1) / 2 > k) --j;
  while ((j + 1) * j / 2 <= k) ++j;
  return {k - j * (j - 1) / 2, j};
}

}  // namespace detail

inline CosineReport cosine_report(const EmbeddingSet& v, int class_a, int class_b, std::uint64_t seed = 0,
                                  std::size_t max_pairs = kMaxExactPairs) {
  v.validate();
  if (class_a == class_b) throw ContractError("cosine_report: the two classes must differ");
  std::vector<std::size_t> ia, ib;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.labels[i] == class_a) ia.push_back(i);
    if (v.labels[i] == class_b) ib.push_back(i);
  }
  for (auto [c, n] : {std::pair{class_a, ia.size()}, std::pair{class_b, ib.size()}})
    if (n < 2)
      throw ContractError("cosine_report: class " + std::to_string(c) + " has " + std::to_string(n) +
                          " members (need >= 2)");
  const std::size_t d = v.dim();
  std::vector<double> norm(v.size(), 0.0);
  for (const auto* idx : {&ia, &ib})
    for (std::size_t i : *idx) {
      for (std::size_t c = 0; c < d; ++c) norm[i] += v.vectors(i, c) * v.vectors(i, c);
      norm[i] = std::sqrt(norm[i]);
      if (norm[i] == 0.0) throw DegenerateInputError("cosine_report: zero vector at row " + std::to_string(i));
    }
  auto cosine = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += v.vectors(i, c) * v.vectors(j, c);
    return s / (norm[i] * norm[j]);
  };

  const std::size_t pa = ia.size() * (ia.size() - 1) / 2, pb = ib.size() * (ib.size() - 1) / 2;
  CosineReport r;
  r.class_a = class_a;
  r.class_b = class_b;
  r.positive_pairs = pa + pb;
  r.negative_pairs = ia.size() * ib.size();
  r.sampled = r.positive_pairs > max_pairs || r.negative_pairs > max_pairs;
  RngStream rng(seed, stream_id(streams::kAnalysis, static_cast<std::uint64_t>(class_a),
                                static_cast<std::uint64_t>(class_b)));
  RngStream pos_rng = rng.derive(1), neg_rng = rng.derive(2);
  const auto pos = detail::collect_pairs(r.positive_pairs, max_pairs, pos_rng, [&](std::size_t k) {
    const auto& idx = k < pa ? ia : ib;
    const auto [i, j] = detail::unrank_pair(k < pa ? k : k - pa);
    return cosine(idx[i], idx[j]);
  });
  const auto neg = detail::collect_pairs(r.negative_pairs, max_pairs, neg_rng, [&](std::size_t k) {
    return cosine(ia[k / ib.size()], ib[k % ib.size()]);
  });
  r.positive_hist.assign(kHistogramBins, 0);
  r.negative_hist.assign(kHistogramBins, 0);
  for (double c : pos) r.positive_mean += c, ++r.positive_hist[histogram_bin(c)];
  for (double c : neg) r.negative_mean += c, ++r.negative_hist[histogram_bin(c)];
  r.positive_mean /= static_cast<double>(pos.size());
  r.negative_mean /= static_cast<double>(neg.size());
  return r;
}

// Seeded stand-in for "two random classes".
inline std::pair<int, int> pick_two_classes(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ContractError("pick_two_classes: need at least 2 classes");
  RngStream rng(seed, stream_id(streams::kAnalysis, fnv1a64("pick_two_classes")));
  const int a = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes)));
  int b = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
  if (b >= a) ++b;
  return {std::min(a, b), std::max(a, b)};
}

// Mean over all class pairs of (positive mean - negative mean).
inline double mean_separation(const EmbeddingSet& v, std::uint64_t seed = 0) {
  double total = 0.0;
  int pairs = 0;
  for (int a = 0; a < v.num_classes; ++a)
    for (int b = a + 1; b < v.num_classes; ++b) {
      total += cosine_report(v, a, b, seed).separation();
      ++pairs;
    }
  if (pairs == 0) throw ContractError("mean_separation: need at least 2 classes");
  return total / pairs;
}

// ---------------------------------------------------------------------------
// 2-D projection.

inline Tensor project_2d(const EmbeddingSet& v) {
  v.validate();
  if (v.size() < 3) throw ContractError("project_2d: need at least 3 vectors");
  return pca_project(v.vectors, 2);
}

// ---------------------------------------------------------------------------
// Report writers. JSON for scalars, CSV for histograms and coordinates.

inline nlohmann::ordered_json isotropy_json(const IsotropyReport& r, const std::string& source,
                                            const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["analysis"] = "isotropy";
  j["source"] = source;
  j["config_hash"] = config_hash;
  j["score"] = r.score;
  j["candidate_count"] = r.candidate_count;
  j["f_values"] = r.f_values;
  if (!r.warning.empty()) j["warning"] = r.warning;
  return j;
}

inline nlohmann::ordered_json cosine_json(const CosineReport& r, const std::string& source,
                                          const std::string& config_hash) {
  nlohmann::ordered_json j;
  j["analysis"] = "cosine";
  j["source"] = source;
  j["config_hash"] = config_hash;
  j["class_a"] = r.class_a;
  j["class_b"] = r.class_b;
  j["positive_mean"] = r.positive_mean;
  j["negative_mean"] = r.negative_mean;
  j["positive_pairs"] = r.positive_pairs;
  j["negative_pairs"] = r.negative_pairs;
  j["sampled"] = r.sampled;
  return j;
}

// bin,lower,upper,positive_count,negative_count
inline std::string cosine_histogram_csv(const CosineReport& r, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\nbin,lower,upper,positive_count,negative_count\n";
  char buf[128];
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    const double lo = -1.0 + 2.0 * static_cast<double>(b) / kHistogramBins;
    const double hi = -1.0 + 2.0 * static_cast<double>(b + 1) / kHistogramBins;
    std::snprintf(buf, sizeof buf, "%zu,%.2f,%.2f,%zu,%zu\n", b, lo, hi, r.positive_hist[b], r.negative_hist[b]);
    out += buf;
  }
  return out;
}

// index,label,x,y
inline std::string projection_csv(const Tensor& coords, const std::vector<int>& labels, const std::string& config_hash) {
  std::string out = "# config_hash=" + config_hash + "\nindex,label,x,y\n";
  char buf[128];
  for (std::size_t i = 0; i < coords.rows(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%d,%.10g,%.10g\n", i, labels[i], coords(i, 0), coords(i, 1));
    out += buf;
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

}  // namespace lacvit
