#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lacvit/analysis.hpp"
#include "lacvit/augment.hpp"
#include "lacvit/checkpoint.hpp"
#include "lacvit/data.hpp"
#include "lacvit/error.hpp"
#include "lacvit/losses.hpp"
#include "lacvit/sgd.hpp"

namespace lacvit {

enum class TrainStage { kContrastive, kHead, kCeBaseline };

inline const char* stage_name(TrainStage s) {
  switch (s) {
    case TrainStage::kContrastive: return "contrastive";
    case TrainStage::kHead: return "head";
    default: return "ce";
  }
}

struct TrainConfig {
  TrainStage stage = TrainStage::kContrastive;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  bool cosine_schedule = false;
  double tau = 0.1;
  LossKind loss_kind = LossKind::kSupCon;
  bool normalize_z = true;
  std::size_t projection_dim = 128;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  ViTConfig vit;
  AugmentationPolicy stage_one_policy = AugmentationPolicy::stage_one();
  AugmentationPolicy stage_two_policy = AugmentationPolicy::stage_two();
  // Fingerprint of the resolved run configuration; recorded in checkpoints.
  std::string config_hash;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (stage == TrainStage::kContrastive && batch_size < 2)
      throw ConfigError("contrastive training needs batch_size >= 2");
    if (projection_dim == 0) throw ConfigError("projection_dim must be >= 1");
    vit.validate();
    stage_one_policy.validate();
    stage_two_policy.validate();
    if (stage_one_policy.stage != PolicyStage::kOne || stage_two_policy.stage != PolicyStage::kTwo)
      throw ConfigError("augmentation policies are attached to the wrong stages");
  }
};

// One row per (epoch, split): epoch,split,loss,accuracy,wall_clock_seconds.
struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> accuracy;
  double seconds = 0.0;
};

class MetricsLog {
 public:
  // With record_wall_clock off the time column is written as 0 so that logs
  // of identical runs compare byte-for-byte.
  explicit MetricsLog(bool record_wall_clock = true)
      : record_wall_clock_(record_wall_clock), start_(std::chrono::steady_clock::now()) {}

  void add(std::size_t epoch, const std::string& split, double loss, std::optional<double> accuracy) {
    const double secs = record_wall_clock_
                            ? std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()
                            : 0.0;
    rows_.push_back({epoch, split, loss, accuracy, secs});
  }

  const std::vector<MetricsRow>& rows() const { return rows_; }

  std::vector<double> losses(const std::string& split) const {
    std::vector<double> out;
    for (const auto& r : rows_)
      if (r.split == split) out.push_back(r.loss);
    return out;
  }

  std::string csv() const {
    std::string out = "epoch,split,loss,accuracy,wall_clock_seconds\n";
    char buf[160];
    for (const auto& r : rows_) {
      char acc[32] = "";
      if (r.accuracy) std::snprintf(acc, sizeof acc, "%.6f", *r.accuracy);
      std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%s,%.3f\n", r.epoch, r.split.c_str(), r.loss, acc, r.seconds);
      out += buf;
    }
    return out;
  }

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot write metrics log " + path.string());
    out << csv();
  }

 private:
  bool record_wall_clock_;
  std::chrono::steady_clock::time_point start_;
  std::vector<MetricsRow> rows_;
};

// Training callback for each optimizer step; used by tests to observe the
// model mid-run.
using StepHook = std::function<void(std::size_t epoch, std::size_t step, const Model&)>;

namespace detail {

inline std::uint64_t init_seed(std::uint64_t seed, const char* part) { return stream_id(streams::kInit, seed, fnv1a64(part)); }

inline void stamp_metadata(Model& m, const TrainConfig& cfg, int num_classes, std::size_t epoch) {
  write_vit_metadata(m.encoder.config(), m.metadata);
  m.metadata["stage"] = stage_name(cfg.stage);
  m.metadata["epoch"] = std::to_string(epoch);
  m.metadata["num_classes"] = std::to_string(num_classes);
  m.metadata["config_hash"] = cfg.config_hash;
  m.metadata["seed"] = std::to_string(cfg.seed);
  if (cfg.stage == TrainStage::kContrastive) {
    m.metadata["loss_kind"] = loss_kind_name(cfg.loss_kind);
    m.metadata["normalize_z"] = cfg.normalize_z ? "true" : "false";
  }
}

inline void check_finite(double loss, std::size_t epoch, std::size_t batch, const char* kind) {
  if (!std::isfinite(loss))
    throw NumericalAbort("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                         ", batch " + std::to_string(batch) + " (loss kind " + kind + ")");
}

inline std::vector<const Image*> image_ptrs(const std::vector<Image>& v) {
  std::vector<const Image*> out;
  for (const auto& i : v) out.push_back(&i);
  return out;
}

inline void check_geometry(const ImageDataset& ds, const ViTConfig& vit) {
  ds.validate();
  if (ds.image_size() != vit.image_size)
    throw ConfigError("dataset image size " + std::to_string(ds.image_size()) + " != vit.image_size " +
                      std::to_string(vit.image_size));
}

// Validation loss/accuracy with an un-augmented forward pass.
inline void log_validation(Model& m, const ImageDataset* val, std::size_t epoch, MetricsLog& log) {
  if (!val) return;
  const Tensor logits = predict_logits(m, *val);
  log.add(epoch, "validation", cross_entropy(logits, val->labels()).scalar, accuracy_top1(logits, val->labels()));
}

}  // namespace detail

// Stage 1: label-aware (or baseline) contrastive training of encoder and
// projection head on two augmented views per image.
inline Model train_stage1(TrainConfig cfg, const ImageDataset& train, MetricsLog& log,
                          const StepHook& hook = nullptr) {
  cfg.stage = TrainStage::kContrastive;
  cfg.validate();
  detail::check_geometry(train, cfg.vit);
  Model m;
  m.encoder = ViTEncoder::init(cfg.vit, detail::init_seed(cfg.seed, "encoder"));
  m.projection = ProjectionHead::init(cfg.vit.embed_dim, cfg.vit.embed_dim, cfg.projection_dim,
                                      detail::init_seed(cfg.seed, "projection"));
  const bool normalize = cfg.loss_kind != LossKind::kNPair && cfg.normalize_z;
  SgdState opt;
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle = epoch_shuffle_stream(cfg.seed, epoch);
    const auto batches = make_batches(train.size(), cfg.batch_size, shuffle, true);
    double loss_sum = 0.0;
    std::size_t anchors = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi, ++step) {
      const auto& idx = batches[bi].indices;
      // N-pair needs two distinct images; a trailing singleton batch is skipped.
      if (cfg.loss_kind == LossKind::kNPair && idx.size() < 2) continue;
      const auto pairs = augment_pairs(train, idx, cfg.stage_one_policy, cfg.seed, epoch, cfg.workers);
      std::vector<const Image*> views;
      std::vector<int> labels;
      for (const auto& p : pairs) views.push_back(&p.view_a), labels.push_back(p.label);
      for (const auto& p : pairs) views.push_back(&p.view_b);
      Graph g;
      Var h = m.encoder.forward(g, g.constant(m.encoder.patch_batch(views)));
      Var z = m.projection->forward(g, h, normalize);
      ContrastiveBatch cb = ContrastiveBatch::from_pairs(Tensor(z.value()), labels);
      LossValue report;
      Var loss = contrastive_loss(z, cb.labels, cb.view_source, cfg.loss_kind, cfg.tau, &report);
      detail::check_finite(report.scalar, epoch, bi, loss_kind_name(cfg.loss_kind));
      // The loss is a sum over anchors; step on the per-anchor mean so the
      // step size does not scale with batch size.
      g.backward(scale(loss, 1.0 / static_cast<double>(report.per_anchor.size())));
      sgd_step(m.parameters(), opt,
               learning_rate_at(cfg.learning_rate, cfg.cosine_schedule, step, cfg.epochs * steps_per_epoch),
               cfg.weight_decay, cfg.momentum);
      loss_sum += report.scalar;
      anchors += report.per_anchor.size();
      if (hook) hook(epoch, step, m);
    }
    log.add(epoch + 1, "train", anchors ? loss_sum / static_cast<double>(anchors) : 0.0, std::nullopt);
  }
  detail::stamp_metadata(m, cfg, train.num_classes, cfg.epochs);
  return m;
}

namespace detail {

// Shared loop for the head stage and the CE baseline. When `train_encoder`
// is false the encoder runs without gradients and only the head is updated.
inline void train_classifier(Model& m, const TrainConfig& cfg, const ImageDataset& train, const ImageDataset* val,
                             MetricsLog& log, bool train_encoder, const StepHook& hook) {
  SgdState opt;
  const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream shuffle = epoch_shuffle_stream(cfg.seed, epoch);
    const auto batches = make_batches(train.size(), cfg.batch_size, shuffle, false);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi, ++step) {
      const auto& idx = batches[bi].indices;
      const auto views = augment_single(train, idx, cfg.stage_two_policy, cfg.seed, epoch, cfg.workers);
      std::vector<int> labels;
      for (std::size_t i : idx) labels.push_back(train.examples[i].label);
      Graph g;
      Var h = train_encoder ? m.encoder.forward(g, g.constant(m.encoder.patch_batch(image_ptrs(views))))
                            : g.constant(m.encoder.embed(image_ptrs(views)));
      Var logits = m.classifier->forward(g, h);
      LossValue report;
      Var loss = cross_entropy(logits, labels, &report);
      check_finite(report.scalar, epoch, bi, "cross_entropy");
      g.backward(loss);
      sgd_step(m.parameters(), opt,
               learning_rate_at(cfg.learning_rate, cfg.cosine_schedule, step, cfg.epochs * steps_per_epoch),
               cfg.weight_decay, cfg.momentum);
      loss_sum += report.scalar * static_cast<double>(idx.size());
      correct += static_cast<std::size_t>(accuracy_top1(logits.value(), labels) * static_cast<double>(idx.size()) + 0.5);
      seen += idx.size();
      if (hook) hook(epoch, step, m);
    }
    log.add(epoch + 1, "train", loss_sum / static_cast<double>(seen),
            static_cast<double>(correct) / static_cast<double>(seen));
    log_validation(m, val, epoch + 1, log);
  }
}

}  // namespace detail

// Stage 2: frozen encoder from stage 1, projection head discarded, a fresh
// linear head trained with cross-entropy on single stage-two views.
inline Model train_stage2(TrainConfig cfg, const Model& stage1, const ImageDataset& train,
                          const ImageDataset* val, MetricsLog& log, const StepHook& hook = nullptr) {
  cfg.stage = TrainStage::kHead;
  cfg.validate();
  const std::string declared = stage1.meta("num_classes");
  if (declared.empty() || std::stoi(declared) != train.num_classes)
    throw ConfigError("class count mismatch: checkpoint declares '" + declared + "', dataset has " +
                      std::to_string(train.num_classes));
  if (val && val->num_classes != train.num_classes) throw ConfigError("validation class count differs from train");
  cfg.vit = stage1.encoder.config();
  detail::check_geometry(train, cfg.vit);
  Model m;
  m.encoder = stage1.encoder;
  m.encoder.freeze();
  m.classifier = LinearHead::init(cfg.vit.embed_dim, static_cast<std::size_t>(train.num_classes),
                                  detail::init_seed(cfg.seed, "classifier"));
  m.metadata["source_config_hash"] = stage1.meta("config_hash");
  detail::train_classifier(m, cfg, train, val, log, false, hook);
  detail::stamp_metadata(m, cfg, train.num_classes, cfg.epochs);
  return m;
}

// Cross-entropy baseline: encoder and linear head trained jointly, nothing
// frozen.
inline Model train_ce_baseline(TrainConfig cfg, const ImageDataset& train, const ImageDataset* val,
                               MetricsLog& log, const StepHook& hook = nullptr) {
  cfg.stage = TrainStage::kCeBaseline;
  cfg.validate();
  detail::check_geometry(train, cfg.vit);
  if (val && val->num_classes != train.num_classes) throw ConfigError("validation class count differs from train");
  Model m;
  m.encoder = ViTEncoder::init(cfg.vit, detail::init_seed(cfg.seed, "encoder"));
  m.classifier = LinearHead::init(cfg.vit.embed_dim, static_cast<std::size_t>(train.num_classes),
                                  detail::init_seed(cfg.seed, "classifier"));
  detail::train_classifier(m, cfg, train, val, log, true, hook);
  detail::stamp_metadata(m, cfg, train.num_classes, cfg.epochs);
  return m;
}

}  // namespace lacvit
