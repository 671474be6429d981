#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lacvit/error.hpp"
#include "lacvit/rng.hpp"
#include "lacvit/trainer.hpp"

namespace lacvit {

// Everything one command needs. Parsed from a flat "section.key = value" file;
// command-line --set overrides are applied on top, in order.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool record_wall_clock = true;

  // Optimiser, shared by all stages.
  double learning_rate = 0.01;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  bool cosine_schedule = false;

  std::size_t contrastive_epochs = 60;
  std::size_t contrastive_batch_size = 64;
  double tau = 0.1;
  LossKind loss_kind = LossKind::kSupCon;
  bool normalize_z = true;
  std::size_t projection_dim = 128;

  std::size_t head_epochs = 30;
  std::size_t head_batch_size = 64;

  // The baseline gets the same budget as stage one by default.
  std::size_t ce_epochs = 60;
  std::size_t ce_batch_size = 64;

  ViTConfig vit;
  AugmentationPolicy stage_one = AugmentationPolicy::stage_one();
  AugmentationPolicy stage_two = AugmentationPolicy::stage_two();

  // Data: CIFAR-layout files when paths are given, otherwise the synthetic set.
  std::string train_path, val_path;
  std::string data_format = "cifar10";
  int num_classes = 4;
  std::size_t synth_per_class = 100;
  std::size_t synth_val_per_class = 50;
  double synth_noise_sigma = 0.05;

  TrainConfig train_config(TrainStage stage) const {
    TrainConfig c;
    c.stage = stage;
    c.learning_rate = learning_rate;
    c.weight_decay = weight_decay;
    c.momentum = momentum;
    c.cosine_schedule = cosine_schedule;
    c.tau = tau;
    c.loss_kind = loss_kind;
    c.normalize_z = normalize_z;
    c.projection_dim = projection_dim;
    c.seed = seed;
    c.workers = workers;
    c.vit = vit;
    c.stage_one_policy = stage_one;
    c.stage_two_policy = stage_two;
    switch (stage) {
      case TrainStage::kContrastive:
        c.epochs = contrastive_epochs;
        c.batch_size = contrastive_batch_size;
        break;
      case TrainStage::kHead:
        c.epochs = head_epochs;
        c.batch_size = head_batch_size;
        break;
      default:
        c.epochs = ce_epochs;
        c.batch_size = ce_batch_size;
    }
    c.config_hash = hash();
    return c;
  }

  void validate() const {
    for (auto s : {TrainStage::kContrastive, TrainStage::kHead, TrainStage::kCeBaseline}) {
      TrainConfig c = train_config(s);
      c.config_hash.clear();
      c.validate();
    }
    if (data_format != "cifar10" && data_format != "cifar100")
      throw ConfigError("data.format must be cifar10 or cifar100, got '" + data_format + "'");
    const int max_classes = train_path.empty() ? 16 : 100;
    if (num_classes < 2 || num_classes > max_classes)
      throw ConfigError("data.num_classes must lie in [2, " + std::to_string(max_classes) + "], got " +
                        std::to_string(num_classes));
    if (synth_per_class == 0 || synth_val_per_class == 0) throw ConfigError("synth per-class counts must be >= 1");
    if (!(synth_noise_sigma >= 0.0)) throw ConfigError("synth.noise_sigma must be >= 0");
  }

  // "key = value" lines, sorted by key.
  std::string resolved_text() const;
  // Fingerprint over every key that can change results (worker count and the
  // wall-clock column cannot).
  std::string hash() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

struct ConfigField {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
ConfigField number_field(T RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<T>(k, v); },
          [m](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return fmt_double(c.*m);
            else return std::to_string(c.*m);
          }};
}

inline ConfigField bool_field(bool RunConfig::*m) {
  return {[m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_bool(k, v); },
          [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); }};
}

inline ConfigField string_field(std::string RunConfig::*m) {
  return {[m](RunConfig& c, const std::string&, const std::string& v) { c.*m = v; },
          [m](const RunConfig& c) { return c.*m; }};
}

// Accessor-based fields for nested structs.
template <typename T, typename Get>
ConfigField nested_number(Get access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_number<T>(k, v); },
          [access](const RunConfig& c) {
            const T& x = access(const_cast<RunConfig&>(c));
            if constexpr (std::is_floating_point_v<T>) return fmt_double(x);
            else return std::to_string(x);
          }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> f;
    f["run.seed"] = number_field(&RunConfig::seed);
    f["run.workers"] = number_field(&RunConfig::workers);
    f["run.record_wall_clock"] = bool_field(&RunConfig::record_wall_clock);
    f["optim.learning_rate"] = number_field(&RunConfig::learning_rate);
    f["optim.weight_decay"] = number_field(&RunConfig::weight_decay);
    f["optim.momentum"] = number_field(&RunConfig::momentum);
    f["optim.cosine_schedule"] = bool_field(&RunConfig::cosine_schedule);
    f["contrastive.epochs"] = number_field(&RunConfig::contrastive_epochs);
    f["contrastive.batch_size"] = number_field(&RunConfig::contrastive_batch_size);
    f["contrastive.tau"] = number_field(&RunConfig::tau);
    f["contrastive.normalize_z"] = bool_field(&RunConfig::normalize_z);
    f["contrastive.projection_dim"] = number_field(&RunConfig::projection_dim);
    f["contrastive.loss"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                               if (v == "supcon") c.loss_kind = LossKind::kSupCon;
                               else if (v == "ntxent") c.loss_kind = LossKind::kNtXent;
                               else if (v == "npair") c.loss_kind = LossKind::kNPair;
                               else throw ConfigError("config key '" + k + "': unknown loss '" + v + "'");
                             },
                             [](const RunConfig& c) { return std::string(loss_kind_name(c.loss_kind)); }};
    f["head.epochs"] = number_field(&RunConfig::head_epochs);
    f["head.batch_size"] = number_field(&RunConfig::head_batch_size);
    f["ce.epochs"] = number_field(&RunConfig::ce_epochs);
    f["ce.batch_size"] = number_field(&RunConfig::ce_batch_size);

    f["vit.image_size"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.image_size; });
    f["vit.patch_size"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.patch_size; });
    f["vit.embed_dim"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.embed_dim; });
    f["vit.depth"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.depth; });
    f["vit.heads"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.heads; });
    f["vit.mlp_ratio"] = nested_number<std::size_t>([](RunConfig& c) -> std::size_t& { return c.vit.mlp_ratio; });
    f["vit.pooling"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                          if (v == "mean") c.vit.pooling = Pooling::kMean;
                          else if (v == "cls") c.vit.pooling = Pooling::kCls;
                          else throw ConfigError("config key '" + k + "': pooling must be mean or cls");
                        },
                        [](const RunConfig& c) { return std::string(pooling_name(c.vit.pooling)); }};

    // Both augmentation sections expose the same geometric knobs; only stage
    // one has colour distortion and blur.
    for (const char* sec : {"augment1", "augment2"}) {
      const bool one = sec[7] == '1';
      auto pol = [one](RunConfig& c) -> AugmentationPolicy& { return one ? c.stage_one : c.stage_two; };
      const std::string s = sec;
      f[s + ".crop_scale_lo"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).crop_scale_lo; });
      f[s + ".crop_scale_hi"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).crop_scale_hi; });
      f[s + ".aspect_lo"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).aspect_lo; });
      f[s + ".aspect_hi"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).aspect_hi; });
      f[s + ".rotation_lo_deg"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).rotation_lo_deg; });
      f[s + ".rotation_hi_deg"] = nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).rotation_hi_deg; });
      f[s + ".hflip_probability"] =
          nested_number<double>([pol](RunConfig& c) -> double& { return pol(c).hflip_probability; });
      if (one) {
        f[s + ".color_jitter_strength"] =
            nested_number<double>([](RunConfig& c) -> double& { return c.stage_one.color_jitter_strength; });
        f[s + ".grayscale_probability"] =
            nested_number<double>([](RunConfig& c) -> double& { return c.stage_one.grayscale_probability; });
        f[s + ".blur_probability"] =
            nested_number<double>([](RunConfig& c) -> double& { return c.stage_one.blur_probability; });
      }
    }

    f["data.train"] = string_field(&RunConfig::train_path);
    f["data.val"] = string_field(&RunConfig::val_path);
    f["data.format"] = string_field(&RunConfig::data_format);
    f["data.num_classes"] = number_field(&RunConfig::num_classes);
    f["synth.per_class"] = number_field(&RunConfig::synth_per_class);
    f["synth.val_per_class"] = number_field(&RunConfig::synth_val_per_class);
    f["synth.noise_sigma"] = number_field(&RunConfig::synth_noise_sigma);
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::string RunConfig::resolved_text() const {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + " = " + f.get(*this) + "\n";
  return out;
}

inline std::string RunConfig::hash() const {
  std::string text;
  for (const auto& [k, f] : detail::config_fields())
    if (k != "run.workers" && k != "run.record_wall_clock") text += k + " = " + f.get(*this) + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

// One "key = value" assignment; unknown keys are errors.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(c, key, value);
}

// "key=value" as given on the command line.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  apply_setting(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "<config>") {
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string key = eq == std::string::npos ? line : detail::trim(line.substr(0, eq));
    if (eq == std::string::npos || key.find('.') == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'section.key = value'");
    try {
      apply_setting(c, key, detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void load_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str(), path.string());
}

}  // namespace lacvit
