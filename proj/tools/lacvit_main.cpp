// lacvit: synthetic data, two-stage training, evaluation and embedding
// analyses from the command line.
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 data-format error,
// 4 numerical abort.

#include <malloc.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lacvit/analysis.hpp"
#include "lacvit/config.hpp"
#include "lacvit/trainer.hpp"

namespace fs = std::filesystem;
using namespace lacvit;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out_dir = ".";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("-c,--config", a.config_file, "Config file of 'section.key = value' lines");
  cmd->add_option("--set", a.overrides, "Override one key (key=value); repeatable");
  cmd->add_option("--seed", a.seed, "Shorthand for --set run.seed=N");
  cmd->add_option("--workers", a.workers, "Augmentation workers (capped by LACVIT_THREADS)");
  cmd->add_option("-o,--out", a.out_dir, "Output directory");
}

RunConfig resolve(const CommonArgs& a) {
  RunConfig c;
  if (!a.config_file.empty()) load_config_file(c, a.config_file);
  for (const auto& o : a.overrides) apply_override(c, o);
  if (a.seed) c.seed = *a.seed;
  if (a.workers) c.workers = *a.workers;
  if (const char* cap = std::getenv("LACVIT_THREADS")) {
    const auto n = static_cast<std::size_t>(std::strtoull(cap, nullptr, 10));
    if (n > 0) c.workers = std::min(c.workers, n);
  }
  c.workers = std::max<std::size_t>(c.workers, 1);
  c.validate();
  return c;
}

fs::path prepare_out(const CommonArgs& a, const RunConfig& c) {
  fs::path out(a.out_dir);
  fs::create_directories(out);
  write_text(out / "resolved_config.txt", "# config_hash=" + c.hash() + "\n" + c.resolved_text());
  return out;
}

CifarLayout layout(const RunConfig& c) { return c.data_format == "cifar100" ? CifarLayout::kCifar100 : CifarLayout::kCifar10; }

SyntheticSpec synth_spec(const RunConfig& c, Split split) {
  return {.num_classes = c.num_classes,
          .per_class = split == Split::kTrain ? c.synth_per_class : c.synth_val_per_class,
          .size = c.vit.image_size,
          .noise_sigma = c.synth_noise_sigma,
          .seed = c.seed,
          .split = split};
}

ImageDataset load_split(const RunConfig& c, Split split) {
  const std::string& path = split == Split::kTrain ? c.train_path : c.val_path;
  if (path.empty()) {
    if (!c.train_path.empty() || !c.val_path.empty())
      throw ConfigError(std::string("data.") + (split == Split::kTrain ? "train" : "val") + " is not set");
    return gen_synthetic(synth_spec(c, split));
  }
  return load_cifar_binary(path, c.num_classes, layout(c), c.vit.image_size, split);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val" || s == "validation") return Split::kValidation;
  throw ConfigError("--split must be train or val, got '" + s + "'");
}

void print_json(const nlohmann::ordered_json& j, const fs::path& path) {
  write_text(path, j.dump(2) + "\n");
  std::cout << j.dump() << "\n";
}

int cmd_synth(const CommonArgs& a) {
  RunConfig c = resolve(a);
  const fs::path out = prepare_out(a, c);
  for (Split s : {Split::kTrain, Split::kValidation}) {
    const auto ds = gen_synthetic(synth_spec(c, s));
    const fs::path p = out / (s == Split::kTrain ? "train.bin" : "val.bin");
    write_cifar_binary(ds, p, layout(c));
    std::printf("wrote %s (%zu records)\n", p.c_str(), ds.size());
  }
  return 0;
}

int cmd_train(const CommonArgs& a, const std::string& stage_name_arg, const std::string& from) {
  TrainStage stage;
  if (stage_name_arg == "contrastive") stage = TrainStage::kContrastive;
  else if (stage_name_arg == "head") stage = TrainStage::kHead;
  else if (stage_name_arg == "ce") stage = TrainStage::kCeBaseline;
  else throw ConfigError("--stage must be contrastive, head or ce");
  if (stage == TrainStage::kHead && from.empty()) throw ConfigError("train --stage head requires --from-checkpoint");
  if (stage != TrainStage::kHead && !from.empty())
    throw ConfigError("--from-checkpoint only applies to --stage head");

  RunConfig c = resolve(a);
  const fs::path out = prepare_out(a, c);
  const TrainConfig tc = c.train_config(stage);
  const ImageDataset train = load_split(c, Split::kTrain);
  std::optional<ImageDataset> val;
  if (stage != TrainStage::kContrastive) val = load_split(c, Split::kValidation);

  MetricsLog log(c.record_wall_clock);
  Model m;
  switch (stage) {
    case TrainStage::kContrastive: m = train_stage1(tc, train, log); break;
    case TrainStage::kHead: m = train_stage2(tc, load_checkpoint(from), train, &*val, log); break;
    default: m = train_ce_baseline(tc, train, &*val, log);
  }
  const fs::path ckpt = out / (std::string(stage_name(stage)) + ".ckpt");
  save_checkpoint(m, ckpt);
  log.write_csv(out / "metrics.csv");
  const auto& rows = log.rows();
  if (!rows.empty()) std::printf("final %s loss %.6f\n", rows.back().split.c_str(), rows.back().loss);
  std::printf("wrote %s\n", ckpt.c_str());
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& ckpt, const std::string& split_arg) {
  RunConfig c = resolve(a);
  Model m = load_checkpoint(ckpt);
  const Split split = parse_split(split_arg);
  const ImageDataset ds = load_split(c, split);
  const double acc = accuracy_top1(m, ds);
  const fs::path out = prepare_out(a, c);
  nlohmann::ordered_json j;
  j["analysis"] = "accuracy_top1";
  j["checkpoint"] = ckpt;
  j["config_hash"] = m.meta("config_hash");
  j["split"] = split_name(split);
  j["examples"] = ds.size();
  j["accuracy"] = acc;
  print_json(j, out / "accuracy.json");
  return 0;
}

struct AnalyzeArgs {
  std::string kind, checkpoint, rep = "h", split = "val";
  std::optional<int> class_a, class_b;
  std::size_t max_pairs = kMaxExactPairs;
};

int cmd_analyze(const CommonArgs& a, const AnalyzeArgs& x) {
  RunConfig c = resolve(a);
  Model m = load_checkpoint(x.checkpoint);
  if (x.rep != "h" && x.rep != "z") throw ConfigError("--rep must be h or z");
  const ImageDataset ds = load_split(c, parse_split(x.split));
  const EmbeddingSet v = extract_embeddings(m, ds, x.rep == "h" ? Representation::kH : Representation::kZ);
  const std::string hash = m.meta("config_hash");
  const fs::path out = prepare_out(a, c);
  const std::string stem = x.kind + "_" + x.rep;
  if (x.kind == "isotropy") {
    print_json(isotropy_json(isotropy_score(v), v.source, hash), out / (stem + ".json"));
  } else if (x.kind == "cosine") {
    if (x.class_a.has_value() != x.class_b.has_value()) throw ConfigError("give both --class-a and --class-b, or neither");
    const auto [ca, cb] = x.class_a ? std::pair{*x.class_a, *x.class_b} : pick_two_classes(v.num_classes, c.seed);
    const CosineReport r = cosine_report(v, ca, cb, c.seed, x.max_pairs);
    auto j = cosine_json(r, v.source, hash);
    j["separation"] = r.separation();
    print_json(j, out / (stem + ".json"));
    write_text(out / (stem + "_hist.csv"), cosine_histogram_csv(r, hash));
  } else if (x.kind == "project") {
    write_text(out / (stem + ".csv"), projection_csv(project_2d(v), v.labels, hash));
    std::printf("wrote %s\n", (out / (stem + ".csv")).c_str());
  } else {
    throw ConfigError("analyze: unknown analysis '" + x.kind + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates many short-lived tensors of the same sizes; keeping
  // freed blocks around instead of returning them to the OS halves step time.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"lacvit: label-aware contrastive training for small vision transformers"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, an_args;
  auto* synth = app.add_subcommand("synth-data", "Write the synthetic train/val sets as CIFAR-layout files");
  add_common(synth, synth_args);

  std::string stage, from;
  auto* train = app.add_subcommand("train", "Train one stage");
  add_common(train, train_args);
  train->add_option("--stage", stage, "contrastive | head | ce")->required();
  train->add_option("--from-checkpoint", from, "Stage-1 checkpoint (head stage only)");

  std::string eval_ckpt, eval_split = "val";
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a classifier checkpoint");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint with a classifier head")->required();
  eval->add_option("--split", eval_split, "train | val");

  AnalyzeArgs ax;
  auto* analyze = app.add_subcommand("analyze", "Embedding geometry reports");
  add_common(analyze, an_args);
  analyze->add_option("kind", ax.kind, "isotropy | cosine | project")->required();
  analyze->add_option("--checkpoint", ax.checkpoint, "Checkpoint to embed with")->required();
  analyze->add_option("--rep", ax.rep, "h (encoder) or z (projection)");
  analyze->add_option("--split", ax.split, "train | val");
  analyze->add_option("--class-a", ax.class_a, "First class for cosine");
  analyze->add_option("--class-b", ax.class_b, "Second class for cosine");
  analyze->add_option("--max-pairs", ax.max_pairs, "Exact enumeration limit before sampling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_args);
    if (*train) return cmd_train(train_args, stage, from);
    if (*eval) return cmd_eval(eval_args, eval_ckpt, eval_split);
    if (*analyze) return cmd_analyze(an_args, ax);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const NumericalAbort& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
