#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "alps/errors.hpp"
#include "alps/metrics.hpp"
#include "alps/selection.hpp"
#include "alps/sweep.hpp"
#include "alps/trainer.hpp"

namespace fs = std::filesystem;
using namespace alps;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
}

void write_json(const nlohmann::json& j, const fs::path& path) { write_file_atomic(path, j.dump(2) + "\n"); }

ScoreReport read_report(const fs::path& path) { return report_from_json(read_json(path)); }

struct ScoreArgs {
  std::string base, task, metric = "pad", domain, out;
  double tau = 1.0;
};

void cmd_score(const ScoreArgs& a) {
  ScoreOptions opt;
  opt.metric = parse_metric(a.metric);
  opt.tau = a.tau;
  if (!a.domain.empty()) opt.domain = parse_domain(a.domain);
  const auto report = score_all_heads(read_checkpoint(a.base), read_checkpoint(a.task), opt);
  write_json(report_to_json(report), a.out);
}

struct SelectArgs {
  std::string scores, model, strategy = "topk", out;
  double ratio = 0.1;
  std::optional<std::uint64_t> seed;
};

void cmd_select(const SelectArgs& a) {
  const Strategy strategy = parse_strategy(a.strategy);
  std::optional<ScoreReport> report;
  if (!a.scores.empty()) report = read_report(a.scores);
  ModelGeometry geometry;
  if (report) {
    geometry = report->geometry;
  } else if (!a.model.empty()) {
    geometry = checkpoint_geometry(read_checkpoint(a.model));
  } else {
    throw ValueError("select needs --scores (or --model for random/lc)");
  }
  if (strategy != Strategy::TopK && !a.seed) throw ValueError("--strategy " + a.strategy + " needs --seed");
  const auto mask = make_mask(strategy, a.ratio, a.seed.value_or(0), geometry, report ? &*report : nullptr);
  write_json(mask_to_json(mask), a.out);
}

struct TrainArgs {
  std::string config, mask, freeze, init, out, log;
};

void cmd_train(const TrainArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (!a.init.empty()) cfg.init_checkpoint = a.init;
  if (!a.mask.empty()) cfg.mask_path = a.mask;
  if (!a.freeze.empty()) {
    cfg.freeze = parse_freeze(a.freeze);
  } else if (!a.mask.empty()) {
    cfg.freeze = FreezeMode::Mask;
  }
  cfg.validate();
  std::optional<HeadMask> mask;
  if (cfg.freeze == FreezeMode::Mask) {
    if (!cfg.mask_path) throw ValueError("--freeze mask needs --mask or a \"mask\" entry in the config");
    fs::path mp = *cfg.mask_path;
    if (a.mask.empty() && mp.is_relative()) mp = fs::path(a.config).parent_path() / mp;
    mask = mask_from_json(read_json(mp));
  }
  const auto init = initial_model(cfg);
  const auto result = train(init, cfg, mask ? &*mask : nullptr);
  const fs::path out = a.out;
  const fs::path log = a.log.empty() ? fs::path(out).replace_extension(".log.jsonl") : fs::path(a.log);
  write_file_atomic(log, log_to_jsonl(result.log));
  save_model(result.model, out);
}

struct SweepArgs {
  std::string config, base, scores, out_dir;
  std::vector<double> ratios{0.1};
  std::vector<std::string> strategies{"topk", "random"};
  std::vector<std::uint64_t> seeds{0};
};

fs::path cmd_sweep(const SweepArgs& a) {
  TrainConfig cfg = load_config(a.config);
  if (!a.base.empty()) cfg.init_checkpoint = a.base;
  std::vector<Strategy> strategies;
  for (const auto& s : a.strategies) strategies.push_back(parse_strategy(s));
  std::optional<ScoreReport> report;
  if (!a.scores.empty()) report = read_report(a.scores);
  for (double r : a.ratios) head_budget(r, 1);
  const auto base = initial_model(cfg);
  const auto rows = run_sweep(base, cfg, a.ratios, strategies, a.seeds, report ? &*report : nullptr);
  fs::create_directories(a.out_dir);
  const fs::path out = fs::path(a.out_dir) / "sweep.csv";
  write_file_atomic(out, sweep_csv(rows));
  return out;
}

void cmd_heatmap(const std::string& scores, const std::string& out) {
  write_file_atomic(out, heatmap_csv(read_report(scores)));
}

struct AblateArgs {
  std::string model, family = "copy", metric = "neg_loss", out;
  double ratio = 0.1;
  std::uint64_t dataset_seed = 0;
  int eval_size = 256;
};

void cmd_ablate(const AblateArgs& a) {
  const auto model = load_model(a.model);
  TrainConfig cfg;
  cfg.task_family = parse_family(a.family);
  cfg.dataset_seed = a.dataset_seed;
  cfg.eval_size = a.eval_size;
  cfg.seq_len = model.max_seq;
  AblationMetric metric;
  if (a.metric == "neg_loss") {
    metric = AblationMetric::NegLoss;
  } else if (a.metric == "accuracy") {
    metric = AblationMetric::Accuracy;
  } else {
    throw ValueError("unknown ablation metric '" + a.metric + "' (neg_loss|accuracy)");
  }
  head_budget(a.ratio, 1);
  const auto report = ablation_sensitivity(model, eval_split(cfg), a.ratio, std::nullopt, metric);
  write_json(ablation_to_json(report), a.out);
}

struct InitArgs {
  std::string out;
  std::uint64_t seed = 0;
  int layers = 4, d_model = 64, heads = 8, kv_groups = 2;
};

void cmd_init(const InitArgs& a) {
  const auto geo = ModelGeometry::make(a.layers, a.d_model, a.heads, a.kv_groups);
  geo.validate();
  save_model(init_model(geo, a.seed), a.out);
}

int exit_code(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::Usage:
      return kExitUsage;
    case ErrorCategory::Data:
      return kExitData;
    case ErrorCategory::Numeric:
      return kExitNumeric;
  }
  return kExitData;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"alps: attention head scoring, selection and masked fine-tuning"};
  app.require_subcommand(1);

  ScoreArgs score;
  auto* sc = app.add_subcommand("score", "Score every head between a base and a task checkpoint");
  sc->add_option("--base", score.base, "Base checkpoint")->required();
  sc->add_option("--task", score.task, "Task checkpoint")->required();
  sc->add_option("--metric", score.metric, "pad|kl|cosine|euclid")->check(CLI::IsMember({"pad", "kl", "cosine", "euclid"}));
  sc->add_option("--tau", score.tau, "Softmax temperature")->check(CLI::PositiveNumber);
  sc->add_option("--metric-domain", score.domain, "raw|dist (default depends on the metric)")
      ->check(CLI::IsMember({"raw", "dist"}));
  sc->add_option("--out", score.out, "Report path")->required();

  SelectArgs select;
  auto* se = app.add_subcommand("select", "Turn a score report into a head mask");
  se->add_option("--scores", select.scores, "Score report");
  se->add_option("--model", select.model, "Checkpoint supplying the geometry (random/lc without a report)");
  se->add_option("--ratio", select.ratio, "Retention ratio in (0, 1]")->check(CLI::Range(0.0, 1.0));
  se->add_option("--strategy", select.strategy, "topk|random|lc")->check(CLI::IsMember({"topk", "random", "lc"}));
  se->add_option("--seed", select.seed, "Seed for random and lc");
  se->add_option("--out", select.out, "Mask path")->required();

  TrainArgs trn;
  auto* tr = app.add_subcommand("train", "Fine-tune the toy model");
  tr->add_option("--config", trn.config, "TrainConfig JSON")->required();
  tr->add_option("--mask", trn.mask, "Head mask JSON");
  tr->add_option("--freeze", trn.freeze, "mask|all|none")->check(CLI::IsMember({"mask", "all", "none"}));
  tr->add_option("--init", trn.init, "Starting checkpoint (overrides the config)");
  tr->add_option("--out", trn.out, "Output checkpoint")->required();
  tr->add_option("--log", trn.log, "Metrics log (default: <out>.log.jsonl)");

  SweepArgs sweep;
  auto* sw = app.add_subcommand("sweep", "Grid of masked fine-tuning runs");
  sw->add_option("--config", sweep.config, "TrainConfig JSON")->required();
  sw->add_option("--base", sweep.base, "Starting checkpoint (overrides the config)");
  sw->add_option("--scores", sweep.scores, "Score report (needed for topk)");
  sw->add_option("--ratios", sweep.ratios, "Retention ratios")->delimiter(',');
  sw->add_option("--strategies", sweep.strategies, "Strategies")->delimiter(',');
  sw->add_option("--seeds", sweep.seeds, "Seeds")->delimiter(',');
  sw->add_option("--out-dir", sweep.out_dir, "Output directory")->required();

  std::string hm_scores, hm_out;
  auto* hm = app.add_subcommand("heatmap", "Layer x head CSV of a score report");
  hm->add_option("--scores", hm_scores, "Score report")->required();
  hm->add_option("--out", hm_out, "CSV path")->required();

  AblateArgs abl;
  auto* ab = app.add_subcommand("ablate", "Per-head ablation sensitivity of a trained model");
  ab->add_option("--model", abl.model, "Trained checkpoint")->required();
  ab->add_option("--task-family", abl.family, "copy|modadd|sortnext")->check(CLI::IsMember({"copy", "modadd", "sortnext"}));
  ab->add_option("--ratio", abl.ratio, "Top-K ratio in (0, 1]")->check(CLI::Range(0.0, 1.0));
  ab->add_option("--dataset-seed", abl.dataset_seed, "Dataset seed");
  ab->add_option("--eval-size", abl.eval_size, "Held-out examples")->check(CLI::PositiveNumber);
  ab->add_option("--metric", abl.metric, "neg_loss|accuracy")->check(CLI::IsMember({"neg_loss", "accuracy"}));
  ab->add_option("--out", abl.out, "Report path")->required();

  InitArgs ini;
  auto* in = app.add_subcommand("init", "Write a freshly initialised toy model");
  in->add_option("--seed", ini.seed, "Init seed");
  in->add_option("--layers", ini.layers, "Layers");
  in->add_option("--d-model", ini.d_model, "Model width");
  in->add_option("--heads", ini.heads, "Query heads");
  in->add_option("--kv-groups", ini.kv_groups, "Key/value groups");
  in->add_option("--out", ini.out, "Output checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    fs::path result;
    if (*sc) {
      cmd_score(score);
      result = score.out;
    } else if (*se) {
      cmd_select(select);
      result = select.out;
    } else if (*tr) {
      cmd_train(trn);
      result = trn.out;
    } else if (*sw) {
      result = cmd_sweep(sweep);
    } else if (*hm) {
      cmd_heatmap(hm_scores, hm_out);
      result = hm_out;
    } else if (*ab) {
      cmd_ablate(abl);
      result = abl.out;
    } else if (*in) {
      cmd_init(ini);
      result = ini.out;
    }
    std::cerr << result.string() << "\n";
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
