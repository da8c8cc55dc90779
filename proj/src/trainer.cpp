#include "alps/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "alps/errors.hpp"
#include "alps/rng.hpp"

namespace alps {

std::string_view freeze_name(FreezeMode f) {
  switch (f) {
    case FreezeMode::Mask: return "mask";
    case FreezeMode::All: return "all";
    case FreezeMode::None: return "none";
  }
  return "?";
}

FreezeMode parse_freeze(std::string_view name) {
  if (name == "mask") return FreezeMode::Mask;
  if (name == "all") return FreezeMode::All;
  if (name == "none") return FreezeMode::None;
  throw ValueError("unknown freeze mode '" + std::string(name) + "' (mask|all|none)");
}

void TrainConfig::validate() const {
  if (train_size <= 0 || eval_size <= 0) throw ValueError("dataset sizes must be positive");
  if (steps <= 0 || batch_size <= 0) throw ValueError("steps and batch_size must be positive");
  if (seq_len <= 0) throw ValueError("seq_len must be positive");
  if (!(peak_lr > 0.0)) throw ValueError("peak_lr must be positive");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw ValueError("warmup_ratio must lie in [0, 1)");
  if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) throw ValueError("final_lr_fraction must lie in [0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValueError("betas must lie in [0, 1)");
  if (!(eps > 0.0) || !(weight_decay >= 0.0)) throw ValueError("eps must be positive, weight_decay non-negative");
  if (eval_every < 0) throw ValueError("eval_every must be non-negative");
  geometry.validate();
}

nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j = {{"task_family", family_name(c.task_family)},
                      {"dataset_seed", c.dataset_seed},
                      {"train_size", c.train_size},
                      {"eval_size", c.eval_size},
                      {"seq_len", c.seq_len},
                      {"steps", c.steps},
                      {"batch_size", c.batch_size},
                      {"peak_lr", c.peak_lr},
                      {"warmup_ratio", c.warmup_ratio},
                      {"final_lr_fraction", c.final_lr_fraction},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"eps", c.eps},
                      {"weight_decay", c.weight_decay},
                      {"shuffle_seed", c.shuffle_seed},
                      {"eval_every", c.eval_every},
                      {"freeze", freeze_name(c.freeze)},
                      {"init_seed", c.init_seed},
                      {"geometry", geometry_to_json(c.geometry)}};
  if (c.init_checkpoint) j["init_checkpoint"] = *c.init_checkpoint;
  if (c.mask_path) j["mask"] = *c.mask_path;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (!j.is_object()) throw FormatError("train config must be a JSON object");
    static const std::set<std::string> known = {
        "task_family", "dataset_seed", "train_size", "eval_size",    "seq_len",   "steps",      "batch_size",
        "peak_lr",     "warmup_ratio", "final_lr_fraction",          "beta1",     "beta2",      "eps",
        "weight_decay", "shuffle_seed", "eval_every", "freeze",      "init_seed", "geometry",   "init_checkpoint",
        "mask"};
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw FormatError("unknown train config key '" + key + "'");
    }
    if (j.contains("task_family")) c.task_family = parse_family(j.at("task_family").get<std::string>());
    c.dataset_seed = j.value("dataset_seed", c.dataset_seed);
    c.train_size = j.value("train_size", c.train_size);
    c.eval_size = j.value("eval_size", c.eval_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    if (j.contains("freeze")) c.freeze = parse_freeze(j.at("freeze").get<std::string>());
    c.init_seed = j.value("init_seed", c.init_seed);
    if (j.contains("geometry")) c.geometry = geometry_from_json(j.at("geometry"));
    if (j.contains("init_checkpoint") && !j.at("init_checkpoint").is_null()) {
      c.init_checkpoint = j.at("init_checkpoint").get<std::string>();
    }
    if (j.contains("mask") && !j.at("mask").is_null()) c.mask_path = j.at("mask").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed train config: ") + ex.what());
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  try {
    return config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + ex.what());
  }
}

int warmup_steps(const TrainConfig& config) {
  return static_cast<int>(std::lround(config.warmup_ratio * config.steps));
}

double learning_rate(const TrainConfig& config, int step) {
  const int total = config.steps;
  const int warmup = warmup_steps(config);
  const double peak = config.peak_lr;
  const double floor = config.final_lr_fraction * peak;
  if (step < 0 || step >= total) throw RangeError("step " + std::to_string(step) + " outside schedule of " + std::to_string(total));
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup + 1);
  const int span = total - 1 - warmup;
  if (span <= 0) return step >= total - 1 && total > 1 ? floor : peak;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState AdamState::zeros_like(const ToyModel& model) {
  AdamState s;
  for (const Matrix* p : model.params()) {
    s.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    s.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void adamw_step(ToyModel& model, AdamState& state, const Gradients& grads, const TrainConfig& config, int step) {
  if (step < 0 || step >= config.steps) throw RangeError("step " + std::to_string(step) + " outside schedule");
  const auto ps = model.params();
  const auto info = model.param_info();
  if (state.m.size() != ps.size()) throw ValueError("optimizer state does not match the model");
  const double lr = learning_rate(config, step);
  const double b1 = config.beta1;
  const double b2 = config.beta2;
  const double bias1 = 1.0 - std::pow(b1, step + 1);
  const double bias2 = 1.0 - std::pow(b2, step + 1);
  for (const auto& s : grads.slices) {
    const auto idx = static_cast<std::size_t>(s.param);
    const ParamKind kind = info.at(idx).kind;
    const bool decay = kind != ParamKind::AttnNorm && kind != ParamKind::MlpNorm && kind != ParamKind::FinalNorm;
    auto p = ps[idx]->middleRows(s.row0, s.rows);
    auto m = state.m[idx].middleRows(s.row0, s.rows);
    auto v = state.v[idx].middleRows(s.row0, s.rows);
    m = b1 * m + (1.0 - b1) * s.grad;
    v = b2 * v + (1.0 - b2) * s.grad.cwiseProduct(s.grad);
    if (decay) p *= 1.0 - lr * config.weight_decay;
    p.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + config.eps);
  }
}

TrainablePlan plan_for(const TrainConfig& config, const ModelGeometry& geometry, const HeadMask* mask) {
  switch (config.freeze) {
    case FreezeMode::All: return trainable_plan(full_mask(geometry));
    case FreezeMode::None: return frozen_attention_plan(geometry);
    case FreezeMode::Mask:
      if (!mask) throw ValueError("freeze mode 'mask' needs a head mask");
      if (!(mask->geometry == geometry)) {
        throw GeometryError("mask geometry " + geometry_to_json(mask->geometry).dump() + " differs from model " +
                            geometry_to_json(geometry).dump());
      }
      return trainable_plan(*mask);
  }
  throw ValueError("bad freeze mode");
}

EvalResult evaluate(const ToyModel& model, const Dataset& dataset, int batch_size) {
  if (dataset.empty()) throw ValueError("cannot evaluate on an empty dataset");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t tokens = 0;
  for (std::size_t start = 0; start < dataset.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    const Batch batch = make_batch(std::span<const Example>(dataset.data() + start, end - start));
    const auto fwd = forward(model, batch);
    for (Eigen::Index r = 0; r < fwd.logits.rows(); ++r) {
      const auto row = fwd.logits.row(r);
      const double hi = row.maxCoeff();
      const double lse = std::log((row.array() - hi).exp().sum()) + hi;
      const int target = batch.targets[static_cast<std::size_t>(r)];
      loss_sum += lse - row(target);
      Eigen::Index arg = 0;
      row.maxCoeff(&arg);
      if (arg == target) ++correct;
    }
    tokens += static_cast<std::size_t>(fwd.logits.rows());
  }
  return {loss_sum / static_cast<double>(tokens), static_cast<double>(correct) / static_cast<double>(tokens)};
}

Dataset train_split(const TrainConfig& c) {
  return make_dataset(c.task_family, c.dataset_seed, c.train_size, c.seq_len);
}

Dataset eval_split(const TrainConfig& c) {
  return make_dataset(c.task_family, derive_seed(c.dataset_seed, 0xE7A1), c.eval_size, c.seq_len);
}

ToyModel initial_model(const TrainConfig& config) {
  if (config.init_checkpoint) return load_model(*config.init_checkpoint);
  return init_model(config.geometry, config.init_seed);
}

TrainResult train(ToyModel model, const TrainConfig& config, const HeadMask* mask) {
  config.validate();
  check_parameter_census(model);
  const TrainablePlan plan = plan_for(config, model.geometry, mask);
  const Dataset train_data = train_split(config);
  const Dataset eval_data = eval_split(config);
  AdamState state = AdamState::zeros_like(model);

  TrainResult result;
  SplitMix64 rng(config.shuffle_seed);
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<std::size_t> picked(static_cast<std::size_t>(config.batch_size));

  auto record_eval = [&](int step) {
    result.final_eval = evaluate(model, eval_data);
    result.log.push_back(
        {{"step", step}, {"eval_loss", result.final_eval.loss}, {"eval_accuracy", result.final_eval.accuracy}});
  };

  for (int step = 0; step < config.steps; ++step) {
    for (auto& slot : picked) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        cursor = 0;
      }
      slot = order[cursor++];
    }
    const Batch batch = make_batch(train_data, picked);
    const auto lg = loss_and_grads(model, batch, plan);
    if (!std::isfinite(lg.loss)) throw NumericError("loss became non-finite at step " + std::to_string(step));
    adamw_step(model, state, lg.grads, config, step);
    result.log.push_back({{"step", step}, {"loss", lg.loss}, {"lr", learning_rate(config, step)}});
    if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < config.steps) record_eval(step);
  }
  record_eval(config.steps - 1);
  result.model = std::move(model);
  return result;
}

std::string log_to_jsonl(const std::vector<nlohmann::json>& log) {
  std::string out;
  for (const auto& rec : log) {
    out += rec.dump();
    out += '\n';
  }
  return out;
}

ToyModel ablate_heads(const ToyModel& model, const std::set<HeadKey>& heads) {
  ToyModel out = model;
  const int dv = model.geometry.d_v;
  for (const auto& key : heads) {
    head_index(key, model.geometry);
    out.layers[static_cast<std::size_t>(key.layer)].o_proj.middleCols((key.head - 1) * dv, dv).setZero();
  }
  return out;
}

namespace {

double metric_value(const EvalResult& e, AblationMetric metric) {
  return metric == AblationMetric::NegLoss ? -e.loss : e.accuracy;
}

}  // namespace

double ablation_drop(const ToyModel& model, const Dataset& dataset, const std::set<HeadKey>& heads,
                     AblationMetric metric) {
  if (heads.empty()) return 0.0;
  const double reference = metric_value(evaluate(model, dataset), metric);
  return reference - metric_value(evaluate(ablate_heads(model, heads), dataset), metric);
}

AblationReport ablation_sensitivity(const ToyModel& model, const Dataset& dataset, double ratio,
                                    const std::optional<std::vector<HeadKey>>& heads, AblationMetric metric) {
  AblationReport report;
  report.metric = metric;
  report.ratio = ratio;
  report.reference = metric_value(evaluate(model, dataset), metric);
  std::vector<HeadKey> keys = heads.value_or(enumerate_heads(model.geometry));
  std::sort(keys.begin(), keys.end());
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  for (const auto& key : keys) {
    const double ablated = metric_value(evaluate(ablate_heads(model, {key}), dataset), metric);
    report.entries.push_back({key, report.reference - ablated});
  }
  if (!keys.empty()) {
    std::vector<AblationEntry> order = report.entries;
    std::stable_sort(order.begin(), order.end(),
                     [](const AblationEntry& a, const AblationEntry& b) { return a.delta > b.delta; });
    const int k = head_budget(ratio, static_cast<int>(order.size()));
    for (int i = 0; i < k; ++i) report.top_k.push_back(order[static_cast<std::size_t>(i)].key);
  }
  return report;
}

nlohmann::json ablation_to_json(const AblationReport& report) {
  std::vector<AblationEntry> order = report.entries;
  std::stable_sort(order.begin(), order.end(),
                   [](const AblationEntry& a, const AblationEntry& b) { return a.delta > b.delta; });
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : order) entries.push_back({{"layer", e.key.layer}, {"head", e.key.head}, {"delta", e.delta}});
  nlohmann::json top = nlohmann::json::array();
  for (const auto& k : report.top_k) top.push_back({{"layer", k.layer}, {"head", k.head}});
  return {{"metric", report.metric == AblationMetric::NegLoss ? "neg_loss" : "accuracy"},
          {"reference", report.reference},
          {"ratio", report.ratio},
          {"entries", std::move(entries)},
          {"top_k", std::move(top)}};
}

}  // namespace alps
