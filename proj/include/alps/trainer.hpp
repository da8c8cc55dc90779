#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alps/data.hpp"
#include "alps/model.hpp"
#include "alps/selection.hpp"

namespace alps {

// Which attention q/k/v slices train:
//   Mask  only the heads of a HeadMask (and the kv groups they use)
//   All   every head (full fine-tuning)
//   None  no q/k/v slice
enum class FreezeMode { Mask, All, None };

std::string_view freeze_name(FreezeMode f);
FreezeMode parse_freeze(std::string_view name);

struct TrainConfig {
  TaskFamily task_family = TaskFamily::Copy;
  std::uint64_t dataset_seed = 0;
  int train_size = 4096;
  int eval_size = 256;
  int seq_len = 32;
  int steps = 1000;
  int batch_size = 32;
  double peak_lr = 3e-4;
  double warmup_ratio = 0.1;
  double final_lr_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::uint64_t shuffle_seed = 0;
  int eval_every = 0;  // 0: evaluate at the end only
  FreezeMode freeze = FreezeMode::All;

  // Starting point: a checkpoint path, or a fresh init from init_seed.
  std::optional<std::string> init_checkpoint;
  std::uint64_t init_seed = 0;
  ModelGeometry geometry = toy_geometry();
  std::optional<std::string> mask_path;

  void validate() const;
};

nlohmann::json config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::filesystem::path& path);

// Linear warmup to the peak over round(warmup_ratio * steps) steps, then
// cosine decay reaching final_lr_fraction * peak at the last step.
double learning_rate(const TrainConfig& config, int step);
int warmup_steps(const TrainConfig& config);

// AdamW moment buffers, one per parameter, touched only at rows that receive gradients.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  static AdamState zeros_like(const ToyModel& model);
};

// Decoupled-weight-decay AdamW on the slices present in `grads`. Parameters
// outside those slices see no moment update and no decay. Norm scales are
// not decayed.
void adamw_step(ToyModel& model, AdamState& state, const Gradients& grads, const TrainConfig& config, int step);

// Plan implied by the freeze mode (mask required for FreezeMode::Mask).
TrainablePlan plan_for(const TrainConfig& config, const ModelGeometry& geometry, const HeadMask* mask);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalResult evaluate(const ToyModel& model, const Dataset& dataset, int batch_size = 64);

struct TrainResult {
  ToyModel model;
  std::vector<nlohmann::json> log;  // {"step","loss","lr"} per step, eval records interleaved
  EvalResult final_eval;
};

Dataset train_split(const TrainConfig& config);
Dataset eval_split(const TrainConfig& config);

// Starting model for the config: init_checkpoint if set, else init_model(geometry, init_seed).
ToyModel initial_model(const TrainConfig& config);

// Deterministic masked fine-tuning. Throws GeometryError when the mask and
// the model disagree on geometry.
TrainResult train(ToyModel model, const TrainConfig& config, const HeadMask* mask = nullptr);

std::string log_to_jsonl(const std::vector<nlohmann::json>& log);

// Eval metric used for ablation: higher is better.
enum class AblationMetric { NegLoss, Accuracy };

struct AblationEntry {
  HeadKey key;
  double delta = 0.0;
};

struct AblationReport {
  AblationMetric metric = AblationMetric::NegLoss;
  double reference = 0.0;              // metric of the intact model
  std::vector<AblationEntry> entries;  // canonical head order
  std::vector<HeadKey> top_k;          // delta descending, ties canonical
  double ratio = 1.0;
};

// Removes a set of heads' output contribution by zeroing their o_proj column blocks.
ToyModel ablate_heads(const ToyModel& model, const std::set<HeadKey>& heads);

// Metric drop when `heads` are ablated together; 0 for an empty set.
double ablation_drop(const ToyModel& model, const Dataset& dataset, const std::set<HeadKey>& heads,
                     AblationMetric metric = AblationMetric::NegLoss);

// One-at-a-time ablation of `heads` (all heads when unset) and the Top-K by drop.
AblationReport ablation_sensitivity(const ToyModel& model, const Dataset& dataset, double ratio,
                                    const std::optional<std::vector<HeadKey>>& heads = std::nullopt,
                                    AblationMetric metric = AblationMetric::NegLoss);

nlohmann::json ablation_to_json(const AblationReport& report);

}  // namespace alps
