#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alps/geometry.hpp"

namespace alps {

struct ScoreReport;

enum class Strategy { TopK, Random, LayerConsistent };

std::string_view strategy_name(Strategy s);  // "topk" | "random" | "lc"
Strategy parse_strategy(std::string_view name);

// The heads kept trainable.
struct HeadMask {
  ModelGeometry geometry;
  std::set<HeadKey> selected;  // canonical order
  double ratio = 0.1;
  Strategy strategy = Strategy::TopK;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> source_report_id;

  // Throws on an invalid head or a selection size other than ceil(ratio * N).
  void validate() const;
};

// ceil(ratio * total) with a guard against binary rounding (0.1 * 1030 etc.).
int head_budget(double ratio, int total);

HeadMask select_topk(const ScoreReport& report, double ratio);
HeadMask select_random(const ModelGeometry& geometry, double ratio, std::uint64_t seed);
HeadMask select_layer_consistent(const ModelGeometry& geometry, double ratio, std::uint64_t seed);

// Every head selected; used for full attention fine-tuning.
HeadMask full_mask(const ModelGeometry& geometry);

// Per layer: trainable query heads and kv groups (both 1-based).
struct LayerPlan {
  std::set<int> q_heads;
  std::set<int> kv_groups;
};

// Which attention slices may receive gradients. Non-attention parameters are
// always trainable.
struct TrainablePlan {
  ModelGeometry geometry;
  std::vector<LayerPlan> layers;

  bool q_trainable(int layer, int head) const { return layers.at(layer).q_heads.count(head) != 0; }
  bool kv_trainable(int layer, int group) const { return layers.at(layer).kv_groups.count(group) != 0; }
};

TrainablePlan trainable_plan(const HeadMask& mask);

// No attention q/k/v slice trainable.
TrainablePlan frozen_attention_plan(const ModelGeometry& geometry);

nlohmann::json mask_to_json(const HeadMask& mask);
HeadMask mask_from_json(const nlohmann::json& j);

double jaccard(const std::set<HeadKey>& a, const std::set<HeadKey>& b);

}  // namespace alps
