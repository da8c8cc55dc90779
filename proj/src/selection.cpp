#include "alps/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "alps/errors.hpp"
#include "alps/metrics.hpp"
#include "alps/rng.hpp"

namespace alps {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::TopK: return "topk";
    case Strategy::Random: return "random";
    case Strategy::LayerConsistent: return "lc";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "topk") return Strategy::TopK;
  if (name == "random") return Strategy::Random;
  if (name == "lc") return Strategy::LayerConsistent;
  throw ValueError("unknown strategy '" + std::string(name) + "' (topk|random|lc)");
}

int head_budget(double ratio, int total) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValueError("ratio must lie in (0, 1], got " + std::to_string(ratio));
  const double raw = ratio * static_cast<double>(total);
  const int k = static_cast<int>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp(k, 1, total);
}

void HeadMask::validate() const {
  geometry.validate();
  for (const auto& key : selected) head_index(key, geometry);
  const int expected = head_budget(ratio, geometry.total_heads());
  if (static_cast<int>(selected.size()) != expected) {
    throw ValueError("mask selects " + std::to_string(selected.size()) + " heads, ratio " + std::to_string(ratio) +
                     " requires " + std::to_string(expected));
  }
}

HeadMask select_topk(const ScoreReport& report, double ratio) {
  const auto& geometry = report.geometry;
  const int k = head_budget(ratio, geometry.total_heads());
  std::vector<ScoreEntry> order = report.entries;
  // Largest score first; equal scores fall back to canonical key order.
  std::sort(order.begin(), order.end(), [](const ScoreEntry& a, const ScoreEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.key < b.key;
  });
  HeadMask mask;
  mask.geometry = geometry;
  mask.ratio = ratio;
  mask.strategy = Strategy::TopK;
  mask.source_report_id = report.id();
  for (int i = 0; i < k; ++i) mask.selected.insert(order[static_cast<std::size_t>(i)].key);
  return mask;
}

namespace {

// First `k` entries of a seeded Fisher-Yates shuffle of `items`.
template <typename T>
std::vector<T> sample_prefix(std::vector<T> items, int k, SplitMix64& rng) {
  const auto n = items.size();
  for (std::size_t i = 0; i < static_cast<std::size_t>(k) && i + 1 < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(items[i], items[j]);
  }
  items.resize(static_cast<std::size_t>(k));
  return items;
}

}  // namespace

HeadMask select_random(const ModelGeometry& geometry, double ratio, std::uint64_t seed) {
  const int k = head_budget(ratio, geometry.total_heads());
  SplitMix64 rng(seed);
  HeadMask mask;
  mask.geometry = geometry;
  mask.ratio = ratio;
  mask.strategy = Strategy::Random;
  mask.seed = seed;
  for (const auto& key : sample_prefix(enumerate_heads(geometry), k, rng)) mask.selected.insert(key);
  return mask;
}

HeadMask select_layer_consistent(const ModelGeometry& geometry, double ratio, std::uint64_t seed) {
  const int k = head_budget(ratio, geometry.total_heads());
  const int base_quota = k / geometry.n_layers;
  const int remainder = k % geometry.n_layers;
  SplitMix64 rng(seed);
  HeadMask mask;
  mask.geometry = geometry;
  mask.ratio = ratio;
  mask.strategy = Strategy::LayerConsistent;
  mask.seed = seed;
  std::vector<int> heads(static_cast<std::size_t>(geometry.n_heads));
  std::iota(heads.begin(), heads.end(), 1);
  for (int l = 0; l < geometry.n_layers; ++l) {
    const int quota = base_quota + (l < remainder ? 1 : 0);
    for (int h : sample_prefix(heads, quota, rng)) mask.selected.insert({l, h});
  }
  return mask;
}

HeadMask full_mask(const ModelGeometry& geometry) {
  HeadMask mask;
  mask.geometry = geometry;
  mask.ratio = 1.0;
  mask.strategy = Strategy::TopK;
  for (const auto& key : enumerate_heads(geometry)) mask.selected.insert(key);
  return mask;
}

TrainablePlan trainable_plan(const HeadMask& mask) {
  TrainablePlan plan = frozen_attention_plan(mask.geometry);
  for (const auto& key : mask.selected) {
    head_index(key, mask.geometry);
    auto& layer = plan.layers[static_cast<std::size_t>(key.layer)];
    layer.q_heads.insert(key.head);
    layer.kv_groups.insert(kv_group_of(key.head, mask.geometry));
  }
  return plan;
}

TrainablePlan frozen_attention_plan(const ModelGeometry& geometry) {
  geometry.validate();
  TrainablePlan plan;
  plan.geometry = geometry;
  plan.layers.resize(static_cast<std::size_t>(geometry.n_layers));
  return plan;
}

nlohmann::json mask_to_json(const HeadMask& mask) {
  nlohmann::json selected = nlohmann::json::array();
  for (const auto& key : mask.selected) selected.push_back({{"layer", key.layer}, {"head", key.head}});
  nlohmann::json j = {{"geometry", geometry_to_json(mask.geometry)},
                      {"strategy", strategy_name(mask.strategy)},
                      {"ratio", mask.ratio},
                      {"seed", nullptr},
                      {"selected", std::move(selected)},
                      {"source_report_id", nullptr}};
  if (mask.seed) j["seed"] = *mask.seed;
  if (mask.source_report_id) j["source_report_id"] = *mask.source_report_id;
  return j;
}

HeadMask mask_from_json(const nlohmann::json& j) {
  try {
    HeadMask mask;
    mask.geometry = geometry_from_json(j.at("geometry"));
    mask.strategy = parse_strategy(j.at("strategy").get<std::string>());
    mask.ratio = j.at("ratio").get<double>();
    if (j.contains("seed") && !j.at("seed").is_null()) mask.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("source_report_id") && !j.at("source_report_id").is_null()) {
      mask.source_report_id = j.at("source_report_id").get<std::string>();
    }
    for (const auto& e : j.at("selected")) mask.selected.insert({e.at("layer").get<int>(), e.at("head").get<int>()});
    mask.validate();
    return mask;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed head mask: ") + ex.what());
  }
}

double jaccard(const std::set<HeadKey>& a, const std::set<HeadKey>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::vector<HeadKey> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  const auto uni = a.size() + b.size() - common.size();
  return static_cast<double>(common.size()) / static_cast<double>(uni);
}

}  // namespace alps
