#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "alps/geometry.hpp"

namespace alps {

class Checkpoint;

enum class Metric { Pad, Kl, Cosine, Euclid };
enum class MetricDomain { Raw, Dist };

std::string_view metric_name(Metric m);
Metric parse_metric(std::string_view name);
std::string_view domain_name(MetricDomain d);
MetricDomain parse_domain(std::string_view name);

// pad and kl always work on distributions; cosine and euclid default to raw matrices.
MetricDomain default_domain(Metric m);

// Wq * (Wk^T * Wv): d_model x d_v. The association order is fixed.
Matrix head_projection(const Matrix& wq, const Matrix& wk, const Matrix& wv);

// Softmax over every entry of proj / tau, flattened row-major. Throws ValueError for tau <= 0.
std::vector<double> tempered_softmax(const Matrix& proj, double tau);
std::vector<double> tempered_softmax(std::span<const double> values, double tau);

// Exact W1 between two equal-size, equal-weight empirical samples:
// mean |sort(p)_i - sort(q)_i|.
double w1_distance(std::span<const double> p, std::span<const double> q);

// sum p_base * ln(p_base / p_task), index aligned.
double kl_divergence(std::span<const double> p_base, std::span<const double> p_task);

// 1 - cos(a, b) on the flattened inputs; larger means more changed.
double cosine_score(std::span<const double> a, std::span<const double> b);
double cosine_score(const Matrix& a, const Matrix& b);

// Frobenius / L2 norm of a - b.
double euclid_score(std::span<const double> a, std::span<const double> b);
double euclid_score(const Matrix& a, const Matrix& b);

struct ScoreEntry {
  HeadKey key;
  int kv_group = 1;
  double score = 0.0;
};

struct ScoreReport {
  Metric metric = Metric::Pad;
  MetricDomain domain = MetricDomain::Dist;
  double tau = 1.0;
  std::string base_id;
  std::string task_id;
  ModelGeometry geometry;
  std::vector<ScoreEntry> entries;  // enumerate_heads order

  // Content hash of the serialized report.
  std::string id() const;
};

struct ScoreOptions {
  Metric metric = Metric::Pad;
  double tau = 1.0;
  // Unset means default_domain(metric).
  std::optional<MetricDomain> domain;
  // 0 means ALPS_THREADS or hardware concurrency.
  unsigned threads = 0;
};

// Score every head of `task` against `base`. Throws GeometryError when the
// two checkpoints disagree on geometry.
ScoreReport score_all_heads(const Checkpoint& base, const Checkpoint& task, const ScoreOptions& options = {});

// Single-head score between two head projections under `options`.
double score_head(const Matrix& base_proj, const Matrix& task_proj, Metric metric, MetricDomain domain, double tau);

nlohmann::json report_to_json(const ScoreReport& report);
ScoreReport report_from_json(const nlohmann::json& j);

// One row per layer, one column per head.
std::string heatmap_csv(const ScoreReport& report);

// Threads for scoring: ALPS_THREADS when set and positive, else hardware concurrency.
unsigned scoring_threads();

}  // namespace alps
