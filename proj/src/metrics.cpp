#include "alps/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "alps/checkpoint.hpp"
#include "alps/errors.hpp"

namespace alps {

std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::Pad: return "pad";
    case Metric::Kl: return "kl";
    case Metric::Cosine: return "cosine";
    case Metric::Euclid: return "euclid";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  if (name == "pad") return Metric::Pad;
  if (name == "kl") return Metric::Kl;
  if (name == "cosine") return Metric::Cosine;
  if (name == "euclid") return Metric::Euclid;
  throw ValueError("unknown metric '" + std::string(name) + "' (pad|kl|cosine|euclid)");
}

std::string_view domain_name(MetricDomain d) { return d == MetricDomain::Raw ? "raw" : "dist"; }

MetricDomain parse_domain(std::string_view name) {
  if (name == "raw") return MetricDomain::Raw;
  if (name == "dist") return MetricDomain::Dist;
  throw ValueError("unknown metric domain '" + std::string(name) + "' (raw|dist)");
}

MetricDomain default_domain(Metric m) {
  return (m == Metric::Pad || m == Metric::Kl) ? MetricDomain::Dist : MetricDomain::Raw;
}

Matrix head_projection(const Matrix& wq, const Matrix& wk, const Matrix& wv) {
  if (wq.cols() != wk.cols() || wk.rows() != wv.rows()) {
    throw ShapeError("head projection shapes " + std::to_string(wq.rows()) + "x" + std::to_string(wq.cols()) + ", " +
                     std::to_string(wk.rows()) + "x" + std::to_string(wk.cols()) + ", " +
                     std::to_string(wv.rows()) + "x" + std::to_string(wv.cols()) + " do not chain");
  }
  const Matrix kv = wk.transpose() * wv;  // d_k x d_v
  return wq * kv;
}

std::vector<double> tempered_softmax(std::span<const double> values, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValueError("tau must be positive, got " + std::to_string(tau));
  if (values.empty()) throw ShapeError("softmax of an empty matrix");
  const double hi = *std::max_element(values.begin(), values.end());
  std::vector<double> out(values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp((values[i] - hi) / tau);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

std::vector<double> tempered_softmax(const Matrix& proj, double tau) {
  return tempered_softmax(std::span<const double>(proj.data(), static_cast<std::size_t>(proj.size())), tau);
}

double w1_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ShapeError("w1 needs equal sample counts, got " + std::to_string(p.size()) + " and " +
                     std::to_string(q.size()));
  }
  if (p.empty()) return 0.0;
  std::vector<double> a(p.begin(), p.end());
  std::vector<double> b(q.begin(), q.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += std::abs(a[i] - b[i]);
  return total / static_cast<double>(a.size());
}

double kl_divergence(std::span<const double> p_base, std::span<const double> p_task) {
  if (p_base.size() != p_task.size()) throw ShapeError("kl needs equal lengths");
  double total = 0.0;
  for (std::size_t i = 0; i < p_base.size(); ++i) {
    if (!(p_base[i] > 0.0) || !(p_task[i] > 0.0)) throw ValueError("kl needs strictly positive probabilities");
    total += p_base[i] * std::log(p_base[i] / p_task[i]);
  }
  // Rounding can leave a tiny negative sum for near-identical inputs.
  return std::max(total, 0.0);
}

double cosine_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine needs equal shapes");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw ValueError("cosine of a zero-norm matrix");
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(1.0 - c, 0.0, 2.0);
}

double cosine_score(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("cosine needs equal shapes");
  return cosine_score(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
}

double euclid_score(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("euclid needs equal shapes");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(total);
}

double euclid_score(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("euclid needs equal shapes");
  return euclid_score(std::span<const double>(a.data(), a.size()), std::span<const double>(b.data(), b.size()));
}

double score_head(const Matrix& base_proj, const Matrix& task_proj, Metric metric, MetricDomain domain, double tau) {
  if (base_proj.rows() != task_proj.rows() || base_proj.cols() != task_proj.cols()) {
    throw ShapeError("base and task projections differ in shape");
  }
  if (metric == Metric::Pad || metric == Metric::Kl || domain == MetricDomain::Dist) {
    const auto p = tempered_softmax(base_proj, tau);
    const auto q = tempered_softmax(task_proj, tau);
    switch (metric) {
      case Metric::Pad: return w1_distance(p, q);
      case Metric::Kl: return kl_divergence(p, q);
      case Metric::Cosine: return cosine_score(p, q);
      case Metric::Euclid: return euclid_score(p, q);
    }
  }
  return metric == Metric::Cosine ? cosine_score(base_proj, task_proj) : euclid_score(base_proj, task_proj);
}

unsigned scoring_threads() {
  if (const char* env = std::getenv("ALPS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

ScoreReport score_all_heads(const Checkpoint& base, const Checkpoint& task, const ScoreOptions& options) {
  const ModelGeometry geometry = checkpoint_geometry(base);
  const ModelGeometry task_geometry = checkpoint_geometry(task);
  if (!(geometry == task_geometry)) {
    throw GeometryError("base geometry " + geometry_to_json(geometry).dump() + " differs from task geometry " +
                        geometry_to_json(task_geometry).dump());
  }
  if (!(options.tau > 0.0)) throw ValueError("tau must be positive");

  ScoreReport report;
  report.metric = options.metric;
  report.domain = options.domain.value_or(default_domain(options.metric));
  report.tau = options.tau;
  report.base_id = base.fingerprint();
  report.task_id = task.fingerprint();
  report.geometry = geometry;
  const auto keys = enumerate_heads(geometry);
  report.entries.resize(keys.size());

  // Layers fan out across threads; each head's score is written to its own
  // slot so the result does not depend on the thread count.
  std::atomic<int> next_layer{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    try {
      for (int l = next_layer++; l < geometry.n_layers; l = next_layer++) {
        const LayerAttention base_layer(base, geometry, l);
        const LayerAttention task_layer(task, geometry, l);
        for (int h = 1; h <= geometry.n_heads; ++h) {
          const auto b = base_layer.head(h);
          const auto t = task_layer.head(h);
          const double s = score_head(head_projection(b.wq, b.wk, b.wv), head_projection(t.wq, t.wk, t.wv),
                                      report.metric, report.domain, report.tau);
          if (!std::isfinite(s)) {
            throw NumericError("non-finite score for layer " + std::to_string(l) + " head " + std::to_string(h));
          }
          auto& e = report.entries[static_cast<std::size_t>(head_index({l, h}, geometry))];
          e.key = {l, h};
          e.kv_group = kv_group_of(h, geometry);
          e.score = s;
        }
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  const unsigned n_threads =
      std::min<unsigned>(options.threads ? options.threads : scoring_threads(), static_cast<unsigned>(geometry.n_layers));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

nlohmann::json report_to_json(const ScoreReport& report) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"layer", e.key.layer}, {"head", e.key.head}, {"kv_group", e.kv_group}, {"score", e.score}});
  }
  return {{"metric", metric_name(report.metric)},
          {"metric_domain", domain_name(report.domain)},
          {"tau", report.tau},
          {"base_id", report.base_id},
          {"task_id", report.task_id},
          {"geometry", geometry_to_json(report.geometry)},
          {"entries", std::move(entries)}};
}

ScoreReport report_from_json(const nlohmann::json& j) {
  try {
    ScoreReport r;
    r.metric = parse_metric(j.at("metric").get<std::string>());
    r.domain = j.contains("metric_domain") ? parse_domain(j.at("metric_domain").get<std::string>())
                                           : default_domain(r.metric);
    r.tau = j.at("tau").get<double>();
    r.base_id = j.value("base_id", "");
    r.task_id = j.value("task_id", "");
    r.geometry = geometry_from_json(j.at("geometry"));
    for (const auto& e : j.at("entries")) {
      ScoreEntry entry;
      entry.key = {e.at("layer").get<int>(), e.at("head").get<int>()};
      entry.kv_group = e.value("kv_group", kv_group_of(entry.key.head, r.geometry));
      entry.score = e.at("score").get<double>();
      head_index(entry.key, r.geometry);
      if (!std::isfinite(entry.score) || entry.score < 0.0) {
        throw ValueError("report score must be finite and non-negative");
      }
      r.entries.push_back(entry);
    }
    if (static_cast<int>(r.entries.size()) != r.geometry.total_heads()) {
      throw FormatError("report has " + std::to_string(r.entries.size()) + " entries, geometry has " +
                        std::to_string(r.geometry.total_heads()) + " heads");
    }
    return r;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed score report: ") + ex.what());
  }
}

std::string ScoreReport::id() const { return sha256_hex(report_to_json(*this).dump()); }

std::string heatmap_csv(const ScoreReport& report) {
  const auto& g = report.geometry;
  std::vector<double> cells(static_cast<std::size_t>(g.total_heads()), 0.0);
  for (const auto& e : report.entries) cells[static_cast<std::size_t>(head_index(e.key, g))] = e.score;
  std::ostringstream os;
  os << std::setprecision(17);
  for (int l = 0; l < g.n_layers; ++l) {
    for (int h = 0; h < g.n_heads; ++h) {
      if (h) os << ',';
      os << cells[static_cast<std::size_t>(l * g.n_heads + h)];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace alps
