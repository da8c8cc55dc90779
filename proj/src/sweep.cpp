#include "alps/sweep.hpp"

#include <atomic>
#include <charconv>
#include <exception>
#include <mutex>
#include <sstream>
#include <thread>

#include "alps/errors.hpp"

namespace alps {

HeadMask make_mask(Strategy strategy, double ratio, std::uint64_t seed, const ModelGeometry& geometry,
                   const ScoreReport* report) {
  switch (strategy) {
    case Strategy::TopK:
      if (!report) throw ValueError("topk selection needs a score report");
      if (!(report->geometry == geometry)) throw GeometryError("score report geometry differs from the model");
      return select_topk(*report, ratio);
    case Strategy::Random:
      return select_random(geometry, ratio, seed);
    case Strategy::LayerConsistent:
      return select_layer_consistent(geometry, ratio, seed);
  }
  throw ValueError("unknown strategy");
}

std::vector<SweepRow> run_sweep(const ToyModel& base, const TrainConfig& config, const std::vector<double>& ratios,
                                const std::vector<Strategy>& strategies, const std::vector<std::uint64_t>& seeds,
                                const ScoreReport* report, unsigned threads) {
  struct Cell {
    SweepRow row;
    HeadMask mask;
  };
  std::vector<Cell> cells;
  for (double ratio : ratios) {
    for (Strategy s : strategies) {
      for (std::uint64_t seed : seeds) {
        Cell c;
        c.row.ratio = ratio;
        c.row.strategy = s;
        c.row.seed = seed;
        c.mask = make_mask(s, ratio, seed, base.geometry, report);
        c.row.selected = static_cast<int>(c.mask.selected.size());
        cells.push_back(std::move(c));
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        TrainConfig cfg = config;
        cfg.freeze = FreezeMode::Mask;
        cfg.shuffle_seed = cells[i].row.seed;
        cells[i].row.eval = train(base, cfg, &cells[i].mask).final_eval;
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n = std::min<unsigned>(threads ? threads : scoring_threads(), static_cast<unsigned>(cells.size()));
  if (n <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned i = 0; i < n; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<SweepRow> rows;
  for (auto& c : cells) rows.push_back(c.row);
  return rows;
}

namespace {

// Shortest text that reads back to the same double.
std::string shortest(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "ratio,strategy,seed,selected,eval_loss,eval_accuracy\n";
  for (const auto& r : rows) {
    out << shortest(r.ratio) << ',' << strategy_name(r.strategy) << ',' << r.seed << ',' << r.selected << ','
        << shortest(r.eval.loss) << ',' << shortest(r.eval.accuracy) << '\n';
  }
  return out.str();
}

}  // namespace alps
