#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "alps/metrics.hpp"
#include "alps/selection.hpp"
#include "alps/trainer.hpp"

namespace alps {

// Mask for one strategy. TopK needs a report; the others only a geometry.
HeadMask make_mask(Strategy strategy, double ratio, std::uint64_t seed, const ModelGeometry& geometry,
                   const ScoreReport* report);

struct SweepRow {
  double ratio = 0.0;
  Strategy strategy = Strategy::TopK;
  std::uint64_t seed = 0;
  int selected = 0;
  EvalResult eval;
};

// Masked fine-tuning of `base` for every (ratio, strategy, seed) cell. The
// seed drives both the mask (random, lc) and the shuffle order, so cells
// that share a seed and a mask train identically. Runs are independent and
// execute on up to `threads` workers (0: ALPS_THREADS or hardware); rows
// come back in grid order regardless.
std::vector<SweepRow> run_sweep(const ToyModel& base, const TrainConfig& config, const std::vector<double>& ratios,
                                const std::vector<Strategy>& strategies, const std::vector<std::uint64_t>& seeds,
                                const ScoreReport* report, unsigned threads = 0);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace alps
