#include "alps/data.hpp"

#include <algorithm>
#include <string>

#include "alps/errors.hpp"
#include "alps/rng.hpp"

namespace alps {

std::string_view family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::Copy: return "copy";
    case TaskFamily::ModAdd: return "modadd";
    case TaskFamily::SortNext: return "sortnext";
  }
  return "?";
}

TaskFamily parse_family(std::string_view name) {
  if (name == "copy") return TaskFamily::Copy;
  if (name == "modadd") return TaskFamily::ModAdd;
  if (name == "sortnext") return TaskFamily::SortNext;
  throw ValueError("unknown task family '" + std::string(name) + "' (copy|modadd|sortnext)");
}

std::vector<int> task_targets(TaskFamily family, std::span<const int> input, int vocab) {
  std::vector<int> target(input.begin(), input.end());
  switch (family) {
    case TaskFamily::Copy:
      for (std::size_t t = 1; t < input.size(); ++t) target[t] = input[t - 1];
      break;
    case TaskFamily::ModAdd: {
      int sum = 0;
      for (std::size_t t = 0; t < input.size(); ++t) {
        sum = (sum + input[t]) % vocab;
        target[t] = sum;
      }
      break;
    }
    case TaskFamily::SortNext:
      std::sort(target.begin(), target.end());
      break;
  }
  return target;
}

Dataset make_dataset(TaskFamily family, std::uint64_t seed, int size, int seq_len, int vocab) {
  if (size <= 0) throw ValueError("dataset size must be positive");
  if (seq_len <= 0 || vocab <= 0) throw ValueError("sequence length and vocabulary must be positive");
  SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(family) + 1));
  Dataset out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    Example ex;
    ex.input.resize(static_cast<std::size_t>(seq_len));
    for (auto& tok : ex.input) tok = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    ex.target = task_targets(family, ex.input, vocab);
    out.push_back(std::move(ex));
  }
  return out;
}

Batch make_batch(std::span<const Example> examples) {
  Batch batch;
  batch.size = static_cast<int>(examples.size());
  batch.seq_len = examples.empty() ? 0 : static_cast<int>(examples.front().input.size());
  for (const auto& ex : examples) {
    if (static_cast<int>(ex.input.size()) != batch.seq_len || ex.target.size() != ex.input.size()) {
      throw ShapeError("batch examples must share one sequence length");
    }
    batch.tokens.insert(batch.tokens.end(), ex.input.begin(), ex.input.end());
    batch.targets.insert(batch.targets.end(), ex.target.begin(), ex.target.end());
  }
  return batch;
}

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::vector<Example> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(dataset.at(i));
  return make_batch(picked);
}

}  // namespace alps
