#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace alps {

enum class TaskFamily { Copy, ModAdd, SortNext };

std::string_view family_name(TaskFamily f);
TaskFamily parse_family(std::string_view name);

struct Example {
  std::vector<int> input;
  std::vector<int> target;
};

using Dataset = std::vector<Example>;

// Targets computed from an input sequence:
//   copy     target[t] = input[t-1] (position 0 echoes itself)
//   modadd   target[t] = (input[0] + ... + input[t]) mod vocab
//   sortnext target    = input sorted ascending
std::vector<int> task_targets(TaskFamily family, std::span<const int> input, int vocab);

// `size` examples of uniform random tokens, deterministic per seed.
Dataset make_dataset(TaskFamily family, std::uint64_t seed, int size, int seq_len = 32, int vocab = 32);

// Equal-length examples packed row-major: tokens[b * seq_len + t].
struct Batch {
  int size = 0;
  int seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
};

Batch make_batch(std::span<const Example> examples);
Batch make_batch(const Dataset& dataset, std::span<const std::size_t> indices);

}  // namespace alps
