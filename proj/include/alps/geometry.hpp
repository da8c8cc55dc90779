#pragma once

#include <compare>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace alps {

class Checkpoint;

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Layer/head/group counts of a grouped-query-attention stack.
// n_heads query heads share n_kv_groups key/value projections.
struct ModelGeometry {
  int n_layers = 1;
  int d_model = 0;
  int n_heads = 1;
  int n_kv_groups = 1;
  int d_k = 0;
  int d_v = 0;

  int heads_per_group() const { return n_heads / n_kv_groups; }
  int total_heads() const { return n_layers * n_heads; }

  // Fills d_k / d_v (when zero) with d_model / n_heads and validates.
  static ModelGeometry make(int n_layers, int d_model, int n_heads, int n_kv_groups, int d_k = 0, int d_v = 0);

  // Throws GeometryError on violated invariants.
  void validate() const;

  friend bool operator==(const ModelGeometry&, const ModelGeometry&) = default;
};

// Layer is 0-based, head is 1-based (h in 1..n).
struct HeadKey {
  int layer = 0;
  int head = 1;

  friend auto operator<=>(const HeadKey&, const HeadKey&) = default;
};

// ceil(head * g / n), 1-based. Throws RangeError when head is outside 1..n.
int kv_group_of(int head, const ModelGeometry& geometry);

// All heads, (layer, head) lexicographic. Canonical order for ties downstream.
std::vector<HeadKey> enumerate_heads(const ModelGeometry& geometry);

// Position of `key` in enumerate_heads order.
int head_index(const HeadKey& key, const ModelGeometry& geometry);

std::string q_proj_name(int layer);
std::string k_proj_name(int layer);
std::string v_proj_name(int layer);
std::string o_proj_name(int layer);
std::vector<std::string> required_tensor_names(const ModelGeometry& geometry);

nlohmann::json geometry_to_json(const ModelGeometry& geometry);
ModelGeometry geometry_from_json(const nlohmann::json& j);

// Reads the geometry embedded in a checkpoint's meta.
ModelGeometry checkpoint_geometry(const Checkpoint& ckpt);

// Per-head projections in math orientation (input dim x head dim), binary64.
struct HeadProjections {
  Matrix wq;  // d_model x d_k
  Matrix wk;  // d_model x d_k, shared by the head's kv group
  Matrix wv;  // d_model x d_v
};

HeadProjections slice_head_projections(const Checkpoint& ckpt, const ModelGeometry& geometry, const HeadKey& key);

// The stored [out, in] q/k/v tensors of one layer, decoded once so that all
// of the layer's heads can be sliced without re-reading the checkpoint.
class LayerAttention {
 public:
  LayerAttention(const Checkpoint& ckpt, const ModelGeometry& geometry, int layer);

  HeadProjections head(int head) const;

 private:
  ModelGeometry geometry_;
  Matrix q_;
  Matrix k_;
  Matrix v_;
};

}  // namespace alps
