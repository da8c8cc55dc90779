#include "alps/geometry.hpp"

#include "alps/checkpoint.hpp"
#include "alps/errors.hpp"

namespace alps {

ModelGeometry ModelGeometry::make(int n_layers, int d_model, int n_heads, int n_kv_groups, int d_k, int d_v) {
  ModelGeometry g{n_layers, d_model, n_heads, n_kv_groups, d_k, d_v};
  if (n_heads > 0 && d_model % n_heads == 0) {
    if (g.d_k == 0) g.d_k = d_model / n_heads;
    if (g.d_v == 0) g.d_v = d_model / n_heads;
  }
  g.validate();
  return g;
}

void ModelGeometry::validate() const {
  if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || n_kv_groups <= 0 || d_k <= 0 || d_v <= 0) {
    throw GeometryError("all geometry fields must be positive");
  }
  if (n_heads % n_kv_groups != 0) {
    throw GeometryError("n_heads (" + std::to_string(n_heads) + ") is not a multiple of n_kv_groups (" +
                        std::to_string(n_kv_groups) + ")");
  }
}

int kv_group_of(int head, const ModelGeometry& geometry) {
  const int n = geometry.n_heads;
  const int g = geometry.n_kv_groups;
  if (head < 1 || head > n) {
    throw RangeError("head " + std::to_string(head) + " outside 1.." + std::to_string(n));
  }
  return (head * g + n - 1) / n;
}

std::vector<HeadKey> enumerate_heads(const ModelGeometry& geometry) {
  std::vector<HeadKey> keys;
  keys.reserve(static_cast<std::size_t>(geometry.total_heads()));
  for (int l = 0; l < geometry.n_layers; ++l) {
    for (int h = 1; h <= geometry.n_heads; ++h) keys.push_back({l, h});
  }
  return keys;
}

int head_index(const HeadKey& key, const ModelGeometry& geometry) {
  if (key.layer < 0 || key.layer >= geometry.n_layers) {
    throw RangeError("layer " + std::to_string(key.layer) + " outside 0.." + std::to_string(geometry.n_layers - 1));
  }
  if (key.head < 1 || key.head > geometry.n_heads) {
    throw RangeError("head " + std::to_string(key.head) + " outside 1.." + std::to_string(geometry.n_heads));
  }
  return key.layer * geometry.n_heads + (key.head - 1);
}

std::string q_proj_name(int layer) { return "layers." + std::to_string(layer) + ".attn.q_proj.weight"; }
std::string k_proj_name(int layer) { return "layers." + std::to_string(layer) + ".attn.k_proj.weight"; }
std::string v_proj_name(int layer) { return "layers." + std::to_string(layer) + ".attn.v_proj.weight"; }
std::string o_proj_name(int layer) { return "layers." + std::to_string(layer) + ".attn.o_proj.weight"; }

std::vector<std::string> required_tensor_names(const ModelGeometry& geometry) {
  std::vector<std::string> names;
  for (int l = 0; l < geometry.n_layers; ++l) {
    names.push_back(q_proj_name(l));
    names.push_back(k_proj_name(l));
    names.push_back(v_proj_name(l));
    names.push_back(o_proj_name(l));
  }
  return names;
}

nlohmann::json geometry_to_json(const ModelGeometry& g) {
  return {{"n_layers", g.n_layers}, {"d_model", g.d_model},         {"n_heads", g.n_heads},
          {"n_kv_groups", g.n_kv_groups}, {"d_k", g.d_k}, {"d_v", g.d_v}};
}

ModelGeometry geometry_from_json(const nlohmann::json& j) {
  try {
    return ModelGeometry::make(j.at("n_layers").get<int>(), j.at("d_model").get<int>(), j.at("n_heads").get<int>(),
                               j.at("n_kv_groups").get<int>(), j.value("d_k", 0), j.value("d_v", 0));
  } catch (const nlohmann::json::exception& ex) {
    throw GeometryError(std::string("malformed geometry: ") + ex.what());
  }
}

ModelGeometry checkpoint_geometry(const Checkpoint& ckpt) {
  if (!ckpt.meta().is_object() || !ckpt.meta().contains("geometry")) {
    throw GeometryError("checkpoint meta carries no geometry");
  }
  return geometry_from_json(ckpt.meta().at("geometry"));
}

namespace {

Matrix load_stored(const Checkpoint& ckpt, const std::string& name, std::int64_t rows, std::int64_t cols) {
  const auto& entry = ckpt.entry(name);
  if (entry.shape != Shape{rows, cols}) {
    throw ShapeError("'" + name + "' stored as " + shape_to_string(entry.shape) + ", geometry expects " +
                     shape_to_string({rows, cols}));
  }
  const auto values = ckpt.tensor_f64(name);
  return Eigen::Map<const Matrix>(values.data(), rows, cols);
}

}  // namespace

LayerAttention::LayerAttention(const Checkpoint& ckpt, const ModelGeometry& geometry, int layer)
    : geometry_(geometry) {
  head_index({layer, 1}, geometry);
  const std::int64_t d = geometry.d_model;
  q_ = load_stored(ckpt, q_proj_name(layer), std::int64_t{geometry.n_heads} * geometry.d_k, d);
  k_ = load_stored(ckpt, k_proj_name(layer), std::int64_t{geometry.n_kv_groups} * geometry.d_k, d);
  v_ = load_stored(ckpt, v_proj_name(layer), std::int64_t{geometry.n_kv_groups} * geometry.d_v, d);
}

HeadProjections LayerAttention::head(int head) const {
  const int group = kv_group_of(head, geometry_);
  const int dk = geometry_.d_k;
  const int dv = geometry_.d_v;
  return HeadProjections{
      q_.middleRows((head - 1) * dk, dk).transpose(),
      k_.middleRows((group - 1) * dk, dk).transpose(),
      v_.middleRows((group - 1) * dv, dv).transpose(),
  };
}

HeadProjections slice_head_projections(const Checkpoint& ckpt, const ModelGeometry& geometry, const HeadKey& key) {
  head_index(key, geometry);
  return LayerAttention(ckpt, geometry, key.layer).head(key.head);
}

}  // namespace alps
