#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "alps/checkpoint.hpp"
#include "alps/data.hpp"
#include "alps/geometry.hpp"

namespace alps {

struct TrainablePlan;

// Pre-norm GQA decoder: token + learned position embeddings, per layer
// RMSNorm -> grouped-query attention -> residual, RMSNorm -> GELU MLP -> residual,
// final RMSNorm and a linear output head. All weights binary64; linear
// weights are stored [out, in].
struct ToyLayer {
  Matrix attn_norm;  // 1 x d
  Matrix q_proj;     // n*d_k x d
  Matrix k_proj;     // g*d_k x d
  Matrix v_proj;     // g*d_v x d
  Matrix o_proj;     // d x n*d_v
  Matrix mlp_norm;   // 1 x d
  Matrix fc1;        // d_ff x d
  Matrix fc2;        // d x d_ff
};

enum class ParamKind { TokEmb, PosEmb, AttnNorm, QProj, KProj, VProj, OProj, MlpNorm, Fc1, Fc2, FinalNorm, LmHead };

struct ParamInfo {
  std::string name;
  ParamKind kind;
  int layer;  // -1 for non-layer parameters
};

inline constexpr double kRmsEps = 1e-5;

struct ToyModel {
  ModelGeometry geometry;
  int vocab = 32;
  int max_seq = 32;
  int d_ff = 0;
  Matrix tok_emb;     // vocab x d
  Matrix pos_emb;     // max_seq x d
  std::vector<ToyLayer> layers;
  Matrix final_norm;  // 1 x d
  Matrix lm_head;     // vocab x d

  // Canonical parameter order; index i of params() and param_info() agree.
  std::vector<Matrix*> params();
  std::vector<const Matrix*> params() const;
  std::vector<ParamInfo> param_info() const;
  std::size_t parameter_count() const;
};

ModelGeometry toy_geometry();  // 4 layers, d=64, n=8, g=2, d_k=d_v=8

// Scaled-uniform weights from the seed; norms at 1; output head all zeros.
ToyModel init_model(const ModelGeometry& geometry, std::uint64_t seed, int vocab = 32, int max_seq = 32);

// Throws GeometryError when any parameter shape disagrees with the geometry.
void check_parameter_census(const ToyModel& model);

struct LayerCache {
  Matrix x_in;
  Eigen::VectorXd inv_rms1;
  Matrix h1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // [b * n + head], seq x seq, causal
  Matrix attn;                // concatenated head outputs, BT x n*d_v
  Matrix x_mid;
  Eigen::VectorXd inv_rms2;
  Matrix h2;
  Matrix pre;  // fc1 output
  Matrix act;  // gelu(pre)
};

struct ForwardResult {
  Matrix logits;  // (batch * seq) x vocab
  std::vector<LayerCache> layers;
  Matrix x_final;
  Eigen::VectorXd inv_rms_final;
  Matrix h_final;
};

// Throws ValueError for out-of-range tokens or sequences longer than max_seq.
ForwardResult forward(const ToyModel& model, const Batch& batch);

// Gradient of rows [row0, row0 + rows) of parameter `param` (index into params()).
struct GradSlice {
  int param = 0;
  int row0 = 0;
  int rows = 0;
  Matrix grad;
};

struct Gradients {
  std::vector<GradSlice> slices;

  const GradSlice* find(int param, int row) const;
};

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
};

// Mean token cross-entropy without gradients.
double loss_only(const ToyModel& model, const Batch& batch);

// Mean token cross-entropy and reverse-mode gradients. Parameter gradients
// are produced only for slices the plan allows: trainable q-head rows,
// trainable kv-group rows and every non-attention parameter.
LossAndGrads loss_and_grads(const ToyModel& model, const Batch& batch, const TrainablePlan& plan);

TensorMap model_to_tensors(const ToyModel& model);
nlohmann::json model_meta(const ToyModel& model);
ToyModel model_from_checkpoint(const Checkpoint& ckpt);
// In-memory container view of the model, for scoring without a file.
Checkpoint model_checkpoint(const ToyModel& model);
void save_model(const ToyModel& model, const std::filesystem::path& path);
ToyModel load_model(const std::filesystem::path& path);

}  // namespace alps
