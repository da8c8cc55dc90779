#include "alps/model.hpp"

#include <cmath>
#include <limits>

#include "alps/errors.hpp"
#include "alps/rng.hpp"
#include "alps/selection.hpp"

namespace alps {

namespace {

constexpr int kParamsPerLayer = 8;

int layer_param_index(int layer, ParamKind kind) {
  return 2 + layer * kParamsPerLayer + (static_cast<int>(kind) - static_cast<int>(ParamKind::AttnNorm));
}

std::string layer_prefix(int l) { return "layers." + std::to_string(l) + "."; }

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, SplitMix64& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Matrix ones_row(int d) { return Matrix::Ones(1, d); }

Matrix rmsnorm(const Matrix& x, const Matrix& scale, Eigen::VectorXd& inv_rms) {
  const double d = static_cast<double>(x.cols());
  inv_rms = ((x.array().square().rowwise().sum() / d) + kRmsEps).rsqrt().matrix();
  Matrix y = x.array().colwise() * inv_rms.array();
  y.array().rowwise() *= scale.row(0).array();
  return y;
}

Matrix rmsnorm_backward(const Matrix& x, const Eigen::VectorXd& inv_rms, const Matrix& scale, const Matrix& dy,
                        Matrix* dscale) {
  const double d = static_cast<double>(x.cols());
  Matrix g = dy;
  g.array().rowwise() *= scale.row(0).array();
  const Eigen::ArrayXd dot = (g.array() * x.array()).rowwise().sum();
  const Eigen::ArrayXd coef = inv_rms.array().cube() * dot / d;
  Matrix dx = g.array().colwise() * inv_rms.array();
  dx.array() -= x.array().colwise() * coef;
  if (dscale) {
    const Matrix normed = x.array().colwise() * inv_rms.array();
    *dscale = (dy.array() * normed.array()).colwise().sum().matrix();
  }
  return dx;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); }

void check_batch(const ToyModel& model, const Batch& batch) {
  if (batch.size <= 0 || batch.seq_len <= 0) throw ValueError("empty batch");
  if (batch.seq_len > model.max_seq) {
    throw ValueError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq " +
                     std::to_string(model.max_seq));
  }
  const auto n = static_cast<std::size_t>(batch.size) * static_cast<std::size_t>(batch.seq_len);
  if (batch.tokens.size() != n || batch.targets.size() != n) throw ShapeError("batch token count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.tokens[i] < 0 || batch.tokens[i] >= model.vocab) {
      throw ValueError("token " + std::to_string(batch.tokens[i]) + " outside vocabulary of " +
                       std::to_string(model.vocab));
    }
    if (batch.targets[i] < 0 || batch.targets[i] >= model.vocab) throw ValueError("target outside vocabulary");
  }
}

// Mean token cross-entropy; writes d(loss)/d(logits) when `dlogits` is non-null.
double cross_entropy(const Matrix& logits, const std::vector<int>& targets, Matrix* dlogits) {
  const auto rows = logits.rows();
  double total = 0.0;
  if (dlogits) dlogits->resize(rows, logits.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto row = logits.row(r);
    const double hi = row.maxCoeff();
    const Eigen::RowVectorXd e = (row.array() - hi).exp().matrix();
    const double z = e.sum();
    total += std::log(z) + hi - row(targets[static_cast<std::size_t>(r)]);
    if (dlogits) {
      dlogits->row(r) = e / (z * static_cast<double>(rows));
      (*dlogits)(r, targets[static_cast<std::size_t>(r)]) -= 1.0 / static_cast<double>(rows);
    }
  }
  return total / static_cast<double>(rows);
}

}  // namespace

ModelGeometry toy_geometry() { return ModelGeometry::make(4, 64, 8, 2, 8, 8); }

std::vector<Matrix*> ToyModel::params() {
  std::vector<Matrix*> out{&tok_emb, &pos_emb};
  for (auto& l : layers) {
    for (Matrix* p : {&l.attn_norm, &l.q_proj, &l.k_proj, &l.v_proj, &l.o_proj, &l.mlp_norm, &l.fc1, &l.fc2}) {
      out.push_back(p);
    }
  }
  out.push_back(&final_norm);
  out.push_back(&lm_head);
  return out;
}

std::vector<const Matrix*> ToyModel::params() const {
  auto mut = const_cast<ToyModel*>(this)->params();
  return {mut.begin(), mut.end()};
}

std::vector<ParamInfo> ToyModel::param_info() const {
  std::vector<ParamInfo> out{{"tok_emb.weight", ParamKind::TokEmb, -1}, {"pos_emb.weight", ParamKind::PosEmb, -1}};
  for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
    const auto p = layer_prefix(l);
    out.push_back({p + "attn_norm.weight", ParamKind::AttnNorm, l});
    out.push_back({q_proj_name(l), ParamKind::QProj, l});
    out.push_back({k_proj_name(l), ParamKind::KProj, l});
    out.push_back({v_proj_name(l), ParamKind::VProj, l});
    out.push_back({o_proj_name(l), ParamKind::OProj, l});
    out.push_back({p + "mlp_norm.weight", ParamKind::MlpNorm, l});
    out.push_back({p + "mlp.fc1.weight", ParamKind::Fc1, l});
    out.push_back({p + "mlp.fc2.weight", ParamKind::Fc2, l});
  }
  out.push_back({"final_norm.weight", ParamKind::FinalNorm, -1});
  out.push_back({"lm_head.weight", ParamKind::LmHead, -1});
  return out;
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  for (const Matrix* p : params()) n += static_cast<std::size_t>(p->size());
  return n;
}

ToyModel init_model(const ModelGeometry& geometry, std::uint64_t seed, int vocab, int max_seq) {
  geometry.validate();
  if (vocab <= 0 || max_seq <= 0) throw ValueError("vocab and max_seq must be positive");
  SplitMix64 rng(seed);
  const int d = geometry.d_model;
  const int n = geometry.n_heads;
  const int g = geometry.n_kv_groups;
  ToyModel m;
  m.geometry = geometry;
  m.vocab = vocab;
  m.max_seq = max_seq;
  m.d_ff = 4 * d;
  const double in_d = 1.0 / std::sqrt(static_cast<double>(d));
  m.tok_emb = uniform_matrix(vocab, d, 1.0, rng);
  m.pos_emb = uniform_matrix(max_seq, d, 1.0, rng);
  for (int l = 0; l < geometry.n_layers; ++l) {
    ToyLayer layer;
    layer.attn_norm = ones_row(d);
    layer.q_proj = uniform_matrix(n * geometry.d_k, d, in_d, rng);
    layer.k_proj = uniform_matrix(g * geometry.d_k, d, in_d, rng);
    layer.v_proj = uniform_matrix(g * geometry.d_v, d, in_d, rng);
    layer.o_proj = uniform_matrix(d, n * geometry.d_v, 1.0 / std::sqrt(static_cast<double>(n * geometry.d_v)), rng);
    layer.mlp_norm = ones_row(d);
    layer.fc1 = uniform_matrix(m.d_ff, d, in_d, rng);
    layer.fc2 = uniform_matrix(d, m.d_ff, 1.0 / std::sqrt(static_cast<double>(m.d_ff)), rng);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = ones_row(d);
  m.lm_head = Matrix::Zero(vocab, d);
  check_parameter_census(m);
  return m;
}

void check_parameter_census(const ToyModel& m) {
  const auto& geo = m.geometry;
  geo.validate();
  const Eigen::Index d = geo.d_model;
  auto expect = [](const Matrix& p, Eigen::Index r, Eigen::Index c, const std::string& what) {
    if (p.rows() != r || p.cols() != c) {
      throw GeometryError(what + " is " + std::to_string(p.rows()) + "x" + std::to_string(p.cols()) + ", expected " +
                          std::to_string(r) + "x" + std::to_string(c));
    }
  };
  if (static_cast<int>(m.layers.size()) != geo.n_layers) throw GeometryError("layer count differs from geometry");
  expect(m.tok_emb, m.vocab, d, "tok_emb");
  expect(m.pos_emb, m.max_seq, d, "pos_emb");
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    const auto p = layer_prefix(static_cast<int>(l));
    expect(L.attn_norm, 1, d, p + "attn_norm");
    expect(L.q_proj, Eigen::Index{geo.n_heads} * geo.d_k, d, p + "q_proj");
    expect(L.k_proj, Eigen::Index{geo.n_kv_groups} * geo.d_k, d, p + "k_proj");
    expect(L.v_proj, Eigen::Index{geo.n_kv_groups} * geo.d_v, d, p + "v_proj");
    expect(L.o_proj, d, Eigen::Index{geo.n_heads} * geo.d_v, p + "o_proj");
    expect(L.mlp_norm, 1, d, p + "mlp_norm");
    expect(L.fc1, m.d_ff, d, p + "fc1");
    expect(L.fc2, d, m.d_ff, p + "fc2");
  }
  expect(m.final_norm, 1, d, "final_norm");
  expect(m.lm_head, m.vocab, d, "lm_head");
}

const GradSlice* Gradients::find(int param, int row) const {
  for (const auto& s : slices) {
    if (s.param == param && row >= s.row0 && row < s.row0 + s.rows) return &s;
  }
  return nullptr;
}

ForwardResult forward(const ToyModel& model, const Batch& batch) {
  check_batch(model, batch);
  const auto& geo = model.geometry;
  const int B = batch.size;
  const int T = batch.seq_len;
  const int n = geo.n_heads;
  const int dk = geo.d_k;
  const int dv = geo.d_v;
  const int per_group = geo.heads_per_group();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  ForwardResult out;
  Matrix x(B * T, geo.d_model);
  for (int r = 0; r < B * T; ++r) {
    x.row(r) = model.tok_emb.row(batch.tokens[static_cast<std::size_t>(r)]) + model.pos_emb.row(r % T);
  }

  out.layers.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& L = model.layers[l];
    auto& c = out.layers[l];
    c.x_in = std::move(x);
    c.h1 = rmsnorm(c.x_in, L.attn_norm, c.inv_rms1);
    c.q = c.h1 * L.q_proj.transpose();
    c.k = c.h1 * L.k_proj.transpose();
    c.v = c.h1 * L.v_proj.transpose();
    c.attn.resize(B * T, n * dv);
    c.probs.resize(static_cast<std::size_t>(B) * n);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < n; ++h) {
        const int grp = h / per_group;
        Matrix s = (c.q.block(b * T, h * dk, T, dk) * c.k.block(b * T, grp * dk, T, dk).transpose()) * scale;
        for (int i = 0; i < T; ++i) {
          const double hi = s.row(i).head(i + 1).maxCoeff();
          double z = 0.0;
          for (int j = 0; j <= i; ++j) {
            s(i, j) = std::exp(s(i, j) - hi);
            z += s(i, j);
          }
          for (int j = 0; j <= i; ++j) s(i, j) /= z;
          for (int j = i + 1; j < T; ++j) s(i, j) = 0.0;
        }
        c.attn.block(b * T, h * dv, T, dv).noalias() = s * c.v.block(b * T, grp * dv, T, dv);
        c.probs[static_cast<std::size_t>(b * n + h)] = std::move(s);
      }
    }
    c.x_mid = c.x_in + c.attn * L.o_proj.transpose();
    c.h2 = rmsnorm(c.x_mid, L.mlp_norm, c.inv_rms2);
    c.pre = c.h2 * L.fc1.transpose();
    c.act = c.pre.unaryExpr([](double v) { return gelu(v); });
    x = c.x_mid + c.act * L.fc2.transpose();
  }
  out.x_final = std::move(x);
  out.h_final = rmsnorm(out.x_final, model.final_norm, out.inv_rms_final);
  out.logits = out.h_final * model.lm_head.transpose();
  return out;
}

double loss_only(const ToyModel& model, const Batch& batch) {
  return cross_entropy(forward(model, batch).logits, batch.targets, nullptr);
}

LossAndGrads loss_and_grads(const ToyModel& model, const Batch& batch, const TrainablePlan& plan) {
  if (!(plan.geometry == model.geometry)) throw GeometryError("trainable plan geometry differs from the model");
  const auto& geo = model.geometry;
  const int B = batch.size;
  const int T = batch.seq_len;
  const int n = geo.n_heads;
  const int g = geo.n_kv_groups;
  const int dk = geo.d_k;
  const int dv = geo.d_v;
  const int per_group = geo.heads_per_group();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const int n_layers = geo.n_layers;

  const ForwardResult fwd = forward(model, batch);
  LossAndGrads result;
  Matrix dlogits;
  result.loss = cross_entropy(fwd.logits, batch.targets, &dlogits);

  std::vector<GradSlice> by_param_tail;  // final norm and head, appended after layers
  auto full = [](int param, Matrix grad) {
    GradSlice s;
    s.param = param;
    s.row0 = 0;
    s.rows = static_cast<int>(grad.rows());
    s.grad = std::move(grad);
    return s;
  };
  const int final_norm_index = 2 + n_layers * kParamsPerLayer;

  by_param_tail.push_back(full(final_norm_index + 1, dlogits.transpose() * fwd.h_final));
  Matrix dh = dlogits * model.lm_head;
  Matrix dfinal_norm;
  Matrix dx = rmsnorm_backward(fwd.x_final, fwd.inv_rms_final, model.final_norm, dh, &dfinal_norm);
  by_param_tail.insert(by_param_tail.begin(), full(final_norm_index, std::move(dfinal_norm)));

  std::vector<std::vector<GradSlice>> layer_slices(static_cast<std::size_t>(n_layers));
  for (int l = n_layers - 1; l >= 0; --l) {
    const auto& L = model.layers[static_cast<std::size_t>(l)];
    const auto& c = fwd.layers[static_cast<std::size_t>(l)];
    const auto& lp = plan.layers.at(static_cast<std::size_t>(l));
    auto& slices = layer_slices[static_cast<std::size_t>(l)];

    // MLP block.
    Matrix dact = dx * L.fc2;
    Matrix dfc2 = dx.transpose() * c.act;
    Matrix dpre = dact.array() * c.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    Matrix dfc1 = dpre.transpose() * c.h2;
    Matrix dh2 = dpre * L.fc1;
    Matrix dmlp_norm;
    Matrix dx_mid = dx + rmsnorm_backward(c.x_mid, c.inv_rms2, L.mlp_norm, dh2, &dmlp_norm);

    // Attention block.
    Matrix do_proj = dx_mid.transpose() * c.attn;
    Matrix dattn = dx_mid * L.o_proj;
    Matrix dq = Matrix::Zero(B * T, n * dk);
    Matrix dk_all = Matrix::Zero(B * T, g * dk);
    Matrix dv_all = Matrix::Zero(B * T, g * dv);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < n; ++h) {
        const int grp = h / per_group;
        const Matrix& P = c.probs[static_cast<std::size_t>(b * n + h)];
        const auto dO = dattn.block(b * T, h * dv, T, dv);
        const Matrix dP = dO * c.v.block(b * T, grp * dv, T, dv).transpose();
        dv_all.block(b * T, grp * dv, T, dv).noalias() += P.transpose() * dO;
        const Eigen::VectorXd row_dot = (dP.array() * P.array()).rowwise().sum();
        Matrix dS = P.array() * (dP.colwise() - row_dot).array();
        dS *= scale;
        dq.block(b * T, h * dk, T, dk).noalias() = dS * c.k.block(b * T, grp * dk, T, dk);
        dk_all.block(b * T, grp * dk, T, dk).noalias() += dS.transpose() * c.q.block(b * T, h * dk, T, dk);
      }
    }
    Matrix dh1 = dq * L.q_proj + dk_all * L.k_proj + dv_all * L.v_proj;
    Matrix dattn_norm;
    dx = dx_mid + rmsnorm_backward(c.x_in, c.inv_rms1, L.attn_norm, dh1, &dattn_norm);

    slices.push_back(full(layer_param_index(l, ParamKind::AttnNorm), std::move(dattn_norm)));
    for (int h : lp.q_heads) {
      GradSlice s{layer_param_index(l, ParamKind::QProj), (h - 1) * dk, dk,
                  dq.middleCols((h - 1) * dk, dk).transpose() * c.h1};
      slices.push_back(std::move(s));
    }
    for (int grp : lp.kv_groups) {
      slices.push_back({layer_param_index(l, ParamKind::KProj), (grp - 1) * dk, dk,
                        dk_all.middleCols((grp - 1) * dk, dk).transpose() * c.h1});
    }
    for (int grp : lp.kv_groups) {
      slices.push_back({layer_param_index(l, ParamKind::VProj), (grp - 1) * dv, dv,
                        dv_all.middleCols((grp - 1) * dv, dv).transpose() * c.h1});
    }
    slices.push_back(full(layer_param_index(l, ParamKind::OProj), std::move(do_proj)));
    slices.push_back(full(layer_param_index(l, ParamKind::MlpNorm), std::move(dmlp_norm)));
    slices.push_back(full(layer_param_index(l, ParamKind::Fc1), std::move(dfc1)));
    slices.push_back(full(layer_param_index(l, ParamKind::Fc2), std::move(dfc2)));
  }

  Matrix dtok = Matrix::Zero(model.tok_emb.rows(), model.tok_emb.cols());
  Matrix dpos = Matrix::Zero(model.pos_emb.rows(), model.pos_emb.cols());
  for (int r = 0; r < B * T; ++r) {
    dtok.row(batch.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
    dpos.row(r % T) += dx.row(r);
  }

  auto& out = result.grads.slices;
  out.push_back(full(0, std::move(dtok)));
  out.push_back(full(1, std::move(dpos)));
  for (auto& slices : layer_slices) {
    for (auto& s : slices) out.push_back(std::move(s));
  }
  for (auto& s : by_param_tail) out.push_back(std::move(s));
  return result;
}

TensorMap model_to_tensors(const ToyModel& model) {
  TensorMap out;
  const auto info = model.param_info();
  const auto ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Matrix& p = *ps[i];
    const bool vector_like = info[i].kind == ParamKind::AttnNorm || info[i].kind == ParamKind::MlpNorm ||
                             info[i].kind == ParamKind::FinalNorm;
    Shape shape = vector_like ? Shape{p.cols()} : Shape{p.rows(), p.cols()};
    out.emplace(info[i].name, Tensor(std::move(shape), std::vector<double>(p.data(), p.data() + p.size())));
  }
  return out;
}

nlohmann::json model_meta(const ToyModel& model) {
  return {{"geometry", geometry_to_json(model.geometry)},
          {"model", {{"kind", "toy-gqa"}, {"vocab", model.vocab}, {"max_seq", model.max_seq}, {"d_ff", model.d_ff}}}};
}

ToyModel model_from_checkpoint(const Checkpoint& ckpt) {
  const auto geometry = checkpoint_geometry(ckpt);
  const auto& meta = ckpt.meta();
  if (!meta.contains("model")) throw FormatError("checkpoint is not a toy model (no \"model\" meta)");
  ToyModel m;
  m.geometry = geometry;
  try {
    m.vocab = meta.at("model").at("vocab").get<int>();
    m.max_seq = meta.at("model").at("max_seq").get<int>();
    m.d_ff = meta.at("model").at("d_ff").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed toy model meta: ") + ex.what());
  }
  m.layers.resize(static_cast<std::size_t>(geometry.n_layers));
  const auto info = m.param_info();
  const auto ps = m.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& entry = ckpt.entry(info[i].name);
    const auto values = ckpt.tensor_f64(info[i].name);
    const Eigen::Index rows = entry.shape.size() == 1 ? 1 : entry.shape.at(0);
    const Eigen::Index cols = entry.shape.back();
    if (entry.shape.empty() || entry.shape.size() > 2) throw ShapeError("'" + info[i].name + "' has bad rank");
    *ps[i] = Eigen::Map<const Matrix>(values.data(), rows, cols);
  }
  check_parameter_census(m);
  return m;
}

Checkpoint model_checkpoint(const ToyModel& model) {
  return Checkpoint::from_bytes(serialize_checkpoint(model_to_tensors(model), model_meta(model)));
}

void save_model(const ToyModel& model, const std::filesystem::path& path) {
  write_checkpoint(model_to_tensors(model), model_meta(model), path);
}

ToyModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(read_checkpoint(path)); }

}  // namespace alps
