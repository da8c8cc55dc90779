#include <doctest.h>

#include <cmath>

#include "alps/errors.hpp"
#include "alps/model.hpp"
#include "alps/rng.hpp"
#include "alps/selection.hpp"
#include "support/oracles.hpp"
#include "support/reference_model.hpp"
#include "support/temp_dir.hpp"

using namespace alps;

namespace {

// Init leaves the output head at zero, which zeroes every upstream gradient.
// Tests that need informative gradients randomize it (and the norm scales).
ToyModel randomized_model(const ModelGeometry& geo, std::uint64_t seed) {
  ToyModel m = init_model(geo, seed);
  SplitMix64 rng(seed + 1000);
  m.lm_head = test::random_matrix(m.lm_head.rows(), m.lm_head.cols(), rng, -0.5, 0.5);
  for (auto& L : m.layers) {
    L.attn_norm = test::random_matrix(1, geo.d_model, rng, 0.5, 1.5);
    L.mlp_norm = test::random_matrix(1, geo.d_model, rng, 0.5, 1.5);
  }
  m.final_norm = test::random_matrix(1, geo.d_model, rng, 0.5, 1.5);
  return m;
}

Batch random_batch(int size, int seq_len, std::uint64_t seed, TaskFamily family = TaskFamily::Copy) {
  return make_batch(make_dataset(family, seed, size, seq_len));
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("init is deterministic and matches the parameter census") {
  const auto geo = toy_geometry();
  const auto a = init_model(geo, 5);
  const auto b = init_model(geo, 5);
  const auto c = init_model(geo, 6);
  const auto pa = a.params();
  const auto pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
  CHECK(a.tok_emb != c.tok_emb);
  CHECK(a.lm_head.isZero(0.0));
  CHECK_NOTHROW(check_parameter_census(a));
  // 2*V*d embeddings (incl. positions, V == max_seq) + head + final norm + 4 layers.
  const std::size_t d = 64, per_layer = 2 * d + 64 * d + 16 * d + 16 * d + d * 64 + 2 * 256 * d;
  CHECK(a.parameter_count() == 32 * d + 32 * d + 32 * d + d + 4 * per_layer);
  auto broken = a;
  broken.layers[1].k_proj = Matrix::Zero(8, 64);
  CHECK_THROWS_AS(check_parameter_census(broken), GeometryError);
}

TEST_CASE("initial cross-entropy is exactly ln(vocab)") {
  const auto m = init_model(toy_geometry(), 1);
  for (auto family : {TaskFamily::Copy, TaskFamily::ModAdd, TaskFamily::SortNext}) {
    CHECK(loss_only(m, random_batch(4, 32, 3, family)) == doctest::Approx(std::log(32.0)).epsilon(1e-13));
  }
}

TEST_CASE("single-token sequence attends fully to its own value") {
  const auto m = randomized_model(toy_geometry(), 2);
  const auto fwd = forward(m, random_batch(3, 1, 4));
  const auto& geo = m.geometry;
  for (const auto& c : fwd.layers) {
    for (int b = 0; b < 3; ++b) {
      for (int h = 0; h < geo.n_heads; ++h) {
        CHECK(c.probs[static_cast<std::size_t>(b * geo.n_heads + h)](0, 0) == 1.0);
        const int grp = h / geo.heads_per_group();
        CHECK(c.attn.block(b, h * geo.d_v, 1, geo.d_v) == c.v.block(b, grp * geo.d_v, 1, geo.d_v));
      }
    }
  }
}

TEST_CASE("g = n forward matches an independent multi-head reference") {
  const auto geo = ModelGeometry::make(2, 16, 4, 4);
  const auto m = randomized_model(geo, 3);
  const auto batch = random_batch(2, 12, 5);
  const auto fwd = forward(m, batch);
  for (int b = 0; b < 2; ++b) {
    const std::vector<int> tokens(batch.tokens.begin() + b * 12, batch.tokens.begin() + (b + 1) * 12);
    const auto ref = test::reference_mha_logits(m, tokens);
    for (int t = 0; t < 12; ++t) {
      for (int v = 0; v < m.vocab; ++v) {
        CHECK(std::abs(fwd.logits(b * 12 + t, v) - ref[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)]) <=
              1e-12);
      }
    }
  }
}

TEST_CASE("GQA sharing equals MHA with duplicated key/value heads") {
  const auto gqa_geo = ModelGeometry::make(2, 16, 4, 2);
  const auto gqa = randomized_model(gqa_geo, 4);
  ToyModel mha = gqa;
  mha.geometry = ModelGeometry::make(2, 16, 4, 4);
  for (auto& L : mha.layers) {
    Matrix k(16, 16), v(16, 16);
    for (int h = 1; h <= 4; ++h) {
      const int grp = kv_group_of(h, gqa_geo);
      k.middleRows((h - 1) * 4, 4) = L.k_proj.middleRows((grp - 1) * 4, 4);
      v.middleRows((h - 1) * 4, 4) = L.v_proj.middleRows((grp - 1) * 4, 4);
    }
    L.k_proj = k;
    L.v_proj = v;
  }
  const auto batch = random_batch(2, 10, 6);
  CHECK(max_abs_diff(forward(gqa, batch).logits, forward(mha, batch).logits) <= 1e-12);
}

TEST_CASE("forward is batch invariant and produces finite logits") {
  const auto m = randomized_model(toy_geometry(), 5);
  const auto data = make_dataset(TaskFamily::SortNext, 8, 3, 16);
  const auto all = forward(m, make_batch(data)).logits;
  CHECK(all.allFinite());
  for (int b = 0; b < 3; ++b) {
    const auto one = forward(m, make_batch(std::span<const Example>(&data[static_cast<std::size_t>(b)], 1))).logits;
    CHECK(max_abs_diff(all.middleRows(b * 16, 16), one) <= 1e-12);
  }
}

TEST_CASE("attention rows are causal distributions") {
  const auto m = randomized_model(toy_geometry(), 6);
  const auto fwd = forward(m, random_batch(2, 32, 7));
  for (const auto& c : fwd.layers) {
    for (const auto& p : c.probs) {
      for (int i = 0; i < p.rows(); ++i) {
        CHECK(std::abs(p.row(i).sum() - 1.0) <= 1e-9);
        for (int j = i + 1; j < p.cols(); ++j) CHECK(p(i, j) == 0.0);
      }
    }
  }
}

TEST_CASE("forward rejects bad tokens and over-long sequences") {
  const auto m = init_model(toy_geometry(), 1);
  Batch bad = random_batch(1, 4, 1);
  bad.tokens[2] = 32;
  CHECK_THROWS_AS(forward(m, bad), ValueError);
  bad.tokens[2] = -1;
  CHECK_THROWS_AS(forward(m, bad), ValueError);
  CHECK_THROWS_AS(forward(m, random_batch(1, 33, 1)), ValueError);
}

TEST_CASE("analytic gradients match central finite differences") {
  const auto geo = toy_geometry();
  ToyModel m = randomized_model(geo, 7);
  const auto batch = random_batch(2, 8, 9, TaskFamily::SortNext);
  const auto plan = trainable_plan(full_mask(geo));
  const auto lg = loss_and_grads(m, batch, plan);
  const auto params = m.params();
  const auto info = m.param_info();
  SplitMix64 rng(10);
  const double h = 1e-5;
  double worst = 0.0;
  int checked = 0;
  for (int i = 0; i < 200; ++i) {
    const int p = i % static_cast<int>(params.size());
    Matrix& w = *params[static_cast<std::size_t>(p)];
    int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(w.rows())));
    const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(w.cols())));
    // Embedding rows outside the batch have zero gradient; sample used rows.
    if (info[static_cast<std::size_t>(p)].kind == ParamKind::TokEmb) r = batch.tokens[rng.below(batch.tokens.size())];
    if (info[static_cast<std::size_t>(p)].kind == ParamKind::PosEmb) r = static_cast<int>(rng.below(8));
    const auto* slice = lg.grads.find(p, r);
    REQUIRE(slice != nullptr);
    const double analytic = slice->grad(r - slice->row0, c);
    const double saved = w(r, c);
    w(r, c) = saved + h;
    const double up = loss_only(m, batch);
    w(r, c) = saved - h;
    const double down = loss_only(m, batch);
    w(r, c) = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    worst = std::max(worst, rel);
    ++checked;
    INFO(info[static_cast<std::size_t>(p)].name, " (", r, ",", c, ") analytic ", analytic, " numeric ", numeric);
    CHECK(rel <= 1e-4);
  }
  CHECK(checked == 200);
  MESSAGE("max relative error " << worst);
}

TEST_CASE("frozen slices produce no gradient entries") {
  const auto geo = toy_geometry();
  const auto m = randomized_model(geo, 8);
  const auto batch = random_batch(2, 8, 11);
  HeadMask mask = full_mask(geo);
  for (int h = 1; h <= geo.n_heads; ++h) mask.selected.erase({0, h});
  const auto lg = loss_and_grads(m, batch, trainable_plan(mask));
  const auto info = m.param_info();
  for (const auto& s : lg.grads.slices) {
    const auto& pi = info[static_cast<std::size_t>(s.param)];
    const bool qkv = pi.kind == ParamKind::QProj || pi.kind == ParamKind::KProj || pi.kind == ParamKind::VProj;
    CHECK_FALSE((qkv && pi.layer == 0));
  }
  // Mask with one head: exactly its q rows and its group's k/v rows.
  HeadMask one;
  one.geometry = geo;
  one.ratio = 1.0 / 32.0;
  one.selected = {{2, 6}};
  const auto sparse = loss_and_grads(m, batch, trainable_plan(one));
  int q_slices = 0, kv_slices = 0;
  for (const auto& s : sparse.grads.slices) {
    const auto& pi = info[static_cast<std::size_t>(s.param)];
    if (pi.kind == ParamKind::QProj) {
      ++q_slices;
      CHECK(pi.layer == 2);
      CHECK(s.row0 == 5 * geo.d_k);
      CHECK(s.rows == geo.d_k);
    }
    if (pi.kind == ParamKind::KProj || pi.kind == ParamKind::VProj) {
      ++kv_slices;
      CHECK(pi.layer == 2);
      CHECK(s.row0 == (kv_group_of(6, geo) - 1) * geo.d_k);
    }
  }
  CHECK(q_slices == 1);
  CHECK(kv_slices == 2);
  // The permitted slices agree with the full-plan gradient.
  const auto full = loss_and_grads(m, batch, trainable_plan(full_mask(geo)));
  for (const auto& s : sparse.grads.slices) {
    const auto* f = full.grads.find(s.param, s.row0);
    REQUIRE(f != nullptr);
    CHECK(max_abs_diff(f->grad.middleRows(s.row0 - f->row0, s.rows), s.grad) == 0.0);
  }
  CHECK(sparse.loss == full.loss);
}

TEST_CASE("loss is a mean: duplicating or permuting the batch leaves it unchanged") {
  const auto m = randomized_model(toy_geometry(), 9);
  auto data = make_dataset(TaskFamily::ModAdd, 12, 4, 16);
  const double base = loss_only(m, make_batch(data));
  auto doubled = data;
  doubled.insert(doubled.end(), data.begin(), data.end());
  CHECK(loss_only(m, make_batch(doubled)) == doctest::Approx(base).epsilon(1e-14));
  std::swap(data[0], data[3]);
  std::swap(data[1], data[2]);
  CHECK(loss_only(m, make_batch(data)) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("model checkpoint roundtrip uses the head-geometry naming") {
  test::TempDir dir;
  const auto m = randomized_model(toy_geometry(), 10);
  save_model(m, dir.path() / "m.alps");
  const auto ckpt = read_checkpoint(dir.path() / "m.alps");
  CHECK(ckpt.entry(q_proj_name(3)).shape == Shape{64, 64});
  CHECK(ckpt.entry(k_proj_name(3)).shape == Shape{16, 64});
  CHECK(ckpt.entry(o_proj_name(0)).shape == Shape{64, 64});
  CHECK(ckpt.entry("layers.0.attn_norm.weight").shape == Shape{64});
  const auto back = model_from_checkpoint(ckpt);
  const auto pa = m.params();
  const auto pb = back.params();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
}
