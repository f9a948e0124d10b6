#include <gtest/gtest.h>

#include "dare/error.hpp"
#include "dare/reuse.hpp"
#include "test_support.hpp"

using namespace dare;
using dare::testing::random_input;

namespace {

ModelConfig cfg(std::size_t d, std::size_t layers = 1, std::size_t heads = 1) {
  ModelConfig c;
  c.d_model = d;
  c.layers = layers;
  c.heads = heads;
  c.d_int = 2 * d;
  c.n_vocab = 6;
  c.seed = 23;
  return c;
}

ReuseOptions opts(ReuseMode mode, std::size_t refresh = SIZE_MAX, std::size_t skip = 0) {
  ReuseOptions o;
  o.mode = mode;
  o.refresh_interval = refresh;
  o.skip_first_layers = skip;
  return o;
}

// x with some rows replaced by fresh random rows.
Matrix perturb_rows(const Matrix& x, std::initializer_list<std::size_t> rows, Rng& rng) {
  Matrix out = x;
  const Matrix fresh = random_input(x.rows(), x.cols(), rng);
  for (std::size_t r : rows) {
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = fresh(r, c);
  }
  return out;
}

}  // namespace

TEST(Gate, TruthTable) {
  EXPECT_TRUE(gate(3, 3, 2, 2));
  EXPECT_FALSE(gate(1, 3, 2, 2));
  EXPECT_FALSE(gate(3, 4, 2, 2));
  for (std::size_t t = 0; t < 10; ++t) EXPECT_FALSE(gate(5, t, 0, 1));
  for (std::size_t l = 0; l < 4; ++l) EXPECT_FALSE(gate(l, 3, 4, 5));
  EXPECT_FALSE(gate(0, 0, 0, SIZE_MAX));
  EXPECT_TRUE(gate(0, 1, 0, SIZE_MAX));
  EXPECT_THROW(gate(0, 1, 0, 0), ContractError);
}

TEST(UpdateStaleness, Recursion) {
  const std::vector<std::size_t> d{2, 0, 5};
  EXPECT_EQ(update_staleness(d, {}), (std::vector<std::size_t>{0, 0, 0}));
  std::vector<std::size_t> s(3, 0);
  for (int t = 0; t < 3; ++t) s = update_staleness(s, std::vector<std::size_t>{1});
  EXPECT_EQ(s[1], 3u);
  EXPECT_EQ(s[0], 0u);
}

TEST(UpdateStaleness, ReplayOracle) {
  Rng rng(1);
  std::vector<std::size_t> s(6, 0);
  std::vector<std::vector<bool>> history;
  for (int t = 0; t < 10; ++t) {
    std::vector<std::size_t> reused;
    std::vector<bool> mask(6, false);
    for (std::size_t i = 0; i < 6; ++i) {
      if (rng.uniform() < 0.6) {
        reused.push_back(i);
        mask[i] = true;
      }
    }
    history.push_back(mask);
    s = update_staleness(s, reused);
    for (std::size_t i = 0; i < 6; ++i) {
      std::size_t run = 0;
      for (auto it = history.rbegin(); it != history.rend() && (*it)[i]; ++it) ++run;
      EXPECT_EQ(s[i], run);
    }
  }
}

TEST(DareKv, DisabledMatchesFullForwardBitwise) {
  const auto w = init_weights(cfg(4));
  ReuseState state(w.config, opts(ReuseMode::kv), {std::nullopt});
  Rng rng(2);
  Matrix x = random_input(3, 4, rng);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto r = dare_kv_layer_step(w.layers[0], w.config, x, state, 0, t);
    EXPECT_EQ(r.acts.o, forward_full(w, x).layers[0].o);
    EXPECT_TRUE(r.decision.reused.empty());
    x = perturb_rows(x, {t % 3}, rng);
  }
}

TEST(DareKv, UnchangedInputReusesEverything) {
  const auto w = init_weights(cfg(4));
  ReuseState state(w.config, opts(ReuseMode::kv), {0.0});
  Rng rng(3);
  const Matrix x = random_input(3, 4, rng);
  dare_kv_layer_step(w.layers[0], w.config, x, state, 0, 0);
  const auto r = dare_kv_layer_step(w.layers[0], w.config, x, state, 0, 1);
  EXPECT_EQ(r.decision.reused.size(), 3u);
  const auto full = forward_full(w, x).layers[0].o;
  for (std::size_t i = 0; i < full.size(); ++i) EXPECT_NEAR(r.acts.o.data()[i], full.data()[i], 1e-10);
}

TEST(DareKv, ForcedSpliceMatchesOracle) {
  const auto w = init_weights(cfg(4));
  const auto& lw = w.layers[0];
  ReuseState state(w.config, opts(ReuseMode::kv), {std::nullopt});
  Rng rng(4);
  const Matrix x0 = random_input(3, 4, rng);
  const Matrix x1 = random_input(3, 4, rng);
  dare_kv_layer_step(lw, w.config, x0, state, 0, 0);
  const std::vector<std::size_t> forced{0};
  const auto r = dare_kv_layer_step(lw, w.config, x1, state, 0, 1, &forced);

  Matrix k = matmul(x1, lw.w_k), v = matmul(x1, lw.w_v);
  const Matrix k0 = matmul(x0, lw.w_k), v0 = matmul(x0, lw.w_v);
  for (std::size_t c = 0; c < 4; ++c) {
    k(0, c) = k0(0, c);
    v(0, c) = v0(0, c);
  }
  const Matrix q = matmul(x1, lw.w_q);
  const Matrix a = row_softmax(scaled(matmul_transposed(q, k), 0.5));
  const Matrix o = matmul(matmul(a, v), lw.w_o);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(r.acts.o.data()[i], o.data()[i], 1e-12);
  EXPECT_EQ(r.decision.reused, forced);
  EXPECT_EQ(r.decision.refreshed, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(state.staleness(0), (std::vector<std::size_t>{1, 0, 0}));
}

TEST(DareKv, MissingStateThrows) {
  const auto w = init_weights(cfg(4));
  ReuseState state(w.config, opts(ReuseMode::kv), {0.5});
  Rng rng(5);
  const Matrix x = random_input(3, 4, rng);
  EXPECT_THROW(dare_kv_layer_step(w.layers[0], w.config, x, state, 0, 1), ContractError);
}

TEST(DareKv, HybridCacheRowsComeFromStepTMinusDelta) {
  const auto w = init_weights(cfg(4));
  const auto& lw = w.layers[0];
  ReuseState state(w.config, opts(ReuseMode::kv), {0.3});
  Rng rng(6);
  std::vector<Matrix> inputs{random_input(5, 4, rng)};
  for (int t = 1; t < 12; ++t) inputs.push_back(perturb_rows(inputs.back(), {static_cast<std::size_t>(t % 5)}, rng));
  std::size_t reused_total = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const auto r = dare_kv_layer_step(lw, w.config, inputs[t], state, 0, t);
    const auto& delta = state.staleness(0);
    for (std::size_t i = 0; i < 5; ++i) {
      const Matrix& src = inputs[t - delta[i]];
      std::vector<double> k(4);
      matmul_row(src.row(i), lw.w_k, k);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(state.cache(0).k(i, c), k[c]);
    }
    reused_total += r.decision.reused.size();
  }
  EXPECT_GT(reused_total, 0u);
}

TEST(DareO, DisabledMatchesFullForwardBitwise) {
  const auto w = init_weights(cfg(4));
  ReuseState state(w.config, opts(ReuseMode::o), {std::nullopt});
  Rng rng(7);
  Matrix x = random_input(3, 4, rng);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto r = dare_o_layer_step(w.layers[0], w.config, x, state, 0, t);
    EXPECT_EQ(r.acts.o, forward_full(w, x).layers[0].o);
    x = perturb_rows(x, {t % 3}, rng);
  }
}

TEST(DareO, TotalReuseReturnsPreviousOutput) {
  const auto w = init_weights(cfg(4));
  ReuseState state(w.config, opts(ReuseMode::o), {std::nullopt});
  Rng rng(8);
  const Matrix x0 = random_input(3, 4, rng);
  const auto r0 = dare_o_layer_step(w.layers[0], w.config, x0, state, 0, 0);
  const std::vector<std::size_t> all{0, 1, 2};
  const auto r1 = dare_o_layer_step(w.layers[0], w.config, random_input(3, 4, rng), state, 0, 1, &all);
  for (std::size_t i = 0; i < r0.acts.o.size(); ++i) EXPECT_NEAR(r1.acts.o.data()[i], r0.acts.o.data()[i], 1e-12);
}

TEST(DareO, ForcedRowMatchesPerRowOracle) {
  const auto w = init_weights(cfg(4));
  const auto& lw = w.layers[0];
  ReuseState state(w.config, opts(ReuseMode::o), {std::nullopt});
  Rng rng(9);
  const Matrix x0 = random_input(3, 4, rng);
  const Matrix x1 = random_input(3, 4, rng);
  const auto r0 = dare_o_layer_step(lw, w.config, x0, state, 0, 0);
  const std::vector<std::size_t> forced{1};
  const auto r1 = dare_o_layer_step(lw, w.config, x1, state, 0, 1, &forced);

  Matrix attn = forward_full(w, x1).layers[0].attn;
  for (std::size_t c = 0; c < 4; ++c) attn(1, c) = r0.acts.attn(1, c);
  const Matrix o = matmul(attn, lw.w_o);
  for (std::size_t i = 0; i < o.size(); ++i) EXPECT_NEAR(r1.acts.o.data()[i], o.data()[i], 1e-12);
}

TEST(DareO, WrongModeThrows) {
  const auto w = init_weights(cfg(4));
  ReuseState kv(w.config, opts(ReuseMode::kv), {});
  ReuseState o(w.config, opts(ReuseMode::o), {});
  Rng rng(10);
  const Matrix x = random_input(3, 4, rng);
  EXPECT_THROW(dare_o_layer_step(w.layers[0], w.config, x, kv, 0, 0), ContractError);
  EXPECT_THROW(dare_kv_layer_step(w.layers[0], w.config, x, o, 0, 0), ContractError);
}

TEST(ForwardReuse, FullModeMatchesForwardFullBitwise) {
  const auto w = init_weights(cfg(8, 3, 2));
  ReuseState state(w.config, opts(ReuseMode::full), {});
  Rng rng(11);
  Matrix x = random_input(5, 8, rng);
  for (std::size_t t = 0; t < 3; ++t) {
    const auto r = forward_reuse(w, x, state, t);
    const auto f = forward_full(w, x);
    EXPECT_EQ(r.result.probs, f.probs);
    for (const auto& d : r.decisions) EXPECT_TRUE(d.gated);
    x = perturb_rows(x, {t}, rng);
  }
}

TEST(ForwardReuse, RefreshStepsAndSkippedLayersRecompute) {
  const auto w = init_weights(cfg(8, 3, 1));
  ReuseState state(w.config, opts(ReuseMode::kv, 2, 1), {2.0, 2.0, 2.0});
  Rng rng(12);
  const Matrix x = random_input(4, 8, rng);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto r = forward_reuse(w, x, state, t);
    for (const auto& d : r.decisions) {
      const bool expect_reuse = d.layer >= 1 && t % 2 == 1;
      EXPECT_EQ(!d.gated, expect_reuse) << "layer " << d.layer << " step " << t;
      EXPECT_EQ(d.reused.size(), expect_reuse ? 4u : 0u);
    }
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t s : state.staleness(l)) EXPECT_LE(s, 1u);
    }
  }
}

TEST(ForwardReuse, StalenessMonotoneInTauOnReplayedInputs) {
  const auto w = init_weights(cfg(8));
  Rng rng(13);
  std::vector<Matrix> inputs{random_input(6, 8, rng)};
  for (int t = 1; t < 10; ++t) {
    Matrix next = inputs.back();
    // small random nudges so drift varies continuously
    const Matrix noise = dare::testing::random_matrix(6, 8, rng, 0.3);
    inputs.push_back(row_normalize_sqrt_d(add(next, noise)));
  }
  std::vector<double> prev_norms;
  for (double tau : {0.0, 0.02, 0.05, 0.1, 0.3, 1.0}) {
    ReuseState state(w.config, opts(ReuseMode::kv), {tau});
    std::vector<double> norms;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      forward_reuse(w, inputs[t], state, t);
      norms.push_back(state.staleness_l2(0));
    }
    if (!prev_norms.empty()) {
      for (std::size_t t = 0; t < norms.size(); ++t) EXPECT_GE(norms[t], prev_norms[t]);
    }
    prev_norms = norms;
  }
}

TEST(ReuseState, ThresholdCountMustMatchLayers) {
  EXPECT_THROW(ReuseState(cfg(4, 2), opts(ReuseMode::kv), {0.1}), ContractError);
  EXPECT_NO_THROW(ReuseState(cfg(4, 2), opts(ReuseMode::kv), {}));
}

TEST(ReuseMode, StringRoundTrip) {
  for (auto m : {ReuseMode::full, ReuseMode::kv, ReuseMode::o}) EXPECT_EQ(reuse_mode_from_string(to_string(m)), m);
  EXPECT_THROW(reuse_mode_from_string("qkv"), ContractError);
}
