#include <benchmark/benchmark.h>

#include "dare/linalg.hpp"
#include "dare/model.hpp"
#include "dare/reuse.hpp"
#include "dare/sampler.hpp"
#include "dare/theory.hpp"

using namespace dare;

namespace {

ModelConfig config(std::size_t d, std::size_t layers = 4) {
  ModelConfig c;
  c.layers = layers;
  c.heads = d >= 16 ? 2 : 1;
  c.d_model = d;
  c.d_int = 4 * d;
  c.n_vocab = 64;
  c.block_len = 8;
  c.seed = 1;
  return c;
}

Matrix window_input(const ModelWeights& w, std::size_t n) {
  Rng rng(7);
  return embed_tokens(w, random_prompt(w, n, rng));
}

void BM_ForwardFull(benchmark::State& state) {
  const auto w = init_weights(config(static_cast<std::size_t>(state.range(0))));
  const Matrix x = window_input(w, static_cast<std::size_t>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(forward_full(w, x));
}
BENCHMARK(BM_ForwardFull)->Args({16, 32})->Args({32, 64})->Args({64, 128});

// Reuse step with every token under threshold: the steady-state cost when
// the cache is warm.
void reuse_step(benchmark::State& state, ReuseMode mode) {
  const auto w = init_weights(config(static_cast<std::size_t>(state.range(0))));
  const Matrix x = window_input(w, static_cast<std::size_t>(state.range(1)));
  ReuseOptions o;
  o.mode = mode;
  ReuseState rs(w.config, o, std::vector<Threshold>(w.config.layers, 2.0));
  forward_reuse(w, x, rs, 0);
  for (auto _ : state) benchmark::DoNotOptimize(forward_reuse(w, x, rs, 1));
}
void BM_ForwardReuseKv(benchmark::State& state) { reuse_step(state, ReuseMode::kv); }
void BM_ForwardReuseO(benchmark::State& state) { reuse_step(state, ReuseMode::o); }
BENCHMARK(BM_ForwardReuseKv)->Args({16, 32})->Args({32, 64})->Args({64, 128});
BENCHMARK(BM_ForwardReuseO)->Args({16, 32})->Args({32, 64})->Args({64, 128});

void BM_CoupledGenerate(benchmark::State& state) {
  const auto w = init_weights(config(8, 1));
  ReuseOptions o;
  o.mode = ReuseMode::kv;
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(coupled_generate(w, 8, {0.05}, o, rng));
}
BENCHMARK(BM_CoupledGenerate);

void BM_SpectralNorm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  Matrix m(n, n);
  for (double& v : m.data()) v = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(spectral_norm(m));
}
BENCHMARK(BM_SpectralNorm)->Arg(8)->Arg(32)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
