#include "dare/reuse.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dare/error.hpp"

namespace dare {

std::string_view to_string(ReuseMode m) {
  switch (m) {
    case ReuseMode::full: return "full";
    case ReuseMode::kv: return "kv";
    case ReuseMode::o: return "o";
  }
  return "full";
}

ReuseMode reuse_mode_from_string(std::string_view name) {
  if (name == "full") return ReuseMode::full;
  if (name == "kv") return ReuseMode::kv;
  if (name == "o") return ReuseMode::o;
  throw ContractError("unknown reuse mode '" + std::string(name) + "'");
}

bool gate(std::size_t layer, std::size_t step, std::size_t skip_first_layers,
          std::size_t refresh_interval) {
  if (refresh_interval == 0) throw ContractError("gate: refresh_interval must be >= 1");
  if (layer < skip_first_layers) return false;
  return step % refresh_interval != 0;
}

std::vector<std::size_t> update_staleness(std::span<const std::size_t> delta,
                                          std::span<const std::size_t> reused) {
  std::vector<std::size_t> next(delta.size(), 0);
  for (std::size_t i : reused) {
    if (i >= delta.size()) throw ContractError("update_staleness: index out of range");
    next[i] = delta[i] + 1;
  }
  return next;
}

ReuseState::ReuseState(const ModelConfig& config, ReuseOptions options,
                       std::vector<Threshold> tau_layer)
    : options_(options), heads_(config.heads), tau_layer_(std::move(tau_layer)),
      caches_(config.layers), staleness_(config.layers) {
  config.validate();
  if (options_.refresh_interval == 0) throw ContractError("ReuseState: refresh_interval must be >= 1");
  if (tau_layer_.empty()) tau_layer_.assign(config.layers, std::nullopt);
  if (tau_layer_.size() != config.layers) {
    throw ContractError("ReuseState: " + std::to_string(tau_layer_.size()) + " thresholds for " +
                        std::to_string(config.layers) + " layers");
  }
}

void ReuseState::reset() {
  for (auto& c : caches_) c = LayerCache{};
  for (auto& s : staleness_) s.clear();
}

double ReuseState::staleness_l2(std::size_t layer) const {
  double sum = 0.0;
  for (std::size_t d : staleness_.at(layer)) sum += static_cast<double>(d) * static_cast<double>(d);
  return std::sqrt(sum);
}

namespace {

ReuseDecision decide(const ModelConfig& config, ReuseState& state, const Matrix& q,
                     std::size_t layer, std::size_t step, const std::vector<std::size_t>* forced) {
  const auto& opts = state.options();
  const LayerCache& cache = state.cache(layer);
  const std::size_t n = q.rows();
  const bool allowed = opts.mode != ReuseMode::full && step > 0 &&
                       gate(layer, step, opts.skip_first_layers, opts.refresh_interval);

  ReuseDecision dec;
  dec.layer = layer;
  dec.step = step;
  if (step > 0 && (allowed || forced) && !cache.valid) {
    throw ContractError("reuse step " + std::to_string(step) + " at layer " +
                        std::to_string(layer) + " has no previous state");
  }
  if (cache.valid && cache.q.rows() != n) {
    throw ContractError("reuse: window length changed without a reset");
  }
  if (step > 0 && cache.valid) {
    dec.scores = token_drift_scores(q, cache.q, config.heads, opts.score_source);
  }
  if (forced) {
    if (step == 0 || !cache.valid) throw ContractError("forced reuse needs a previous step");
    dec.reused = *forced;
    std::sort(dec.reused.begin(), dec.reused.end());
    dec.reused.erase(std::unique(dec.reused.begin(), dec.reused.end()), dec.reused.end());
    if (!dec.reused.empty() && dec.reused.back() >= n) throw ContractError("forced reuse index out of range");
    dec.gated = false;
  } else if (allowed) {
    dec.reused = reuse_set(dec.scores, state.tau_layer()[layer]);
    dec.gated = false;
  }
  std::vector<bool> is_reused(n, false);
  for (std::size_t i : dec.reused) is_reused[i] = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_reused[i]) dec.refreshed.push_back(i);
  }

  auto& delta = state.staleness(layer);
  if (step == 0 || delta.size() != n) delta.assign(n, 0);
  delta = update_staleness(delta, dec.reused);
  dec.staleness_l2 = state.staleness_l2(layer);
  return dec;
}

void copy_rows(const Matrix& src, std::span<const std::size_t> rows, Matrix& dst) {
  for (std::size_t i : rows) {
    auto s = src.row(i);
    std::copy(s.begin(), s.end(), dst.row(i).begin());
  }
}

}  // namespace

LayerStepResult dare_kv_layer_step(const LayerWeights& weights, const ModelConfig& config,
                                   const Matrix& x, ReuseState& state, std::size_t layer,
                                   std::size_t step, const std::vector<std::size_t>* forced_reuse) {
  if (state.mode() == ReuseMode::o) throw ContractError("dare_kv_layer_step: state is in o mode");
  const std::size_t n = x.rows();
  const std::size_t d = config.d_model;
  if (x.cols() != d) throw ContractError("dare_kv_layer_step: bad input width");
  const auto rows = all_rows(n);

  LayerStepResult r;
  r.acts.x = x;
  r.acts.q = Matrix(n, d);
  project_rows(x, weights.w_q, rows, r.acts.q);
  r.decision = decide(config, state, r.acts.q, layer, step, forced_reuse);
  const auto& dec = r.decision;

  LayerCache& cache = state.cache(layer);
  r.acts.k = Matrix(n, d);
  r.acts.v = Matrix(n, d);
  project_rows(x, weights.w_k, dec.refreshed, r.acts.k);
  project_rows(x, weights.w_v, dec.refreshed, r.acts.v);
  copy_rows(cache.k, dec.reused, r.acts.k);
  copy_rows(cache.v, dec.reused, r.acts.v);

  r.acts.attn = Matrix(n, d);
  attention_rows(r.acts.q, r.acts.k, r.acts.v, config.heads, rows, r.acts.attn);
  r.acts.o = matmul(r.acts.attn, weights.w_o);

  cache.q = r.acts.q;
  cache.k = r.acts.k;
  cache.v = r.acts.v;
  cache.valid = true;
  return r;
}

LayerStepResult dare_o_layer_step(const LayerWeights& weights, const ModelConfig& config,
                                  const Matrix& x, ReuseState& state, std::size_t layer,
                                  std::size_t step, const std::vector<std::size_t>* forced_reuse) {
  if (state.mode() != ReuseMode::o) throw ContractError("dare_o_layer_step: state is not in o mode");
  const std::size_t n = x.rows();
  const std::size_t d = config.d_model;
  if (x.cols() != d) throw ContractError("dare_o_layer_step: bad input width");
  const auto rows = all_rows(n);

  LayerStepResult r;
  r.acts.x = x;
  r.acts.q = Matrix(n, d);
  r.acts.k = Matrix(n, d);
  r.acts.v = Matrix(n, d);
  project_rows(x, weights.w_q, rows, r.acts.q);
  project_rows(x, weights.w_k, rows, r.acts.k);
  project_rows(x, weights.w_v, rows, r.acts.v);
  r.decision = decide(config, state, r.acts.q, layer, step, forced_reuse);
  const auto& dec = r.decision;

  LayerCache& cache = state.cache(layer);
  r.acts.attn = Matrix(n, d);
  attention_rows(r.acts.q, r.acts.k, r.acts.v, config.heads, dec.refreshed, r.acts.attn);
  copy_rows(cache.attn, dec.reused, r.acts.attn);
  r.acts.o = matmul(r.acts.attn, weights.w_o);

  cache.q = r.acts.q;
  cache.attn = r.acts.attn;
  cache.valid = true;
  return r;
}

ReuseForward forward_reuse(const ModelWeights& weights, const Matrix& x, ReuseState& state,
                           std::size_t step) {
  const auto& cfg = weights.config;
  if (state.layers() != cfg.layers) throw ContractError("forward_reuse: state has wrong layer count");
  if (x.cols() != cfg.d_model || x.rows() == 0) throw ContractError("forward_reuse: bad input shape");

  ReuseForward out;
  out.result.layers.reserve(cfg.layers);
  out.decisions.reserve(cfg.layers);
  Matrix input = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lw = weights.layers[l];
    auto step_result = state.mode() == ReuseMode::o
                           ? dare_o_layer_step(lw, cfg, input, state, l, step)
                           : dare_kv_layer_step(lw, cfg, input, state, l, step);
    auto& act = step_result.acts;
    act.h = mlp(lw, act.o, cfg.activation);
    if (l + 1 < cfg.layers) input = next_layer_input(input, act.h);
    out.decisions.push_back(std::move(step_result.decision));
    out.result.layers.push_back(std::move(act));
  }
  out.result.probs = output_probs(weights, out.result.layers.back().h);
  return out;
}

}  // namespace dare
