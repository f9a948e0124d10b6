#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dare/drift.hpp"
#include "dare/model.hpp"

namespace dare {

enum class ReuseMode { full, kv, o };

std::string_view to_string(ReuseMode m);
ReuseMode reuse_mode_from_string(std::string_view name);

struct ReuseOptions {
  ReuseMode mode = ReuseMode::full;
  std::size_t skip_first_layers = 0;
  /// Steps with t % refresh_interval == 0 recompute everything. The default
  /// only forces step 0.
  std::size_t refresh_interval = std::numeric_limits<std::size_t>::max();
  ScoreSource score_source = ScoreSource::head0;
};

/// True when reuse may happen at (layer, step).
bool gate(std::size_t layer, std::size_t step, std::size_t skip_first_layers,
          std::size_t refresh_interval);

/// delta_i <- 0 if refreshed, delta_i + 1 if reused.
std::vector<std::size_t> update_staleness(std::span<const std::size_t> delta,
                                          std::span<const std::size_t> reused);

struct ReuseDecision {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::vector<std::size_t> reused;
  std::vector<std::size_t> refreshed;
  /// Reuse was not allowed here: step 0, skipped layer, refresh step, or
  /// full mode.
  bool gated = true;
  /// Drift of every token against the previous step (empty at step 0).
  std::vector<double> scores;
  double staleness_l2 = 0.0;
};

/// Cached activations of one layer from the previous step.
struct LayerCache {
  Matrix q;     // full queries, always fresh
  Matrix k;     // hybrid cache (kv mode)
  Matrix v;
  Matrix attn;  // spliced pre-W_O attention output (o mode)
  bool valid = false;
};

/// Mutable reuse bookkeeping for one window of tokens. One generation owns
/// one state; call reset() whenever the window changes.
class ReuseState {
 public:
  ReuseState(const ModelConfig& config, ReuseOptions options, std::vector<Threshold> tau_layer);

  const ReuseOptions& options() const { return options_; }
  ReuseMode mode() const { return options_.mode; }
  const std::vector<Threshold>& tau_layer() const { return tau_layer_; }
  std::size_t layers() const { return caches_.size(); }

  /// Forget every cache and staleness entry (new block).
  void reset();

  LayerCache& cache(std::size_t layer) { return caches_.at(layer); }
  const LayerCache& cache(std::size_t layer) const { return caches_.at(layer); }
  /// Staleness of every token at a layer. Empty before the first step.
  const std::vector<std::size_t>& staleness(std::size_t layer) const { return staleness_.at(layer); }
  std::vector<std::size_t>& staleness(std::size_t layer) { return staleness_.at(layer); }
  /// Euclidean norm of the staleness vector at a layer.
  double staleness_l2(std::size_t layer) const;

 private:
  ReuseOptions options_;
  std::size_t heads_;
  std::vector<Threshold> tau_layer_;
  std::vector<LayerCache> caches_;
  std::vector<std::vector<std::size_t>> staleness_;
};

struct LayerStepResult {
  LayerActivations acts;  // k, v, attn hold what attention actually used
  ReuseDecision decision;
};

/// One attention block with key/value reuse. Q is always recomputed; K and V
/// rows of reused tokens come from the cache. forced_reuse replaces the
/// threshold rule (tests and oracles); it still requires a previous step.
LayerStepResult dare_kv_layer_step(const LayerWeights& weights, const ModelConfig& config,
                                   const Matrix& x, ReuseState& state, std::size_t layer,
                                   std::size_t step,
                                   const std::vector<std::size_t>* forced_reuse = nullptr);

/// One attention block with output reuse. Q, K, V are recomputed; attention
/// rows of reused tokens come from the cached pre-W_O output.
LayerStepResult dare_o_layer_step(const LayerWeights& weights, const ModelConfig& config,
                                  const Matrix& x, ReuseState& state, std::size_t layer,
                                  std::size_t step,
                                  const std::vector<std::size_t>* forced_reuse = nullptr);

struct ReuseForward {
  ForwardResult result;
  std::vector<ReuseDecision> decisions;  // one per layer
};

/// Whole layer stack for one denoising step under state's mode. In full mode
/// it matches forward_full bit for bit.
ReuseForward forward_reuse(const ModelWeights& weights, const Matrix& x, ReuseState& state,
                           std::size_t step);

}  // namespace dare
