#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "dare/model.hpp"
#include "dare/reuse.hpp"
#include "dare/rng.hpp"

namespace dare {

struct SamplerConfig {
  std::size_t gen_length = 16;
  std::size_t block_size = 4;
  std::size_t steps_per_block = 4;
  std::size_t tokens_per_step = 1;
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 1;
  /// Random prompt tokens placed before the generated blocks.
  std::size_t prompt_length = 0;

  void validate() const;
  std::size_t blocks() const { return gen_length / block_size; }
  bool operator==(const SamplerConfig&) const = default;
};

/// One denoising step of one block.
struct StepRecord {
  std::size_t block = 0;
  std::size_t step = 0;     // block-local
  std::size_t window = 0;   // tokens attended over
  std::vector<std::size_t> tokens;  // window contents fed to the model
  std::vector<std::size_t> unmasked;  // window indices frozen at this step
  std::vector<ReuseDecision> decisions;  // per layer
  std::uint64_t flops_full = 0;
  std::uint64_t flops_actual = 0;
  /// Filled only when activations are recorded.
  std::vector<LayerActivations> activations;
};

struct GenerationTrace {
  ReuseMode mode = ReuseMode::full;
  std::size_t layers = 0;
  std::vector<StepRecord> steps;

  /// Reused token-layer-steps.
  std::size_t reused_slots() const;
  /// Token-layer-steps where reuse was allowed (not gated).
  std::size_t eligible_slots() const;
  std::size_t gated_slots() const;
  /// reused / eligible, 0 when nothing was eligible.
  double reuse_fraction() const;
  std::uint64_t flops_full() const;
  std::uint64_t flops_actual() const;
};

struct GenerationResult {
  std::vector<std::size_t> prompt;
  std::vector<std::size_t> tokens;  // generated part only
  GenerationTrace trace;
};

/// Samples (j, j_hat) with marginals p and q and P(j == j_hat) = sum min(p, q).
/// Always consumes exactly three uniforms.
std::pair<std::size_t, std::size_t> maximal_coupling_sample(std::span<const double> p,
                                                            std::span<const double> q, Rng& rng);

/// Inverse-CDF draw from a probability vector.
std::size_t sample_categorical(std::span<const double> p, double u);

/// Random non-mask tokens.
std::vector<std::size_t> random_prompt(const ModelWeights& weights, std::size_t length, Rng& rng);

/// Blockwise masked-diffusion decoding with confidence top-k unmasking.
GenerationResult diffusion_generate(const ModelWeights& weights, const SamplerConfig& config,
                                    std::span<const std::size_t> prompt,
                                    const std::vector<Threshold>& tau_layer,
                                    const ReuseOptions& options, bool record_activations = false);

struct CoupledPair {
  std::vector<std::size_t> full_tokens;
  std::vector<std::size_t> reuse_tokens;
  /// sum_i ||x_i - x_hat_i|| before each step and after the last (T + 1 values).
  std::vector<double> per_step_embed_error;
  /// sum_i ||p_i(X_hat) - p_hat_i(X_hat)||_1 per step.
  std::vector<double> per_step_l1_gap;
  /// Layer-0 staleness of every token after each step's reuse decision.
  std::vector<std::vector<std::size_t>> staleness;
  std::vector<ReuseDecision> decisions;  // layer 0, one per step
};

/// Runs the full model on X and the reuse model on X_hat in lockstep for
/// `steps` steps over one window of block_len tokens, starting from all-mask.
/// Every position is redrawn at every step through a maximal coupling of the
/// two branches' distributions. The reuse branch must not be in full mode.
CoupledPair coupled_generate(const ModelWeights& weights, std::size_t steps,
                             const std::vector<Threshold>& tau_layer, const ReuseOptions& options,
                             Rng& rng);

}  // namespace dare
