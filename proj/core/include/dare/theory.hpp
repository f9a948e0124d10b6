#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dare/drift.hpp"
#include "dare/model.hpp"
#include "dare/reuse.hpp"
#include "dare/rng.hpp"

namespace dare {

// Error bounds for the single-layer, single-head model. Every function here
// throws RegimeError for other configurations.
//
// Layer inputs have row norm sqrt(d), so the input radius is sqrt(d) while the
// embedding radius ||E||_{2->inf} is 1 after initialisation.

struct WeightNorms {
  double d = 0;
  double block_len = 0;
  double g_sigma = 0;
  double e_2_inf = 0;
  double e_2_1 = 0;  // sum of row norms
  double w_q = 0, w_k = 0, w_v = 0, w_o = 0, w_u = 0, w_d = 0;          // spectral
  double w_q_f = 0, w_k_f = 0, w_v_f = 0, w_o_f = 0;                    // Frobenius
  double kappa_q = 1;
};

WeightNorms weight_norms(const ModelWeights& weights);

/// Lipschitz constant of X -> (p_1..p_B) from sum_j ||x_j - x'_j|| to
/// sum_i ||p_i - p'_i||_1:
/// ||E||_{2->1} ||W_D|| G_s ||W_U|| ||W_O|| ||W_V|| B (2 r^2 ||W_Q|| ||W_K|| / sqrt(d) + 1)
/// with r = sqrt(d) the input row norm.
double lipschitz_G(const ModelWeights& weights);
double lipschitz_G(const WeightNorms& n);

/// 2 tau d kappa^2 / (2 + tau (kappa^2 - 1))
double tau_tilde(double tau, double d, double kappa_q);
/// Squared-distance bound between two inputs of norm sqrt(d) whose queries
/// have drift <= tau: 4 d tau kappa^2 / (2 + tau (kappa^2 - 1)) = 2 tau_tilde.
double x_diff_bound(double tau, double d, double kappa_q);

/// sqrt(2) B ||E||_{2->inf} ||W_D|| G_s ||W_U|| ||W_O|| (||W_V|| + ||W_V|| ||W_Q|| / sqrt(d))
double kv_constant(const WeightNorms& n);
/// kv_constant * sqrt(tau_tilde) * ||Delta||_2
double kv_step_bound(const ModelWeights& weights, double tau, double delta_l2);
double kv_step_bound(const WeightNorms& n, double tau, double delta_l2);

/// Output-reuse bound for one step: query, key and value difference terms
/// summed over every token with delta_i > 0.
double o_step_bound(const ModelWeights& weights, double tau, std::span<const std::size_t> delta);
double o_step_bound(const WeightNorms& n, double tau, std::span<const std::size_t> delta);

/// e_0 = 0, e_{t+1} = G e_t + b_t. Returns every e_t (size T + 1).
std::vector<double> cumulative_series(double G, std::span<const double> per_step);
/// e_T of cumulative_series.
double cumulative_bound(double G, std::span<const double> per_step);

/// ||softmax(z) - softmax(z')||_1
double softmax_l1_gap(std::span<const double> z, std::span<const double> z2);

struct VerifyOptions {
  std::size_t trials = 50;
  std::size_t steps = 8;
  std::size_t softmax_pairs = 1000;
  std::uint64_t seed = 1;
  double tolerance = 1e-9;
  /// Sabotage control: pretend G = 0 in the cumulative recursion.
  bool debug_zero_g = false;
};

struct TheoryReport {
  ReuseMode mode = ReuseMode::kv;
  Threshold tau;
  std::size_t trials = 0;
  double G = 0;
  double kappa_q = 1;
  double tau_tilde = 0;
  double C_W = 0;
  /// Trial means, one entry per step.
  std::vector<double> per_step_bound;
  std::vector<double> per_step_empirical;
  /// Largest per-trial gap minus bound at each step (<= 0 when it holds).
  std::vector<double> per_step_worst_slack;
  /// T + 1 entries each.
  std::vector<double> cumulative_bound;
  std::vector<double> cumulative_empirical;
  double mean_reuse_fraction = 0;
  std::size_t per_step_violations = 0;
  std::size_t cumulative_violations = 0;
  std::size_t softmax_checks = 0;
  std::size_t softmax_violations = 0;
  std::size_t violations = 0;
};

/// Runs coupled generation `trials` times and checks the per-step bound, the
/// cumulative recursion and softmax Lipschitz spot checks.
TheoryReport verify_run(const ModelWeights& weights, const std::vector<Threshold>& tau_layer,
                        const ReuseOptions& options, const VerifyOptions& verify);

struct GeometricCheck {
  std::size_t accepted = 0;
  std::size_t proposed = 0;
  std::size_t violations = 0;
  double max_ratio = 0;  // largest ||x - y||^2 / bound seen
  double kappa = 1;      // condition number actually realised by W_Q
};

/// d x d matrix U diag(sigma) V^T with random orthogonal U, V and singular
/// values spread geometrically from 1 to kappa.
Matrix random_matrix_with_kappa(std::size_t d, double kappa, Rng& rng);

/// Rejection-samples pairs x, y of norm sqrt(d) until `accepted` pairs have
/// query drift <= tau under w_q, and checks ||x - y||^2 against x_diff_bound.
GeometricCheck geometric_lemma_check(const Matrix& w_q, double tau, std::size_t accepted, Rng& rng);

}  // namespace dare
