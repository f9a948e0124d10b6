#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "dare/linalg.hpp"

namespace dare {

/// Per-layer reuse threshold. std::nullopt means reuse is disabled.
using Threshold = std::optional<double>;

/// How a token's drift is scored when a layer has several heads.
enum class ScoreSource {
  head0,      // query slice of head 0 only (default)
  all_heads,  // max drift over heads, for ablation
};

/// 1 - cos(x_t, x_prev), in [0, 2]. Throws on a zero vector.
double drift_score(std::span<const double> x_t, std::span<const double> x_prev);

/// Per-token drift between two full query matrices (window x d). Rows where
/// either vector is zero score NaN, which never satisfies a threshold.
std::vector<double> token_drift_scores(const Matrix& q_t, const Matrix& q_prev, std::size_t heads,
                                       ScoreSource source);

/// Query matrices of one generation window: [step][layer], each window x d_head
/// (the head-0 slice).
using QueryTrace = std::vector<std::vector<Matrix>>;

struct LayerwiseDrift {
  std::vector<double> s_layer;
  std::size_t counted_pairs = 0;
  std::size_t skipped_pairs = 0;
};

/// Mean drift over every (step, token) pair of consecutive steps, per layer.
LayerwiseDrift layerwise_drift(std::span<const QueryTrace> traces);

struct QuantileAllocation {
  std::vector<double> raw;  // L * phi_bar * softmax(-s / epsilon), before clamping
  std::vector<double> phi;  // clamped to [0, 1]
  std::size_t clamp_events = 0;
};

/// phi_l = L * phi_bar * softmax(-s / epsilon)_l, clamped into [0, 1].
QuantileAllocation allocate_quantiles(std::span<const double> s_layer, double phi_bar,
                                      double epsilon);

/// Lower quantile: the k-th smallest score with k = floor(phi * n). k = 0
/// disables reuse.
Threshold quantile_threshold(std::span<const double> scores, double phi);

/// Indices whose drift does not exceed tau. Empty when tau is disabled.
std::vector<std::size_t> reuse_set(std::span<const double> scores, Threshold tau);
/// Convenience overload for single-head queries.
std::vector<std::size_t> reuse_set(const Matrix& q_t, const Matrix& q_prev, Threshold tau);

/// Calibrated per-layer statistics, quantiles and thresholds.
struct DriftProfile {
  double phi_bar = 0.3;
  double epsilon = 1.0;
  std::vector<double> s_layer;
  std::vector<double> phi_layer;
  std::vector<Threshold> tau_layer;
  std::size_t skipped_pairs = 0;
  std::size_t clamp_events = 0;

  std::size_t layers() const { return tau_layer.size(); }
  /// Same threshold at every layer, e.g. a manual override.
  static DriftProfile uniform(std::size_t layers, Threshold tau);

  bool operator==(const DriftProfile&) const = default;
};

/// Builds a profile from per-layer calibration scores (every drift score seen
/// at that layer) and the layerwise means.
DriftProfile build_profile(const LayerwiseDrift& drift,
                           std::span<const std::vector<double>> layer_scores, double phi_bar,
                           double epsilon);

}  // namespace dare
