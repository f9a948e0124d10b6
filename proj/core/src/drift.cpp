#include "dare/drift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dare/error.hpp"

namespace dare {

double drift_score(std::span<const double> x_t, std::span<const double> x_prev) {
  // identical rows score exactly zero; rounding in cosine would leave ~1e-16
  if (std::equal(x_t.begin(), x_t.end(), x_prev.begin(), x_prev.end())) return 0.0;
  return std::clamp(1.0 - cosine(x_t, x_prev), 0.0, 2.0);
}

namespace {

double safe_drift(std::span<const double> a, std::span<const double> b) {
  if (norm2(a) == 0.0 || norm2(b) == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return drift_score(a, b);
}

}  // namespace

std::vector<double> token_drift_scores(const Matrix& q_t, const Matrix& q_prev, std::size_t heads,
                                       ScoreSource source) {
  if (q_t.rows() != q_prev.rows() || q_t.cols() != q_prev.cols()) {
    throw ContractError("token_drift_scores: shape mismatch");
  }
  if (heads == 0 || q_t.cols() % heads != 0) throw ContractError("token_drift_scores: bad head count");
  const std::size_t dh = q_t.cols() / heads;
  std::vector<double> scores(q_t.rows());
  if (source == ScoreSource::head0) {
    for (std::size_t i = 0; i < q_t.rows(); ++i) {
      scores[i] = safe_drift(q_t.row(i).subspan(0, dh), q_prev.row(i).subspan(0, dh));
    }
    return scores;
  }
  for (std::size_t i = 0; i < q_t.rows(); ++i) {
    double worst = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      const double s = safe_drift(q_t.row(i).subspan(h * dh, dh), q_prev.row(i).subspan(h * dh, dh));
      if (std::isnan(s)) {
        worst = s;
        break;
      }
      worst = std::max(worst, s);
    }
    scores[i] = worst;
  }
  return scores;
}

LayerwiseDrift layerwise_drift(std::span<const QueryTrace> traces) {
  if (traces.empty()) throw ContractError("layerwise_drift: empty calibration set");
  std::size_t layers = 0;
  for (const auto& trace : traces) {
    if (trace.size() < 2) throw ContractError("layerwise_drift: a trace has fewer than 2 steps");
    layers = std::max(layers, trace.front().size());
  }
  if (layers == 0) throw ContractError("layerwise_drift: traces hold no layers");

  LayerwiseDrift out;
  std::vector<double> sums(layers, 0.0);
  std::vector<std::size_t> counts(layers, 0);
  for (const auto& trace : traces) {
    for (std::size_t t = 1; t < trace.size(); ++t) {
      if (trace[t].size() != layers || trace[t - 1].size() != layers) {
        throw ContractError("layerwise_drift: inconsistent layer count");
      }
      for (std::size_t l = 0; l < layers; ++l) {
        const Matrix& cur = trace[t][l];
        const Matrix& prev = trace[t - 1][l];
        if (cur.rows() != prev.rows() || cur.cols() != prev.cols()) {
          throw ContractError("layerwise_drift: shape change between steps");
        }
        for (std::size_t i = 0; i < cur.rows(); ++i) {
          const double s = safe_drift(cur.row(i), prev.row(i));
          if (std::isnan(s)) {
            ++out.skipped_pairs;
            continue;
          }
          sums[l] += s;
          ++counts[l];
          ++out.counted_pairs;
        }
      }
    }
  }
  out.s_layer.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    out.s_layer[l] = counts[l] == 0 ? 0.0 : sums[l] / static_cast<double>(counts[l]);
  }
  return out;
}

QuantileAllocation allocate_quantiles(std::span<const double> s_layer, double phi_bar,
                                      double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("allocate_quantiles: epsilon must be > 0");
  if (!(phi_bar >= 0.0 && phi_bar <= 1.0)) {
    throw ContractError("allocate_quantiles: phi_bar must lie in [0, 1]");
  }
  std::vector<double> logits(s_layer.size());
  for (std::size_t l = 0; l < s_layer.size(); ++l) logits[l] = -s_layer[l] / epsilon;
  const auto weights = softmax(logits);

  QuantileAllocation out;
  const double budget = static_cast<double>(s_layer.size()) * phi_bar;
  out.raw.resize(s_layer.size());
  out.phi.resize(s_layer.size());
  for (std::size_t l = 0; l < s_layer.size(); ++l) {
    out.raw[l] = budget * weights[l];
    out.phi[l] = std::clamp(out.raw[l], 0.0, 1.0);
    if (out.phi[l] != out.raw[l]) ++out.clamp_events;
  }
  return out;
}

Threshold quantile_threshold(std::span<const double> scores, double phi) {
  if (scores.empty()) throw ContractError("quantile_threshold: no scores");
  if (!(phi >= 0.0 && phi <= 1.0)) throw ContractError("quantile_threshold: phi must lie in [0, 1]");
  // The small slack keeps products like 0.29 * 100 from flooring to 28.
  const auto k = static_cast<std::size_t>(std::floor(phi * static_cast<double>(scores.size()) + 1e-9));
  if (k == 0) return std::nullopt;
  std::vector<double> sorted;
  sorted.reserve(scores.size());
  for (double s : scores) {
    if (!std::isnan(s)) sorted.push_back(s);
  }
  if (sorted.empty()) return std::nullopt;
  std::stable_sort(sorted.begin(), sorted.end());
  return sorted[std::min(k, sorted.size()) - 1];
}

std::vector<std::size_t> reuse_set(std::span<const double> scores, Threshold tau) {
  std::vector<std::size_t> out;
  if (!tau) return out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] <= *tau) out.push_back(i);  // false for NaN
  }
  return out;
}

std::vector<std::size_t> reuse_set(const Matrix& q_t, const Matrix& q_prev, Threshold tau) {
  return reuse_set(token_drift_scores(q_t, q_prev, 1, ScoreSource::head0), tau);
}

DriftProfile DriftProfile::uniform(std::size_t layers, Threshold tau) {
  DriftProfile p;
  p.s_layer.assign(layers, 0.0);
  p.phi_layer.assign(layers, 0.0);
  p.tau_layer.assign(layers, tau);
  return p;
}

DriftProfile build_profile(const LayerwiseDrift& drift,
                           std::span<const std::vector<double>> layer_scores, double phi_bar,
                           double epsilon) {
  if (layer_scores.size() != drift.s_layer.size()) {
    throw ContractError("build_profile: layer count mismatch");
  }
  const auto alloc = allocate_quantiles(drift.s_layer, phi_bar, epsilon);
  DriftProfile p;
  p.phi_bar = phi_bar;
  p.epsilon = epsilon;
  p.s_layer = drift.s_layer;
  p.phi_layer = alloc.phi;
  p.skipped_pairs = drift.skipped_pairs;
  p.clamp_events = alloc.clamp_events;
  p.tau_layer.reserve(layer_scores.size());
  for (std::size_t l = 0; l < layer_scores.size(); ++l) {
    p.tau_layer.push_back(layer_scores[l].empty()
                              ? std::nullopt
                              : quantile_threshold(layer_scores[l], alloc.phi[l]));
  }
  return p;
}

}  // namespace dare
