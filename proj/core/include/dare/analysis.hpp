#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dare/cost.hpp"
#include "dare/linalg.hpp"
#include "dare/sampler.hpp"

namespace dare {

enum class SimilarityAxis { timestep, layer };

struct SimilarityMatrix {
  SimilarityAxis axis = SimilarityAxis::timestep;
  Matrix entries;  // n x n cosines
  std::size_t n() const { return entries.rows(); }
};

/// Entry (i, j): mean over tokens of cos(series[i] row, series[j] row). Rows
/// that are zero in either matrix are left out of the mean.
SimilarityMatrix temporal_similarity(std::span<const Matrix> series);
/// Same for a single token.
SimilarityMatrix temporal_similarity_token(std::span<const Matrix> series, std::size_t token);
/// Entry (i, j): mean over tokens of cos between layer i and layer j caches.
SimilarityMatrix cross_layer_similarity(std::span<const Matrix> caches);

inline constexpr std::size_t kHistogramBins = 50;
inline constexpr double kZeroModeCutoff = 1e-6;

struct DriftHistogram {
  std::size_t layer = 0;
  double lo = 0.0;
  double hi = 2.0;
  std::vector<std::size_t> bins;  // kHistogramBins uniform bins over [lo, hi]
  std::size_t zero_mode = 0;      // scores below kZeroModeCutoff
  std::size_t total = 0;          // zero_mode + sum(bins)
  std::size_t skipped = 0;        // undefined scores (zero vectors)
  Threshold tau;

  double zero_mode_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(zero_mode) / static_cast<double>(total);
  }
};

/// Bins the given drift scores.
DriftHistogram histogram_scores(std::span<const double> scores, Threshold tau);
/// Bins every drift score the trace recorded at a layer.
DriftHistogram drift_histogram(const GenerationTrace& trace, std::size_t layer, Threshold tau);

struct FlopReport {
  std::uint64_t full_flops = 0;
  std::uint64_t actual_flops = 0;
  double saved_fraction = 0.0;
};

/// Recounts FLOPs from the trace's reuse events.
FlopReport flops_for_trace(const GenerationTrace& trace, const ModelConfig& config);

/// CSV with a leading "# {json}" metadata line, then one row per matrix row.
void write_matrix_csv(std::ostream& out, const Matrix& m, const nlohmann::json& meta);
/// CSV with columns bin_lo,bin_hi,count; the zero-mode bin comes first.
void write_histogram_csv(std::ostream& out, const DriftHistogram& h, const nlohmann::json& meta);

}  // namespace dare
