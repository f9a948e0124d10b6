#include "dare/analysis.hpp"

#include <cmath>
#include <iomanip>

#include "dare/error.hpp"

namespace dare {

namespace {

void check_series(std::span<const Matrix> series, const char* what) {
  if (series.size() < 2) throw ContractError(std::string(what) + ": need at least 2 matrices");
  for (const auto& m : series) {
    if (m.rows() != series.front().rows() || m.cols() != series.front().cols()) {
      throw ContractError(std::string(what) + ": inconsistent shapes");
    }
  }
}

double mean_row_cosine(const Matrix& a, const Matrix& b, std::size_t first, std::size_t last) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t r = first; r < last; ++r) {
    if (norm2(a.row(r)) == 0.0 || norm2(b.row(r)) == 0.0) continue;
    sum += cosine(a.row(r), b.row(r));
    ++count;
  }
  return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

SimilarityMatrix pairwise(std::span<const Matrix> series, SimilarityAxis axis, std::size_t first,
                          std::size_t last) {
  const std::size_t n = series.size();
  SimilarityMatrix s;
  s.axis = axis;
  s.entries = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s.entries(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = mean_row_cosine(series[i], series[j], first, last);
      s.entries(i, j) = c;
      s.entries(j, i) = c;
    }
  }
  return s;
}

}  // namespace

SimilarityMatrix temporal_similarity(std::span<const Matrix> series) {
  check_series(series, "temporal_similarity");
  return pairwise(series, SimilarityAxis::timestep, 0, series.front().rows());
}

SimilarityMatrix temporal_similarity_token(std::span<const Matrix> series, std::size_t token) {
  check_series(series, "temporal_similarity_token");
  if (token >= series.front().rows()) throw ContractError("temporal_similarity_token: token out of range");
  return pairwise(series, SimilarityAxis::timestep, token, token + 1);
}

SimilarityMatrix cross_layer_similarity(std::span<const Matrix> caches) {
  check_series(caches, "cross_layer_similarity");
  return pairwise(caches, SimilarityAxis::layer, 0, caches.front().rows());
}

DriftHistogram histogram_scores(std::span<const double> scores, Threshold tau) {
  DriftHistogram h;
  h.tau = tau;
  h.bins.assign(kHistogramBins, 0);
  const double width = (h.hi - h.lo) / static_cast<double>(kHistogramBins);
  for (double s : scores) {
    if (std::isnan(s)) {
      ++h.skipped;
      continue;
    }
    ++h.total;
    if (s < kZeroModeCutoff) {
      ++h.zero_mode;
      continue;
    }
    auto b = static_cast<std::size_t>((s - h.lo) / width);
    if (b >= kHistogramBins) b = kHistogramBins - 1;  // s == 2 lands in the last bin
    ++h.bins[b];
  }
  return h;
}

DriftHistogram drift_histogram(const GenerationTrace& trace, std::size_t layer, Threshold tau) {
  if (layer >= trace.layers) throw ContractError("drift_histogram: layer out of range");
  std::vector<double> scores;
  for (const auto& step : trace.steps) {
    const auto& d = step.decisions.at(layer);
    scores.insert(scores.end(), d.scores.begin(), d.scores.end());
  }
  auto h = histogram_scores(scores, tau);
  h.layer = layer;
  return h;
}

FlopReport flops_for_trace(const GenerationTrace& trace, const ModelConfig& config) {
  const CostModel cost(config);
  FlopReport r;
  for (const auto& step : trace.steps) {
    const std::uint64_t n = step.window;
    for (const auto& d : step.decisions) {
      r.full_flops += cost.full_layer(n);
      std::uint64_t saved = 0;
      for (std::size_t k = 0; k < d.reused.size(); ++k) {
        if (trace.mode == ReuseMode::kv) saved += cost.kv_saving();
        if (trace.mode == ReuseMode::o) saved += cost.o_saving(n);
      }
      r.actual_flops += cost.full_layer(n) - saved;
    }
  }
  r.saved_fraction = r.full_flops == 0
                         ? 0.0
                         : 1.0 - static_cast<double>(r.actual_flops) / static_cast<double>(r.full_flops);
  return r;
}

void write_matrix_csv(std::ostream& out, const Matrix& m, const nlohmann::json& meta) {
  out << "# " << meta.dump() << '\n';
  out << std::setprecision(17);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) out << ',';
      out << m(r, c);
    }
    out << '\n';
  }
}

void write_histogram_csv(std::ostream& out, const DriftHistogram& h, const nlohmann::json& meta) {
  out << "# " << meta.dump() << '\n';
  out << "bin_lo,bin_hi,count\n";
  out << std::setprecision(17);
  out << 0.0 << ',' << kZeroModeCutoff << ',' << h.zero_mode << '\n';
  const double width = (h.hi - h.lo) / static_cast<double>(h.bins.size());
  for (std::size_t b = 0; b < h.bins.size(); ++b) {
    out << h.lo + width * static_cast<double>(b) << ',' << h.lo + width * static_cast<double>(b + 1)
        << ',' << h.bins[b] << '\n';
  }
}

}  // namespace dare
