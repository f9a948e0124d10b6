#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dare/drift.hpp"
#include "dare/model.hpp"
#include "dare/sampler.hpp"
#include "dare/theory.hpp"
#include "run_config.hpp"

namespace dare::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitViolations = 1;
inline constexpr int kExitUsage = 2;

struct Calibration {
  DriftProfile profile;
  /// Every drift score seen at each layer, in generation order.
  std::vector<std::vector<double>> layer_scores;
};

/// Full-mode generations over seeded random prompts; statistics per layer.
Calibration calibrate_profile(const ModelWeights& weights, const RunConfig& config);
/// Profile for a different phi_bar from the same calibration scores.
DriftProfile reallocate(const Calibration& cal, double phi_bar, double epsilon);

/// Per-layer thresholds for a generation: the tau override, the profile on
/// disk, or all-disabled in full mode.
std::vector<Threshold> resolve_thresholds(const RunConfig& config, std::size_t layers);

/// Prompt used by generate/analyze/bench, derived from the sampler seed.
std::vector<std::size_t> run_prompt(const ModelWeights& weights, const RunConfig& config);

struct BenchRow {
  double phi_bar = 0;
  double reuse_fraction = 0;
  double saved_flop_fraction = 0;
  std::optional<double> mean_coupled_error;  // single-layer, single-head only
};

std::vector<BenchRow> run_bench(const ModelWeights& weights, const RunConfig& config);

struct AnalyzeOptions {
  std::size_t block = 0;
};

// Each command writes its outputs under config.paths and returns an exit code.
// Errors are thrown as dare::Error and mapped to kExitUsage by the caller.
int cmd_init_model(const RunConfig& config, std::ostream& log);
int cmd_calibrate(const RunConfig& config, std::ostream& log);
int cmd_generate(const RunConfig& config, std::ostream& log);
int cmd_verify(const RunConfig& config, std::ostream& log);
int cmd_analyze(const RunConfig& config, const AnalyzeOptions& options, std::ostream& log);
int cmd_bench(const RunConfig& config, std::ostream& log);

/// JSON-lines record of every (step, layer) reuse decision.
std::string trace_jsonl(const GenerationTrace& trace);
nlohmann::json theory_report_json(const TheoryReport& r);

}  // namespace dare::cli
