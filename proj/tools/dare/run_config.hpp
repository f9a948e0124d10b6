#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dare/model.hpp"
#include "dare/reuse.hpp"
#include "dare/sampler.hpp"

namespace dare::cli {

struct DriftSettings {
  double phi_bar = 0.3;
  double epsilon = 1.0;
  /// Same threshold at every layer instead of a calibrated profile.
  std::optional<double> tau;
  bool per_head = false;
  std::size_t calibration_prompts = 8;
};

struct ReuseSettings {
  ReuseMode mode = ReuseMode::full;
  std::size_t skip_first_layers = 0;
  std::optional<std::size_t> refresh_interval;  // unset: only step 0 refreshes
};

struct PathSettings {
  std::filesystem::path weights = "weights.dare";
  std::filesystem::path profile;  // default: <output_dir>/profile.json
  std::filesystem::path output_dir = "out";
};

struct VerifySettings {
  std::size_t trials = 50;
  std::size_t steps = 8;
  std::vector<double> taus{0.01, 0.05, 0.1};
  std::size_t softmax_pairs = 1000;
  bool debug_zero_g = false;
};

struct BenchSettings {
  std::vector<double> phi_grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::size_t coupled_trials = 10;
};

struct RunConfig {
  ModelConfig model;
  SamplerConfig sampler;
  DriftSettings drift;
  ReuseSettings reuse;
  PathSettings paths;
  VerifySettings verify;
  BenchSettings bench;

  void validate() const;
  std::filesystem::path profile_path() const;
  ReuseOptions reuse_options() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dare::cli
