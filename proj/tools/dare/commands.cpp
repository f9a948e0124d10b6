#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "dare/analysis.hpp"
#include "dare/error.hpp"
#include "dare/serialize.hpp"
#include "dare/weights_io.hpp"

namespace dare::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPromptStream = 0x9409;
constexpr std::uint64_t kCalibrationStream = 0xCA1B0000;
constexpr std::uint64_t kCoupledStream = 0xC0C0;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Timestamps live in a sidecar so the primary outputs stay byte-identical
// across reruns.
void write_meta(const RunConfig& config, const std::string& command) {
  write_json(config.paths.output_dir / ("meta." + command + ".json"),
             {{"command", command}, {"finished_at", utc_now()}, {"config", config}});
}

ModelWeights load_checked(const RunConfig& config) {
  if (!fs::exists(config.paths.weights)) {
    throw IoError("weights file '" + config.paths.weights.string() + "' does not exist");
  }
  return load_weights(config.paths.weights);
}

nlohmann::json threshold_json(const Threshold& t) {
  return t ? nlohmann::json(*t) : nlohmann::json(nullptr);
}

}  // namespace

Calibration calibrate_profile(const ModelWeights& weights, const RunConfig& config) {
  const std::size_t layers = weights.config.layers;
  const std::size_t dh = weights.config.d_head();
  ReuseOptions opts;
  opts.mode = ReuseMode::full;
  opts.score_source = config.drift.per_head ? ScoreSource::all_heads : ScoreSource::head0;

  Calibration cal;
  cal.layer_scores.assign(layers, {});
  std::vector<QueryTrace> traces;
  for (std::size_t p = 0; p < config.drift.calibration_prompts; ++p) {
    Rng prng(mix_seed(config.sampler.seed, kCalibrationStream + 2 * p));
    const auto prompt = random_prompt(weights, config.sampler.prompt_length, prng);
    SamplerConfig sc = config.sampler;
    sc.seed = mix_seed(config.sampler.seed, kCalibrationStream + 2 * p + 1);
    const auto gen = diffusion_generate(weights, sc, prompt, {}, opts, true);

    std::size_t current_block = SIZE_MAX;
    for (const auto& step : gen.trace.steps) {
      if (step.block != current_block) {
        traces.emplace_back();
        current_block = step.block;
      }
      std::vector<Matrix> per_layer;
      per_layer.reserve(layers);
      for (const auto& act : step.activations) per_layer.push_back(slice_cols(act.q, 0, dh));
      traces.back().push_back(std::move(per_layer));
      for (std::size_t l = 0; l < layers; ++l) {
        for (double s : step.decisions[l].scores) {
          if (!std::isnan(s)) cal.layer_scores[l].push_back(s);
        }
      }
    }
  }
  std::erase_if(traces, [](const QueryTrace& t) { return t.size() < 2; });
  if (traces.empty()) {
    throw ContractError("calibration needs at least two denoising steps per block");
  }

  LayerwiseDrift drift;
  if (!config.drift.per_head) {
    drift = layerwise_drift(traces);
  } else {
    // The mean of the max-over-heads scores.
    drift.s_layer.assign(layers, 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
      double sum = 0.0;
      for (double s : cal.layer_scores[l]) sum += s;
      const auto n = cal.layer_scores[l].size();
      drift.s_layer[l] = n == 0 ? 0.0 : sum / static_cast<double>(n);
      drift.counted_pairs += n;
    }
  }
  cal.profile = build_profile(drift, cal.layer_scores, config.drift.phi_bar, config.drift.epsilon);
  return cal;
}

DriftProfile reallocate(const Calibration& cal, double phi_bar, double epsilon) {
  LayerwiseDrift drift;
  drift.s_layer = cal.profile.s_layer;
  drift.skipped_pairs = cal.profile.skipped_pairs;
  return build_profile(drift, cal.layer_scores, phi_bar, epsilon);
}

std::vector<Threshold> resolve_thresholds(const RunConfig& config, std::size_t layers) {
  if (config.reuse.mode == ReuseMode::full) return std::vector<Threshold>(layers, std::nullopt);
  if (config.drift.tau) return std::vector<Threshold>(layers, *config.drift.tau);
  const auto path = config.profile_path();
  if (!fs::exists(path)) {
    throw IoError("mode '" + std::string(to_string(config.reuse.mode)) +
                  "' needs a drift profile ('" + path.string() + "' missing) or --tau");
  }
  DriftProfile profile;
  try {
    profile = read_json(path).get<DriftProfile>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("profile '" + path.string() + "': " + e.what());
  }
  if (profile.layers() != layers) {
    throw ContractError("profile has " + std::to_string(profile.layers()) + " layers, model has " +
                        std::to_string(layers));
  }
  return profile.tau_layer;
}

std::vector<std::size_t> run_prompt(const ModelWeights& weights, const RunConfig& config) {
  Rng rng(mix_seed(config.sampler.seed, kPromptStream));
  return random_prompt(weights, config.sampler.prompt_length, rng);
}

std::string trace_jsonl(const GenerationTrace& trace) {
  std::string out;
  for (const auto& step : trace.steps) {
    for (const auto& d : step.decisions) {
      const nlohmann::json line{{"block", step.block},
                                {"step", step.step},
                                {"layer", d.layer},
                                {"window", step.window},
                                {"reused_count", d.reused.size()},
                                {"refreshed_count", d.refreshed.size()},
                                {"staleness_l2", d.staleness_l2},
                                {"gated", d.gated}};
      out += line.dump();
      out += '\n';
    }
  }
  return out;
}

nlohmann::json theory_report_json(const TheoryReport& r) {
  return {{"mode", std::string(to_string(r.mode))},
          {"tau", threshold_json(r.tau)},
          {"trials", r.trials},
          {"G", r.G},
          {"kappa_q", r.kappa_q},
          {"tau_tilde", r.tau_tilde},
          {"C_W", r.C_W},
          {"per_step_bound", r.per_step_bound},
          {"per_step_empirical", r.per_step_empirical},
          {"per_step_worst_slack", r.per_step_worst_slack},
          {"cumulative_bound", r.cumulative_bound},
          {"cumulative_empirical", r.cumulative_empirical},
          {"mean_reuse_fraction", r.mean_reuse_fraction},
          {"per_step_violations", r.per_step_violations},
          {"cumulative_violations", r.cumulative_violations},
          {"softmax_checks", r.softmax_checks},
          {"softmax_violations", r.softmax_violations},
          {"violations", r.violations}};
}

std::vector<BenchRow> run_bench(const ModelWeights& weights, const RunConfig& config) {
  if (config.reuse.mode == ReuseMode::full) throw ContractError("bench needs --mode kv or o");
  const auto cal = calibrate_profile(weights, config);
  const auto prompt = run_prompt(weights, config);
  const auto opts = config.reuse_options();

  std::vector<BenchRow> rows;
  for (double phi : config.bench.phi_grid) {
    const auto profile = reallocate(cal, phi, config.drift.epsilon);
    const auto gen = diffusion_generate(weights, config.sampler, prompt, profile.tau_layer, opts);
    BenchRow row;
    row.phi_bar = phi;
    row.reuse_fraction = gen.trace.reuse_fraction();
    row.saved_flop_fraction = flops_for_trace(gen.trace, weights.config).saved_fraction;
    if (weights.config.theory_regime() && config.bench.coupled_trials > 0) {
      double sum = 0.0;
      for (std::size_t t = 0; t < config.bench.coupled_trials; ++t) {
        Rng rng(mix_seed(config.sampler.seed, kCoupledStream + t));
        const auto pair = coupled_generate(weights, config.verify.steps, profile.tau_layer, opts, rng);
        sum += pair.per_step_embed_error.back();
      }
      row.mean_coupled_error = sum / static_cast<double>(config.bench.coupled_trials);
    }
    rows.push_back(row);
  }
  return rows;
}

int cmd_init_model(const RunConfig& config, std::ostream& log) {
  const auto weights = init_weights(config.model);
  if (config.paths.weights.has_parent_path()) ensure_dir(config.paths.weights.parent_path());
  save_weights(config.paths.weights, weights);
  nlohmann::json summary{{"weights", config.paths.weights.string()}, {"radius", weights.radius}};
  const auto& wq = weights.layers.front().w_q;
  try {
    summary["kappa_q"] = condition_kappa(wq);
  } catch (const SingularMatrixError&) {
    summary["kappa_q"] = nullptr;
  }
  if (config.model.theory_regime()) summary["G"] = lipschitz_G(weights);
  log << summary.dump() << '\n';
  return kExitOk;
}

int cmd_calibrate(const RunConfig& config, std::ostream& log) {
  const auto weights = load_checked(config);
  const auto cal = calibrate_profile(weights, config);
  write_json(config.profile_path(), cal.profile);
  ensure_dir(config.paths.output_dir);
  write_json(config.paths.output_dir / "calibration_scores.json", {{"layer_scores", cal.layer_scores}});
  write_meta(config, "calibrate");
  log << nlohmann::json(cal.profile).dump() << '\n';
  return kExitOk;
}

int cmd_generate(const RunConfig& config, std::ostream& log) {
  const auto weights = load_checked(config);
  const auto taus = resolve_thresholds(config, weights.config.layers);
  const auto prompt = run_prompt(weights, config);
  const auto gen = diffusion_generate(weights, config.sampler, prompt, taus, config.reuse_options());
  const auto flops = flops_for_trace(gen.trace, weights.config);

  const auto& dir = config.paths.output_dir;
  ensure_dir(dir);
  write_json(dir / "tokens.json", {{"prompt", gen.prompt}, {"tokens", gen.tokens}});
  write_text(dir / "trace.jsonl", trace_jsonl(gen.trace));
  nlohmann::json taus_json = nlohmann::json::array();
  for (const auto& t : taus) taus_json.push_back(threshold_json(t));
  const nlohmann::json summary{{"mode", std::string(to_string(config.reuse.mode))},
                               {"tau_layer", taus_json},
                               {"steps", gen.trace.steps.size()},
                               {"reused_slots", gen.trace.reused_slots()},
                               {"eligible_slots", gen.trace.eligible_slots()},
                               {"gated_slots", gen.trace.gated_slots()},
                               {"reuse_fraction", gen.trace.reuse_fraction()},
                               {"flops_full", flops.full_flops},
                               {"flops_actual", flops.actual_flops},
                               {"saved_flop_fraction", flops.saved_fraction}};
  write_json(dir / "summary.json", summary);
  write_meta(config, "generate");
  log << summary.dump() << '\n';
  return kExitOk;
}

int cmd_verify(const RunConfig& config, std::ostream& log) {
  if (config.reuse.mode == ReuseMode::full) throw ContractError("verify needs --mode kv or o");
  const auto weights = load_checked(config);
  if (!weights.config.theory_regime()) {
    throw RegimeError("verify needs a single-layer, single-head model");
  }
  std::vector<double> taus = config.verify.taus;
  if (config.drift.tau) taus = {*config.drift.tau};

  VerifyOptions vo;
  vo.trials = config.verify.trials;
  vo.steps = config.verify.steps;
  vo.softmax_pairs = config.verify.softmax_pairs;
  vo.seed = config.sampler.seed;
  vo.debug_zero_g = config.verify.debug_zero_g;

  nlohmann::json reports = nlohmann::json::array();
  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "# " << nlohmann::json{{"mode", std::string(to_string(config.reuse.mode))}, {"trials", vo.trials}}.dump()
      << '\n';
  csv << "tau,step,bound,empirical,worst_slack,cumulative_bound,cumulative_empirical\n";
  std::size_t violations = 0;
  for (double tau : taus) {
    const auto rep = verify_run(weights, {tau}, config.reuse_options(), vo);
    violations += rep.violations;
    reports.push_back(theory_report_json(rep));
    for (std::size_t t = 0; t < rep.per_step_bound.size(); ++t) {
      csv << tau << ',' << t << ',' << rep.per_step_bound[t] << ',' << rep.per_step_empirical[t] << ','
          << rep.per_step_worst_slack[t] << ',' << rep.cumulative_bound[t + 1] << ','
          << rep.cumulative_empirical[t + 1] << '\n';
    }
    log << "tau=" << tau << " violations=" << rep.violations
        << " (per-step " << rep.per_step_violations << ", cumulative " << rep.cumulative_violations
        << ", softmax " << rep.softmax_violations << ")\n";
  }
  const auto& dir = config.paths.output_dir;
  ensure_dir(dir);
  write_json(dir / "theory_report.json", {{"reports", reports}, {"violations", violations}});
  write_text(dir / "theory_per_step.csv", csv.str());
  write_meta(config, "verify");
  return violations == 0 ? kExitOk : kExitViolations;
}

int cmd_analyze(const RunConfig& config, const AnalyzeOptions& options, std::ostream& log) {
  const auto weights = load_checked(config);
  const auto taus = resolve_thresholds(config, weights.config.layers);
  const auto prompt = run_prompt(weights, config);
  // Traces on disk carry decisions only, so the run is replayed with
  // activation recording; generation is deterministic given the config.
  const auto gen = diffusion_generate(weights, config.sampler, prompt, taus, config.reuse_options(), true);
  if (options.block >= config.sampler.blocks()) throw ContractError("analyze: block out of range");

  std::vector<const StepRecord*> steps;
  for (const auto& s : gen.trace.steps) {
    if (s.block == options.block) steps.push_back(&s);
  }
  const auto& dir = config.paths.output_dir;
  ensure_dir(dir);
  const std::size_t layers = weights.config.layers;
  std::size_t files = 0;
  auto open = [&](const std::string& name) {
    ++files;
    std::ofstream out(dir / name, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + (dir / name).string() + "'");
    return out;
  };

  if (steps.size() >= 2) {
    for (std::size_t l = 0; l < layers; ++l) {
      std::vector<Matrix> h_series, k_series;
      for (const auto* s : steps) {
        h_series.push_back(s->activations[l].h);
        k_series.push_back(s->activations[l].k);
      }
      const nlohmann::json meta{{"kind", "temporal_similarity"}, {"activation", "h"}, {"layer", l},
                                {"block", options.block}, {"axis", "timestep"}, {"reduction", "token_mean"}};
      auto out = open("temporal_similarity_L" + std::to_string(l) + ".csv");
      write_matrix_csv(out, temporal_similarity(h_series).entries, meta);

      auto tok = open("temporal_similarity_tokens_L" + std::to_string(l) + ".csv");
      tok << "# "
          << nlohmann::json{{"kind", "temporal_similarity"}, {"activation", "h"}, {"layer", l},
                            {"block", options.block}, {"reduction", "per_token"}}
                 .dump()
          << "\ntoken,step_i,step_j,cosine\n"
          << std::setprecision(17);
      for (std::size_t i = 0; i < h_series.front().rows(); ++i) {
        const auto m = temporal_similarity_token(h_series, i).entries;
        for (std::size_t a = 0; a < m.rows(); ++a) {
          for (std::size_t b = 0; b < m.cols(); ++b) tok << i << ',' << a << ',' << b << ',' << m(a, b) << '\n';
        }
      }

      auto key = open("key_similarity_L" + std::to_string(l) + ".csv");
      write_matrix_csv(key, temporal_similarity(k_series).entries,
                       {{"kind", "temporal_similarity"}, {"activation", "k"}, {"layer", l},
                        {"block", options.block}, {"axis", "timestep"}, {"reduction", "token_mean"}});
    }
  }
  if (layers >= 2 && !steps.empty()) {
    std::vector<Matrix> values;
    for (const auto& act : steps.back()->activations) values.push_back(act.v);
    auto out = open("cross_layer_value_similarity.csv");
    write_matrix_csv(out, cross_layer_similarity(values).entries,
                     {{"kind", "cross_layer_similarity"}, {"activation", "v"}, {"block", options.block},
                      {"step", steps.back()->step}, {"axis", "layer"}});
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const auto h = drift_histogram(gen.trace, l, taus[l]);
    auto out = open("drift_histogram_L" + std::to_string(l) + ".csv");
    write_histogram_csv(out, h,
                        {{"kind", "drift_histogram"}, {"layer", l}, {"tau", threshold_json(taus[l])},
                         {"total", h.total}, {"zero_mode", h.zero_mode}, {"skipped", h.skipped},
                         {"zero_mode_fraction", h.zero_mode_fraction()}});
  }
  const auto flops = flops_for_trace(gen.trace, weights.config);
  write_json(dir / "flops.json", {{"mode", std::string(to_string(config.reuse.mode))},
                                  {"full_flops", flops.full_flops},
                                  {"actual_flops", flops.actual_flops},
                                  {"saved_fraction", flops.saved_fraction}});
  write_meta(config, "analyze");
  log << "wrote " << files + 1 << " files to " << dir.string() << '\n';
  return kExitOk;
}

int cmd_bench(const RunConfig& config, std::ostream& log) {
  const auto weights = load_checked(config);
  const auto rows = run_bench(weights, config);
  std::ostringstream csv;
  csv << std::setprecision(17);
  csv << "# "
      << nlohmann::json{{"kind", "phi_sweep"}, {"mode", std::string(to_string(config.reuse.mode))},
                        {"epsilon", config.drift.epsilon}}
             .dump()
      << '\n';
  csv << "phi_bar,reuse_fraction,saved_flop_fraction,mean_coupled_error\n";
  for (const auto& r : rows) {
    csv << r.phi_bar << ',' << r.reuse_fraction << ',' << r.saved_flop_fraction << ',';
    if (r.mean_coupled_error) csv << *r.mean_coupled_error;
    csv << '\n';
  }
  ensure_dir(config.paths.output_dir);
  write_text(config.paths.output_dir / "bench.csv", csv.str());
  write_meta(config, "bench");
  log << csv.str();
  return kExitOk;
}

}  // namespace dare::cli
