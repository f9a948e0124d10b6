#include "run_config.hpp"

#include <fstream>
#include <set>

#include "dare/error.hpp"
#include "dare/serialize.hpp"

namespace dare::cli {

void RunConfig::validate() const {
  model.validate();
  sampler.validate();
  if (!(drift.epsilon > 0.0)) throw ContractError("drift.epsilon must be > 0");
  if (!(drift.phi_bar >= 0.0 && drift.phi_bar <= 1.0)) throw ContractError("drift.phi_bar must lie in [0, 1]");
  if (drift.tau && !(*drift.tau >= 0.0)) throw ContractError("drift.tau must be >= 0");
  if (drift.calibration_prompts == 0) throw ContractError("drift.calibration_prompts must be >= 1");
  if (reuse.refresh_interval && *reuse.refresh_interval == 0) {
    throw ContractError("reuse.refresh_interval must be >= 1");
  }
  if (verify.trials == 0 || verify.steps == 0) throw ContractError("verify.trials and verify.steps must be >= 1");
  for (double t : verify.taus) {
    if (!(t >= 0.0)) throw ContractError("verify.taus must be >= 0");
  }
  for (double p : bench.phi_grid) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("bench.phi_grid values must lie in [0, 1]");
  }
}

std::filesystem::path RunConfig::profile_path() const {
  return paths.profile.empty() ? paths.output_dir / "profile.json" : paths.profile;
}

ReuseOptions RunConfig::reuse_options() const {
  ReuseOptions o;
  o.mode = reuse.mode;
  o.skip_first_layers = reuse.skip_first_layers;
  if (reuse.refresh_interval) o.refresh_interval = *reuse.refresh_interval;
  o.score_source = drift.per_head ? ScoreSource::all_heads : ScoreSource::head0;
  return o;
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* section) {
  if (!j.is_object()) throw ContractError(std::string("config section '") + section + "' must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ContractError(std::string("unknown config key '") + section + "." + k + "'");
  }
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

void to_json(nlohmann::json& j, const RunConfig& c) {
  j["model"] = c.model;
  j["sampler"] = {{"gen_length", c.sampler.gen_length},
                  {"block_size", c.sampler.block_size},
                  {"steps_per_block", c.sampler.steps_per_block},
                  {"tokens_per_step", c.sampler.tokens_per_step},
                  {"temperature", c.sampler.temperature},
                  {"seed", c.sampler.seed},
                  {"prompt_length", c.sampler.prompt_length}};
  j["drift"] = {{"phi_bar", c.drift.phi_bar},
                {"epsilon", c.drift.epsilon},
                {"tau", c.drift.tau ? nlohmann::json(*c.drift.tau) : nlohmann::json(nullptr)},
                {"per_head", c.drift.per_head},
                {"calibration_prompts", c.drift.calibration_prompts}};
  j["reuse"] = {{"mode", std::string(to_string(c.reuse.mode))},
                {"skip_first_layers", c.reuse.skip_first_layers},
                {"refresh_interval", c.reuse.refresh_interval ? nlohmann::json(*c.reuse.refresh_interval)
                                                              : nlohmann::json(nullptr)}};
  j["paths"] = {{"weights", c.paths.weights.string()},
                {"profile", c.paths.profile.string()},
                {"output_dir", c.paths.output_dir.string()}};
  j["verify"] = {{"trials", c.verify.trials},
                 {"steps", c.verify.steps},
                 {"taus", c.verify.taus},
                 {"softmax_pairs", c.verify.softmax_pairs},
                 {"debug_zero_g", c.verify.debug_zero_g}};
  j["bench"] = {{"phi_grid", c.bench.phi_grid}, {"coupled_trials", c.bench.coupled_trials}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, {"model", "sampler", "drift", "reuse", "paths", "verify", "bench"}, "root");
  RunConfig out;
  if (j.contains("model")) {
    reject_unknown(j.at("model"),
                   {"layers", "heads", "d_model", "d_int", "n_vocab", "block_len", "activation", "seed"},
                   "model");
    out.model = j.at("model").get<ModelConfig>();
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    reject_unknown(s, {"gen_length", "block_size", "steps_per_block", "tokens_per_step", "temperature",
                       "seed", "prompt_length"},
                   "sampler");
    maybe(s, "gen_length", out.sampler.gen_length);
    maybe(s, "block_size", out.sampler.block_size);
    maybe(s, "steps_per_block", out.sampler.steps_per_block);
    maybe(s, "tokens_per_step", out.sampler.tokens_per_step);
    maybe(s, "temperature", out.sampler.temperature);
    maybe(s, "seed", out.sampler.seed);
    maybe(s, "prompt_length", out.sampler.prompt_length);
  }
  if (j.contains("drift")) {
    const auto& s = j.at("drift");
    reject_unknown(s, {"phi_bar", "epsilon", "tau", "per_head", "calibration_prompts"}, "drift");
    maybe(s, "phi_bar", out.drift.phi_bar);
    maybe(s, "epsilon", out.drift.epsilon);
    if (s.contains("tau") && !s.at("tau").is_null()) out.drift.tau = s.at("tau").get<double>();
    maybe(s, "per_head", out.drift.per_head);
    maybe(s, "calibration_prompts", out.drift.calibration_prompts);
  }
  if (j.contains("reuse")) {
    const auto& s = j.at("reuse");
    reject_unknown(s, {"mode", "skip_first_layers", "refresh_interval"}, "reuse");
    if (s.contains("mode")) out.reuse.mode = reuse_mode_from_string(s.at("mode").get<std::string>());
    maybe(s, "skip_first_layers", out.reuse.skip_first_layers);
    if (s.contains("refresh_interval") && !s.at("refresh_interval").is_null()) {
      out.reuse.refresh_interval = s.at("refresh_interval").get<std::size_t>();
    }
  }
  if (j.contains("paths")) {
    const auto& s = j.at("paths");
    reject_unknown(s, {"weights", "profile", "output_dir"}, "paths");
    if (s.contains("weights")) out.paths.weights = s.at("weights").get<std::string>();
    if (s.contains("profile")) out.paths.profile = s.at("profile").get<std::string>();
    if (s.contains("output_dir")) out.paths.output_dir = s.at("output_dir").get<std::string>();
  }
  if (j.contains("verify")) {
    const auto& s = j.at("verify");
    reject_unknown(s, {"trials", "steps", "taus", "softmax_pairs", "debug_zero_g"}, "verify");
    maybe(s, "trials", out.verify.trials);
    maybe(s, "steps", out.verify.steps);
    maybe(s, "taus", out.verify.taus);
    maybe(s, "softmax_pairs", out.verify.softmax_pairs);
    maybe(s, "debug_zero_g", out.verify.debug_zero_g);
  }
  if (j.contains("bench")) {
    const auto& s = j.at("bench");
    reject_unknown(s, {"phi_grid", "coupled_trials"}, "bench");
    maybe(s, "phi_grid", out.bench.phi_grid);
    maybe(s, "coupled_trials", out.bench.coupled_trials);
  }
  c = std::move(out);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config '" + path.string() + "': " + e.what());
  }
}

}  // namespace dare::cli
