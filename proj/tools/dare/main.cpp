#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "commands.hpp"
#include "dare/error.hpp"

using namespace dare;
using namespace dare::cli;

namespace {

struct Overrides {
  std::string config;
  std::optional<double> phi_bar, epsilon, tau, temperature;
  std::optional<std::string> mode, weights, profile, output_dir;
  std::optional<std::size_t> skip_layers, refresh_interval, block_size, steps, gen_length,
      tokens_per_step, prompt_length, trials, layers, heads, d_model, d_int, n_vocab, block_len;
  std::optional<std::uint64_t> seed;
  bool per_head = false;
  bool debug_zero_g = false;
  std::size_t block = 0;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config, "JSON run configuration");
  app->add_option("--weights", o.weights, "weight file");
  app->add_option("--profile", o.profile, "drift profile JSON");
  app->add_option("-o,--out", o.output_dir, "output directory");
  app->add_option("--seed", o.seed, "seed for the model and the sampler");
  app->add_option("--phi-bar", o.phi_bar, "average reuse quantile");
  app->add_option("--epsilon", o.epsilon, "allocation temperature");
  app->add_option("--tau", o.tau, "threshold used at every layer");
  app->add_option("--mode", o.mode, "full, kv or o")->check(CLI::IsMember({"full", "kv", "o"}));
  app->add_option("--skip-layers", o.skip_layers, "layers that never reuse");
  app->add_option("--refresh-interval", o.refresh_interval, "full recompute every N steps")
      ->check(CLI::PositiveNumber);
  app->add_option("--block-size", o.block_size);
  app->add_option("--steps", o.steps, "denoising steps per block");
  app->add_option("--gen-length", o.gen_length);
  app->add_option("--tokens-per-step", o.tokens_per_step);
  app->add_option("--temperature", o.temperature);
  app->add_option("--prompt-length", o.prompt_length);
  app->add_option("--layers", o.layers);
  app->add_option("--heads", o.heads);
  app->add_option("--d-model", o.d_model);
  app->add_option("--d-int", o.d_int);
  app->add_option("--vocab", o.n_vocab);
  app->add_option("--block-len", o.block_len, "window length of the theory harness");
  app->add_flag("--per-head", o.per_head, "score drift as the max over heads");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.weights) c.paths.weights = *o.weights;
  if (o.profile) c.paths.profile = *o.profile;
  if (o.output_dir) c.paths.output_dir = *o.output_dir;
  if (o.seed) {
    c.model.seed = *o.seed;
    c.sampler.seed = *o.seed;
  }
  if (o.phi_bar) c.drift.phi_bar = *o.phi_bar;
  if (o.epsilon) c.drift.epsilon = *o.epsilon;
  if (o.tau) c.drift.tau = *o.tau;
  if (o.per_head) c.drift.per_head = true;
  if (o.mode) c.reuse.mode = reuse_mode_from_string(*o.mode);
  if (o.skip_layers) c.reuse.skip_first_layers = *o.skip_layers;
  if (o.refresh_interval) c.reuse.refresh_interval = *o.refresh_interval;
  if (o.block_size) c.sampler.block_size = *o.block_size;
  if (o.steps) {
    c.sampler.steps_per_block = *o.steps;
    c.verify.steps = *o.steps;
  }
  if (o.gen_length) c.sampler.gen_length = *o.gen_length;
  if (o.tokens_per_step) c.sampler.tokens_per_step = *o.tokens_per_step;
  if (o.temperature) c.sampler.temperature = *o.temperature;
  if (o.prompt_length) c.sampler.prompt_length = *o.prompt_length;
  if (o.layers) c.model.layers = *o.layers;
  if (o.heads) c.model.heads = *o.heads;
  if (o.d_model) c.model.d_model = *o.d_model;
  if (o.d_int) c.model.d_int = *o.d_int;
  if (o.n_vocab) c.model.n_vocab = *o.n_vocab;
  if (o.block_len) c.model.block_len = *o.block_len;
  if (o.trials) c.verify.trials = *o.trials;
  if (o.debug_zero_g) c.verify.debug_zero_g = true;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-wise activation reuse for a toy diffusion language model"};
  app.require_subcommand(1);
  Overrides o;

  auto* init = app.add_subcommand("init-model", "create and save random weights");
  auto* calibrate = app.add_subcommand("calibrate", "estimate per-layer drift thresholds");
  auto* generate = app.add_subcommand("generate", "run blockwise denoising");
  auto* verify = app.add_subcommand("verify", "check the error bounds on coupled runs");
  auto* analyze = app.add_subcommand("analyze", "similarity matrices, drift histograms, FLOPs");
  auto* bench = app.add_subcommand("bench", "sweep the average reuse quantile");
  for (auto* sub : {init, calibrate, generate, verify, analyze, bench}) add_common(sub, o);
  verify->add_option("--trials", o.trials, "coupled runs per threshold");
  verify->add_flag("--debug-zero-g", o.debug_zero_g, "sabotage: drop error propagation from the bound");
  analyze->add_option("--block", o.block, "block to analyse");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig config = resolve(o);
    if (init->parsed()) return cmd_init_model(config, std::cout);
    if (calibrate->parsed()) return cmd_calibrate(config, std::cout);
    if (generate->parsed()) return cmd_generate(config, std::cout);
    if (verify->parsed()) return cmd_verify(config, std::cout);
    if (analyze->parsed()) return cmd_analyze(config, {o.block}, std::cout);
    if (bench->parsed()) return cmd_bench(config, std::cout);
  } catch (const dare::Error& e) {
    std::cerr << "dare: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "dare: unexpected error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
