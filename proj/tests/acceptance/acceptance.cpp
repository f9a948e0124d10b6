// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "dare/analysis.hpp"
#include "dare/cost.hpp"
#include "dare/drift.hpp"
#include "dare/sampler.hpp"
#include "dare/theory.hpp"

using namespace dare;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ModelConfig fixture() {
  ModelConfig c;
  c.layers = 1;
  c.heads = 1;
  c.d_model = 8;
  c.d_int = 32;
  c.n_vocab = 16;
  c.block_len = 4;
  c.seed = 1;
  return c;
}

ReuseOptions with_mode(ReuseMode m) {
  ReuseOptions o;
  o.mode = m;
  return o;
}

std::vector<double> random_distribution(std::size_t n, Rng& rng) {
  std::vector<double> p(n);
  double sum = 0;
  for (auto& x : p) {
    x = std::exp(2.0 * rng.normal());
    sum += x;
  }
  for (auto& x : p) x /= sum;
  return p;
}

Outcome exact_equivalence() {
  Rng rng(101);
  const std::size_t ds[] = {4, 8, 16}, ls[] = {1, 2, 4}, bs[] = {2, 4, 8};
  std::size_t mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    ModelConfig c;
    c.d_model = ds[rng.below(3)];
    c.layers = ls[rng.below(3)];
    c.heads = rng.below(2) == 0 ? 1 : 2;
    c.d_int = 2 * c.d_model;
    c.n_vocab = 4 + rng.below(13);
    c.seed = rng.next_u64();
    const auto w = init_weights(c);
    SamplerConfig s;
    s.block_size = bs[rng.below(3)];
    s.gen_length = s.block_size * (1 + rng.below(3));
    s.steps_per_block = s.block_size;
    s.temperature = rng.below(2) == 0 ? 0.0 : 0.8;
    s.seed = rng.next_u64();
    Rng prng(s.seed);
    const auto prompt = random_prompt(w, rng.below(5), prng);
    const std::vector<Threshold> off(c.layers, std::nullopt);
    const auto full = diffusion_generate(w, s, prompt, {}, with_mode(ReuseMode::full));
    for (auto m : {ReuseMode::kv, ReuseMode::o}) {
      if (diffusion_generate(w, s, prompt, off, with_mode(m)).tokens != full.tokens) ++mismatches;
    }
  }
  return {mismatches == 0, fmt("100 configs x 2 modes, %zu mismatches", mismatches)};
}

Outcome coupling() {
  Rng rng(202);
  double worst_marginal = 0, worst_tv = 0;
  for (int pair = 0; pair < 20; ++pair) {
    const std::size_t n = 2 + rng.below(7);
    const auto p = random_distribution(n, rng);
    const auto q = random_distribution(n, rng);
    std::vector<double> cp(n, 0), cq(n, 0);
    std::size_t differ = 0;
    const int draws = 100000;
    for (int k = 0; k < draws; ++k) {
      const auto [j, jh] = maximal_coupling_sample(p, q, rng);
      cp[j] += 1.0 / draws;
      cq[jh] += 1.0 / draws;
      differ += j != jh;
    }
    double lp = 0, lq = 0, tv = 0;
    for (std::size_t j = 0; j < n; ++j) {
      lp += std::abs(cp[j] - p[j]);
      lq += std::abs(cq[j] - q[j]);
      tv += 0.5 * std::abs(p[j] - q[j]);
    }
    worst_marginal = std::max({worst_marginal, lp, lq});
    worst_tv = std::max(worst_tv, std::abs(static_cast<double>(differ) / draws - tv));
  }
  return {worst_marginal <= 0.02 && worst_tv <= 0.01,
          fmt("max marginal L1 %.4f (<= 0.02), max |P(j!=j^)-TV| %.4f (<= 0.01)", worst_marginal, worst_tv)};
}

Outcome softmax_lipschitz() {
  Rng rng(303);
  std::size_t violations = 0;
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 1 + rng.below(64);
    const double scale = std::pow(10.0, -3.0 + 4.0 * rng.uniform());
    std::vector<double> z(n), z2(n);
    double linf = 0;
    for (std::size_t k = 0; k < n; ++k) {
      z[k] = 3.0 * rng.normal();
      z2[k] = z[k] + scale * rng.normal();
      linf = std::max(linf, std::abs(z[k] - z2[k]));
    }
    const double gap = softmax_l1_gap(z, z2);
    if (gap > linf + 1e-9) ++violations;
    if (linf > 0) worst = std::max(worst, gap / linf);
  }
  return {violations == 0, fmt("10^4 pairs, %zu violations, max gap/||dz||_inf %.4f", violations, worst)};
}

struct FixtureRuns {
  std::size_t per_step[2] = {0, 0};
  std::size_t cumulative[2] = {0, 0};
  double min_slack[2] = {INFINITY, INFINITY};
  double reuse[2] = {0, 0};
};

FixtureRuns fixture_runs() {
  const auto w = init_weights(fixture());
  FixtureRuns r;
  VerifyOptions v;
  v.trials = 50;
  v.steps = 8;
  v.softmax_pairs = 0;
  int idx = 0;
  for (auto m : {ReuseMode::kv, ReuseMode::o}) {
    for (double tau : {0.01, 0.05, 0.1}) {
      const auto rep = verify_run(w, {tau}, with_mode(m), v);
      r.per_step[idx] += rep.per_step_violations;
      r.cumulative[idx] += rep.cumulative_violations;
      for (double s : rep.per_step_worst_slack) r.min_slack[idx] = std::min(r.min_slack[idx], 0.0 - s);
      r.reuse[idx] += rep.mean_reuse_fraction / 3.0;
    }
    ++idx;
  }
  return r;
}

Outcome geometric_lemma() {
  Rng rng(606);
  std::size_t violations = 0;
  double worst = 0;
  for (std::size_t d : {4u, 8u, 16u}) {
    for (double kappa : {1.0, 2.0, 5.0}) {
      const Matrix w_q = random_matrix_with_kappa(d, kappa, rng);
      const auto r = geometric_lemma_check(w_q, 0.05, 10000, rng);
      violations += r.violations + (r.accepted == 10000 ? 0 : 1);
      worst = std::max(worst, r.max_ratio);
    }
  }
  return {violations == 0, fmt("3x3 grid x 10^4 pairs, %zu violations, max ||x-y||^2/bound %.6f", violations, worst)};
}

Outcome allocation() {
  Rng rng(707);
  double sum_err = 0, eps_dev = 0;
  std::size_t order_breaks = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t L = 1 + rng.below(32);
    std::vector<double> s(L);
    for (auto& x : s) x = 2.0 * rng.uniform();
    const double phi_bar = rng.uniform();
    const double eps = std::pow(10.0, -2.0 + 3.0 * rng.uniform());
    const auto a = allocate_quantiles(s, phi_bar, eps);
    double sum = 0;
    for (double x : a.raw) sum += x;
    sum_err = std::max(sum_err, std::abs(sum - static_cast<double>(L) * phi_bar));
    for (std::size_t p = 0; p < L; ++p) {
      for (std::size_t q = 0; q < L; ++q) {
        if (s[p] < s[q] && a.raw[p] < a.raw[q]) ++order_breaks;
      }
    }
    for (double x : allocate_quantiles(s, phi_bar, 1e9).phi) eps_dev = std::max(eps_dev, std::abs(x - phi_bar));
  }
  return {sum_err <= 1e-9 && order_breaks == 0 && eps_dev < 1e-6,
          fmt("max |sum phi - L phi_bar| %.2e, %zu order breaks, eps=1e9 max deviation %.2e", sum_err,
              order_breaks, eps_dev)};
}

cli::RunConfig bench_config() {
  cli::RunConfig c;
  c.model.layers = 4;
  c.model.heads = 2;
  c.model.d_model = 16;
  c.model.d_int = 64;
  c.model.n_vocab = 32;
  c.model.seed = 1;
  c.sampler.gen_length = 32;
  c.sampler.block_size = 8;
  c.sampler.steps_per_block = 8;
  c.sampler.prompt_length = 8;
  c.sampler.seed = 1;
  return c;
}

Outcome accounting() {
  auto c = bench_config();
  const auto w = init_weights(c.model);
  const CostModel cost(c.model);
  std::size_t recount_mismatch = 0, flop_mismatch = 0, monotone_breaks = 0;
  std::string sweep;
  for (auto m : {ReuseMode::kv, ReuseMode::o}) {
    c.reuse.mode = m;
    const auto rows = cli::run_bench(w, c);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].reuse_fraction < rows[i - 1].reuse_fraction) ++monotone_breaks;
    }
    sweep += std::string(to_string(m)) + fmt(" %.3f->%.3f ", rows.front().reuse_fraction, rows.back().reuse_fraction);

    const auto cal = cli::calibrate_profile(w, c);
    const auto prompt = cli::run_prompt(w, c);
    for (double phi : {0.2, 0.5, 0.8}) {
      const auto profile = cli::reallocate(cal, phi, 1.0);
      const auto gen = diffusion_generate(w, c.sampler, prompt, profile.tau_layer, c.reuse_options());
      // Recount from the serialized trace.
      std::istringstream lines(cli::trace_jsonl(gen.trace));
      std::string line;
      std::size_t reused = 0, eligible = 0;
      while (std::getline(lines, line)) {
        const auto j = nlohmann::json::parse(line);
        reused += j.at("reused_count").get<std::size_t>();
        if (!j.at("gated").get<bool>()) eligible += j.at("window").get<std::size_t>();
      }
      const double recount = eligible == 0 ? 0.0 : static_cast<double>(reused) / static_cast<double>(eligible);
      if (recount != gen.trace.reuse_fraction()) ++recount_mismatch;

      std::uint64_t full = 0, saved = 0;
      for (const auto& s : gen.trace.steps) {
        full += c.model.layers * cost.full_layer(s.window);
        for (const auto& d : s.decisions) {
          saved += d.reused.size() * (m == ReuseMode::kv ? cost.kv_saving() : cost.o_saving(s.window));
        }
      }
      const auto report = flops_for_trace(gen.trace, c.model);
      if (report.full_flops != full || report.actual_flops != full - saved ||
          gen.trace.flops_actual() != full - saved) {
        ++flop_mismatch;
      }
    }
  }
  return {recount_mismatch == 0 && flop_mismatch == 0 && monotone_breaks == 0,
          fmt("recount mismatches %zu, FLOP mismatches %zu, monotonicity breaks %zu; ", recount_mismatch,
              flop_mismatch, monotone_breaks) +
              "reuse over phi_bar grid: " + sweep};
}

Outcome zero_mode() {
  std::size_t checked = 0, violations = 0;
  double worst = 0;
  Rng rng(909);
  for (int i = 0; i < 20; ++i) {
    ModelConfig c;
    c.layers = 1 + rng.below(3);
    c.heads = rng.below(2) == 0 ? 1 : 2;
    c.d_model = 8;
    c.d_int = 16;
    c.n_vocab = 10;
    c.seed = rng.next_u64();
    const auto w = init_weights(c);
    SamplerConfig s;
    s.gen_length = 8;
    s.block_size = 4;
    s.steps_per_block = 4;
    s.prompt_length = 3;
    s.temperature = 0.7;
    s.seed = rng.next_u64();
    const auto mode = static_cast<ReuseMode>(i % 3);
    const std::vector<Threshold> taus(c.layers, 0.05);
    const auto gen = diffusion_generate(w, s, std::vector<std::size_t>{1, 2, 3}, taus, with_mode(mode));
    for (std::size_t k = 1; k < gen.trace.steps.size(); ++k) {
      const auto& prev = gen.trace.steps[k - 1];
      const auto& cur = gen.trace.steps[k];
      if (prev.block != cur.block) continue;
      const auto& scores = cur.decisions[0].scores;
      for (std::size_t t = 0; t < cur.window; ++t) {
        if (cur.tokens[t] != prev.tokens[t]) continue;
        ++checked;
        if (!(scores.at(t) <= 1e-9)) ++violations;
        worst = std::max(worst, scores[t]);
      }
    }
  }
  return {violations == 0 && checked > 0,
          fmt("%zu unchanged token-steps, %zu above 1e-9, max score %.3e", checked, violations, worst)};
}

Outcome constant_formulas() {
  std::size_t failures = 0;
  for (double tau : {0.0, 0.01, 0.05, 0.1, 0.37, 1.0, 2.0}) {
    for (double d : {1.0, 4.0, 8.0, 16.0, 64.0}) {
      if (tau_tilde(tau, d, 1.0) != tau * d) ++failures;
    }
  }
  const auto w = init_weights(fixture());
  const double g = lipschitz_G(w);
  double worst = 0;
  for (auto member : {&LayerWeights::w_o, &LayerWeights::w_v, &LayerWeights::w_u, &LayerWeights::w_d}) {
    auto w2 = w;
    w2.layers[0].*member = scaled(w.layers[0].*member, 2.0);
    worst = std::max(worst, std::abs(lipschitz_G(w2) / (2.0 * g) - 1.0));
  }
  const auto n = weight_norms(w);
  for (auto f : {&WeightNorms::e_2_1, &WeightNorms::w_d, &WeightNorms::g_sigma, &WeightNorms::w_u,
                 &WeightNorms::w_o, &WeightNorms::w_v, &WeightNorms::block_len}) {
    auto n2 = n;
    n2.*f *= 2.0;
    worst = std::max(worst, std::abs(lipschitz_G(n2) / (2.0 * g) - 1.0));
  }
  return {failures == 0 && worst <= 1e-9,
          fmt("tau_tilde(kappa=1) != tau*d in %zu cases; max relative error of doubled G %.2e", failures, worst)};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& check) {
    const auto t0 = std::chrono::steady_clock::now();
    const Outcome o = check();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d: %s (%s) [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };

  report(1, "exact equivalence with reuse disabled", exact_equivalence);
  report(2, "maximal coupling", coupling);
  report(3, "softmax Lipschitz", softmax_lipschitz);

  const auto t0 = std::chrono::steady_clock::now();
  const auto runs = fixture_runs();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const char* modes[] = {"kv", "o"};
  for (int crit : {4, 5}) {
    bool pass = true;
    std::string detail;
    for (int m = 0; m < 2; ++m) {
      const std::size_t v = crit == 4 ? runs.per_step[m] : runs.cumulative[m];
      pass = pass && v == 0;
      detail += fmt("%s: %zu violations", modes[m], v);
      if (crit == 4) detail += fmt(", min bound-gap margin %.3g, mean reuse %.3f", runs.min_slack[m], runs.reuse[m]);
      if (m == 0) detail += "; ";
    }
    std::printf("%s criterion %d: %s (%s) [%.1fs]\n", pass ? "PASS" : "FAIL", crit,
                crit == 4 ? "per-step error bound" : "cumulative error bound", detail.c_str(), secs);
    if (!pass) ++failed;
  }

  report(6, "geometric lemma", geometric_lemma);
  report(7, "quantile allocation", allocation);
  report(8, "accounting exactness and reuse trend", accounting);
  report(9, "layer-0 zero mode", zero_mode);
  report(10, "constant formulas", constant_formulas);
  std::printf("%d of 10 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
