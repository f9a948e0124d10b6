#include "dare/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dare/cost.hpp"
#include "dare/error.hpp"

namespace dare {

void SamplerConfig::validate() const {
  if (block_size == 0 || steps_per_block == 0 || tokens_per_step == 0 || gen_length == 0) {
    throw ContractError("SamplerConfig: counts must be >= 1");
  }
  if (gen_length % block_size != 0) {
    throw ContractError("SamplerConfig: gen_length " + std::to_string(gen_length) +
                        " is not a multiple of block_size " + std::to_string(block_size));
  }
  if (tokens_per_step * steps_per_block < block_size) {
    throw ContractError("SamplerConfig: tokens_per_step * steps_per_block < block_size");
  }
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw ContractError("SamplerConfig: temperature must be finite and >= 0");
  }
}

std::size_t GenerationTrace::reused_slots() const {
  std::size_t n = 0;
  for (const auto& s : steps) {
    for (const auto& d : s.decisions) n += d.reused.size();
  }
  return n;
}

std::size_t GenerationTrace::eligible_slots() const {
  std::size_t n = 0;
  for (const auto& s : steps) {
    for (const auto& d : s.decisions) {
      if (!d.gated) n += s.window;
    }
  }
  return n;
}

std::size_t GenerationTrace::gated_slots() const {
  std::size_t n = 0;
  for (const auto& s : steps) {
    for (const auto& d : s.decisions) {
      if (d.gated) n += s.window;
    }
  }
  return n;
}

double GenerationTrace::reuse_fraction() const {
  const std::size_t eligible = eligible_slots();
  return eligible == 0 ? 0.0 : static_cast<double>(reused_slots()) / static_cast<double>(eligible);
}

std::uint64_t GenerationTrace::flops_full() const {
  std::uint64_t n = 0;
  for (const auto& s : steps) n += s.flops_full;
  return n;
}

std::uint64_t GenerationTrace::flops_actual() const {
  std::uint64_t n = 0;
  for (const auto& s : steps) n += s.flops_actual;
  return n;
}

std::size_t sample_categorical(std::span<const double> p, double u) {
  if (p.empty()) throw ContractError("sample_categorical: empty distribution");
  double acc = 0.0;
  std::size_t last_positive = p.size();
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (p[j] <= 0.0) continue;
    last_positive = j;
    acc += p[j];
    if (u < acc) return j;
  }
  // Round-off left u above the total mass.
  if (last_positive == p.size()) throw ContractError("sample_categorical: no positive mass");
  return last_positive;
}

namespace {

void check_distribution(std::span<const double> p, const char* name) {
  double sum = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      throw ContractError(std::string("maximal_coupling_sample: ") + name + " has a negative or non-finite entry");
    }
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ContractError(std::string("maximal_coupling_sample: ") + name + " is not normalized");
  }
}

}  // namespace

std::pair<std::size_t, std::size_t> maximal_coupling_sample(std::span<const double> p,
                                                            std::span<const double> q, Rng& rng) {
  if (p.size() != q.size() || p.empty()) throw ContractError("maximal_coupling_sample: support mismatch");
  check_distribution(p, "p");
  check_distribution(q, "q");
  const double u = rng.uniform();
  const double u1 = rng.uniform();
  const double u2 = rng.uniform();

  std::vector<double> overlap(p.size());
  double mass = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    overlap[j] = std::min(p[j], q[j]);
    mass += overlap[j];
  }
  std::vector<double> rp(p.size()), rq(p.size());
  double tv_p = 0.0, tv_q = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    rp[j] = p[j] - overlap[j];
    rq[j] = q[j] - overlap[j];
    tv_p += rp[j];
    tv_q += rq[j];
  }
  if (u < mass || tv_p <= 0.0 || tv_q <= 0.0) {
    for (double& x : overlap) x /= mass;
    const std::size_t j = sample_categorical(overlap, u1);
    return {j, j};
  }
  for (double& x : rp) x /= tv_p;
  for (double& x : rq) x /= tv_q;
  return {sample_categorical(rp, u1), sample_categorical(rq, u2)};
}

std::vector<std::size_t> random_prompt(const ModelWeights& weights, std::size_t length, Rng& rng) {
  // The mask token is the last vocabulary entry, so drawing below it skips it.
  std::vector<std::size_t> out(length);
  for (auto& t : out) {
    t = static_cast<std::size_t>(rng.below(weights.config.n_vocab - 1));
    if (t >= weights.mask_token) ++t;
  }
  return out;
}

namespace {

std::uint64_t step_flops_actual(const CostModel& cost, ReuseMode mode, std::size_t window,
                                const std::vector<ReuseDecision>& decisions) {
  std::uint64_t total = 0;
  for (const auto& d : decisions) {
    total += cost.full_layer(window);
    const auto reused = static_cast<std::uint64_t>(d.reused.size());
    if (mode == ReuseMode::kv) total -= reused * cost.kv_saving();
    if (mode == ReuseMode::o) total -= reused * cost.o_saving(window);
  }
  return total;
}

struct Candidate {
  std::size_t position;
  std::size_t token;
  double confidence;
};

Candidate pick_token(std::span<const double> probs, std::size_t position, std::size_t mask,
                     double temperature, Rng& rng) {
  if (temperature == 0.0) {
    std::size_t best = mask == 0 ? 1 : 0;
    for (std::size_t j = 0; j < probs.size(); ++j) {
      if (j != mask && probs[j] > probs[best]) best = j;
    }
    return {position, best, probs[best]};
  }
  std::vector<double> logits(probs.size());
  for (std::size_t j = 0; j < probs.size(); ++j) {
    logits[j] = j == mask || probs[j] <= 0.0 ? -INFINITY : std::log(probs[j]) / temperature;
  }
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& z : logits) {
    z = std::isinf(z) ? 0.0 : std::exp(z - top);
    sum += z;
  }
  for (double& z : logits) z /= sum;
  const std::size_t j = sample_categorical(logits, rng.uniform());
  return {position, j, probs[j]};
}

}  // namespace

GenerationResult diffusion_generate(const ModelWeights& weights, const SamplerConfig& config,
                                    std::span<const std::size_t> prompt,
                                    const std::vector<Threshold>& tau_layer,
                                    const ReuseOptions& options, bool record_activations) {
  config.validate();
  weights.validate();
  const std::size_t mask = weights.mask_token;
  for (std::size_t t : prompt) {
    if (t >= weights.config.n_vocab) throw ContractError("diffusion_generate: prompt token out of range");
  }
  Rng rng(mix_seed(config.seed, 0x5A3B1E));
  const CostModel cost(weights.config);
  ReuseState state(weights.config, options, tau_layer);

  GenerationResult out;
  out.prompt.assign(prompt.begin(), prompt.end());
  out.trace.mode = options.mode;
  out.trace.layers = weights.config.layers;
  std::vector<std::size_t> window(prompt.begin(), prompt.end());

  for (std::size_t b = 0; b < config.blocks(); ++b) {
    const std::size_t start = window.size();
    window.resize(start + config.block_size, mask);
    state.reset();
    for (std::size_t t = 0; t < config.steps_per_block; ++t) {
      std::vector<std::size_t> masked;
      for (std::size_t i = start; i < window.size(); ++i) {
        if (window[i] == mask) masked.push_back(i);
      }
      if (masked.empty()) break;

      const Matrix x = embed_tokens(weights, window);
      auto fwd = forward_reuse(weights, x, state, t);

      std::vector<Candidate> cands;
      cands.reserve(masked.size());
      for (std::size_t i : masked) {
        cands.push_back(pick_token(fwd.result.probs.row(i), i, mask, config.temperature, rng));
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& c) {
        return a.confidence > c.confidence;
      });
      StepRecord rec;
      rec.block = b;
      rec.step = t;
      rec.window = window.size();
      rec.tokens = window;
      const std::size_t k = std::min(config.tokens_per_step, cands.size());
      for (std::size_t c = 0; c < k; ++c) {
        window[cands[c].position] = cands[c].token;
        rec.unmasked.push_back(cands[c].position);
      }
      std::sort(rec.unmasked.begin(), rec.unmasked.end());
      rec.flops_full = weights.config.layers * cost.full_layer(rec.window);
      rec.flops_actual = step_flops_actual(cost, options.mode, rec.window, fwd.decisions);
      rec.decisions = std::move(fwd.decisions);
      if (record_activations) rec.activations = std::move(fwd.result.layers);
      out.trace.steps.push_back(std::move(rec));
    }
    // A schedule that ends with masks left is rejected by validate(), so this
    // only guards against a logic error.
    for (std::size_t i = start; i < window.size(); ++i) {
      if (window[i] == mask) throw ContractError("diffusion_generate: block finished with masks left");
    }
  }
  out.tokens.assign(window.begin() + static_cast<std::ptrdiff_t>(prompt.size()), window.end());
  return out;
}

namespace {

double embed_distance(const Matrix& x, const Matrix& x_hat) {
  double total = 0.0;
  std::vector<double> diff(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t c = 0; c < x.cols(); ++c) diff[c] = x(i, c) - x_hat(i, c);
    total += norm2(diff);
  }
  return total;
}

}  // namespace

CoupledPair coupled_generate(const ModelWeights& weights, std::size_t steps,
                             const std::vector<Threshold>& tau_layer, const ReuseOptions& options,
                             Rng& rng) {
  if (options.mode == ReuseMode::full) throw ContractError("coupled_generate: reuse mode required");
  if (steps == 0) throw ContractError("coupled_generate: steps must be >= 1");
  weights.validate();
  const std::size_t n = weights.config.block_len;
  ReuseState state(weights.config, options, tau_layer);

  CoupledPair pair;
  pair.full_tokens.assign(n, weights.mask_token);
  pair.reuse_tokens.assign(n, weights.mask_token);
  for (std::size_t t = 0; t < steps; ++t) {
    const Matrix x = embed_tokens(weights, pair.full_tokens);
    const Matrix x_hat = embed_tokens(weights, pair.reuse_tokens);
    pair.per_step_embed_error.push_back(embed_distance(x, x_hat));

    const auto p = forward_full(weights, x).probs;
    const auto p_ref = forward_full(weights, x_hat).probs;
    auto fwd = forward_reuse(weights, x_hat, state, t);
    const Matrix& p_hat = fwd.result.probs;

    double gap = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < p_hat.cols(); ++j) gap += std::abs(p_ref(i, j) - p_hat(i, j));
    }
    pair.per_step_l1_gap.push_back(gap);
    pair.staleness.push_back(state.staleness(0));
    pair.decisions.push_back(std::move(fwd.decisions.front()));

    for (std::size_t i = 0; i < n; ++i) {
      const auto [j, j_hat] = maximal_coupling_sample(p.row(i), p_hat.row(i), rng);
      pair.full_tokens[i] = j;
      pair.reuse_tokens[i] = j_hat;
    }
  }
  pair.per_step_embed_error.push_back(
      embed_distance(embed_tokens(weights, pair.full_tokens), embed_tokens(weights, pair.reuse_tokens)));
  return pair;
}

}  // namespace dare
