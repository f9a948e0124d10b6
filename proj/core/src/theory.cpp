#include "dare/theory.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dare/error.hpp"
#include "dare/sampler.hpp"

namespace dare {

namespace {

void require_regime(const ModelConfig& c) {
  if (!c.theory_regime()) {
    throw RegimeError("error bounds need a single-layer, single-head model (got L=" +
                      std::to_string(c.layers) + ", H=" + std::to_string(c.heads) + ")");
  }
}

}  // namespace

WeightNorms weight_norms(const ModelWeights& weights) {
  require_regime(weights.config);
  const auto& lw = weights.layers.front();
  WeightNorms n;
  n.d = static_cast<double>(weights.config.d_model);
  n.block_len = static_cast<double>(weights.config.block_len);
  n.g_sigma = activation_lipschitz(weights.config.activation);
  n.e_2_inf = norm_2_to_inf(weights.embedding);
  n.e_2_1 = norm_2_to_1_upper(weights.embedding);
  n.w_q = spectral_norm(lw.w_q);
  n.w_k = spectral_norm(lw.w_k);
  n.w_v = spectral_norm(lw.w_v);
  n.w_o = spectral_norm(lw.w_o);
  n.w_u = spectral_norm(lw.w_u);
  n.w_d = spectral_norm(lw.w_d);
  n.w_q_f = frobenius_norm(lw.w_q);
  n.w_k_f = frobenius_norm(lw.w_k);
  n.w_v_f = frobenius_norm(lw.w_v);
  n.w_o_f = frobenius_norm(lw.w_o);
  n.kappa_q = condition_kappa(lw.w_q);
  return n;
}

double lipschitz_G(const WeightNorms& n) {
  const double r2 = n.d;  // squared input row norm
  return n.e_2_1 * n.w_d * n.g_sigma * n.w_u * n.w_o * n.w_v * n.block_len *
         (2.0 * r2 * n.w_q * n.w_k / std::sqrt(n.d) + 1.0);
}

double lipschitz_G(const ModelWeights& weights) { return lipschitz_G(weight_norms(weights)); }

double tau_tilde(double tau, double d, double kappa_q) {
  if (tau < 0.0 || kappa_q < 1.0) throw ContractError("tau_tilde: need tau >= 0 and kappa >= 1");
  const double k2 = kappa_q * kappa_q;
  return 2.0 * tau * d * k2 / (2.0 + tau * (k2 - 1.0));
}

double x_diff_bound(double tau, double d, double kappa_q) { return 2.0 * tau_tilde(tau, d, kappa_q); }

double kv_constant(const WeightNorms& n) {
  return std::sqrt(2.0) * n.block_len * n.e_2_inf * n.w_d * n.g_sigma * n.w_u * n.w_o *
         (n.w_v + n.w_v * n.w_q / std::sqrt(n.d));
}

double kv_step_bound(const WeightNorms& n, double tau, double delta_l2) {
  return kv_constant(n) * std::sqrt(tau_tilde(tau, n.d, n.kappa_q)) * delta_l2;
}

double kv_step_bound(const ModelWeights& weights, double tau, double delta_l2) {
  return kv_step_bound(weight_norms(weights), tau, delta_l2);
}

double o_step_bound(const WeightNorms& n, double tau, std::span<const std::size_t> delta) {
  const double step = std::sqrt(x_diff_bound(tau, n.d, n.kappa_q));  // one-step input movement
  const double diameter = 2.0 * std::sqrt(n.d);
  const double head = n.e_2_inf * n.w_d * n.g_sigma * n.w_u;
  const double value_norm = std::sqrt(n.d) * n.w_v_f;  // ||v_j|| <= sqrt(d) ||W_V||_F

  double total = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    if (delta[i] == 0) continue;
    const double lag = static_cast<double>(delta[i]);
    // Movement of every input since the cached row was computed. Tokens that
    // were refreshed inside the lag window are only bounded by the diameter.
    double sum_sq = 0.0;
    for (std::size_t j = 0; j < delta.size(); ++j) {
      const double b = delta[j] >= delta[i] ? std::min(lag * step, diameter) : diameter;
      sum_sq += b * b;
    }
    const double moved = std::sqrt(sum_sq);
    const double own = std::min(lag * step, diameter);
    const double term_q = n.w_q_f * n.w_k_f * own * value_norm;
    const double term_k = n.w_q_f * n.w_k_f * moved * value_norm;
    const double term_v = n.w_v_f * moved;
    total += head * n.w_o_f * (term_q + term_k + term_v);
  }
  return total;
}

double o_step_bound(const ModelWeights& weights, double tau, std::span<const std::size_t> delta) {
  return o_step_bound(weight_norms(weights), tau, delta);
}

std::vector<double> cumulative_series(double G, std::span<const double> per_step) {
  if (G < 0.0) throw ContractError("cumulative_series: G must be >= 0");
  std::vector<double> e(per_step.size() + 1, 0.0);
  for (std::size_t t = 0; t < per_step.size(); ++t) e[t + 1] = G * e[t] + per_step[t];
  return e;
}

double cumulative_bound(double G, std::span<const double> per_step) {
  return cumulative_series(G, per_step).back();
}

double softmax_l1_gap(std::span<const double> z, std::span<const double> z2) {
  if (z.size() != z2.size()) throw ContractError("softmax_l1_gap: size mismatch");
  const auto a = softmax(z);
  const auto b = softmax(z2);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) gap += std::abs(a[i] - b[i]);
  return gap;
}

TheoryReport verify_run(const ModelWeights& weights, const std::vector<Threshold>& tau_layer,
                        const ReuseOptions& options, const VerifyOptions& verify) {
  require_regime(weights.config);
  if (options.mode == ReuseMode::full) throw ContractError("verify_run: reuse mode required");
  if (verify.trials == 0 || verify.steps == 0) throw ContractError("verify_run: trials and steps must be >= 1");
  if (tau_layer.size() != 1) throw ContractError("verify_run: expected one threshold");

  const WeightNorms norms = weight_norms(weights);
  const double tau = tau_layer.front().value_or(0.0);
  const double r_in = std::sqrt(norms.d);
  const std::size_t T = verify.steps;

  TheoryReport rep;
  rep.mode = options.mode;
  rep.tau = tau_layer.front();
  rep.trials = verify.trials;
  rep.G = lipschitz_G(norms);
  rep.kappa_q = norms.kappa_q;
  rep.tau_tilde = tau_tilde(tau, norms.d, norms.kappa_q);
  rep.C_W = kv_constant(norms);
  rep.per_step_bound.assign(T, 0.0);
  rep.per_step_empirical.assign(T, 0.0);
  rep.per_step_worst_slack.assign(T, -INFINITY);
  rep.cumulative_empirical.assign(T + 1, 0.0);

  const Rng master(verify.seed);
  double reuse_sum = 0.0;
  for (std::size_t trial = 0; trial < verify.trials; ++trial) {
    Rng rng = master.fork(trial);
    const auto pair = coupled_generate(weights, T, tau_layer, options, rng);
    std::size_t reused = 0;
    std::size_t eligible = 0;
    for (std::size_t t = 0; t < T; ++t) {
      const auto& delta = pair.staleness[t];
      double bound = 0.0;
      if (options.mode == ReuseMode::kv) {
        double l2 = 0.0;
        for (std::size_t dl : delta) l2 += static_cast<double>(dl) * static_cast<double>(dl);
        bound = kv_step_bound(norms, tau, std::sqrt(l2));
      } else {
        bound = o_step_bound(norms, tau, delta);
      }
      const double gap = pair.per_step_l1_gap[t];
      if (gap > bound + verify.tolerance) ++rep.per_step_violations;
      rep.per_step_worst_slack[t] = std::max(rep.per_step_worst_slack[t], gap - bound);
      rep.per_step_bound[t] += bound;
      rep.per_step_empirical[t] += gap;
      const auto& dec = pair.decisions[t];
      reused += dec.reused.size();
      if (!dec.gated) eligible += delta.size();
    }
    for (std::size_t t = 0; t <= T; ++t) rep.cumulative_empirical[t] += pair.per_step_embed_error[t];
    reuse_sum += eligible == 0 ? 0.0 : static_cast<double>(reused) / static_cast<double>(eligible);
  }
  const double trials = static_cast<double>(verify.trials);
  for (auto& x : rep.per_step_bound) x /= trials;
  for (auto& x : rep.per_step_empirical) x /= trials;
  for (auto& x : rep.cumulative_empirical) x /= trials;
  rep.mean_reuse_fraction = reuse_sum / trials;

  // A disagreement of one token moves the embedding by at most 2 r_in, and
  // disagreement happens with probability TV = l1 / 2. Hence both the
  // propagation constant and the per-step term pick up a factor r_in.
  std::vector<double> scaled_steps(T);
  for (std::size_t t = 0; t < T; ++t) scaled_steps[t] = r_in * rep.per_step_bound[t];
  const double g_eff = verify.debug_zero_g ? 0.0 : r_in * rep.G;
  rep.cumulative_bound = cumulative_series(g_eff, scaled_steps);
  for (std::size_t t = 0; t <= T; ++t) {
    if (rep.cumulative_empirical[t] > rep.cumulative_bound[t] + verify.tolerance) {
      ++rep.cumulative_violations;
    }
  }

  Rng srng = master.fork(0x50F7);
  const std::size_t dim = weights.config.n_vocab;
  std::vector<double> z(dim), z2(dim);
  for (std::size_t s = 0; s < verify.softmax_pairs; ++s) {
    double inf = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      z[j] = 3.0 * srng.normal();
      z2[j] = z[j] + srng.normal();
      inf = std::max(inf, std::abs(z[j] - z2[j]));
    }
    ++rep.softmax_checks;
    if (softmax_l1_gap(z, z2) > inf + verify.tolerance) ++rep.softmax_violations;
  }

  rep.violations = rep.per_step_violations + rep.cumulative_violations + rep.softmax_violations;
  return rep;
}

namespace {

// Gram-Schmidt on a Gaussian matrix, column by column.
Matrix random_orthogonal(std::size_t d, Rng& rng) {
  Matrix m(d, d);
  for (;;) {
    for (double& x : m.data()) x = rng.normal();
    bool ok = true;
    for (std::size_t c = 0; c < d && ok; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double proj = 0.0;
        for (std::size_t r = 0; r < d; ++r) proj += m(r, c) * m(r, p);
        for (std::size_t r = 0; r < d; ++r) m(r, c) -= proj * m(r, p);
      }
      double nrm = 0.0;
      for (std::size_t r = 0; r < d; ++r) nrm += m(r, c) * m(r, c);
      nrm = std::sqrt(nrm);
      if (nrm < 1e-8) {
        ok = false;
        break;
      }
      for (std::size_t r = 0; r < d; ++r) m(r, c) /= nrm;
    }
    if (ok) return m;
  }
}

void random_sphere(Rng& rng, std::span<double> out, double radius) {
  double nrm = 0.0;
  do {
    for (double& x : out) x = rng.normal();
    nrm = norm2(out);
  } while (nrm < 1e-12);
  for (double& x : out) x *= radius / nrm;
}

}  // namespace

Matrix random_matrix_with_kappa(std::size_t d, double kappa, Rng& rng) {
  if (d == 0 || kappa < 1.0) throw ContractError("random_matrix_with_kappa: need d >= 1, kappa >= 1");
  std::vector<double> sigma(d, 1.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double frac = d == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(d - 1);
    sigma[i] = std::pow(kappa, frac);
  }
  const Matrix u = random_orthogonal(d, rng);
  const Matrix v = random_orthogonal(d, rng);
  return matmul(matmul(u, Matrix::diagonal(sigma)), transpose(v));
}

GeometricCheck geometric_lemma_check(const Matrix& w_q, double tau, std::size_t accepted, Rng& rng) {
  const std::size_t d = w_q.rows();
  if (d == 0 || w_q.cols() != d) throw ContractError("geometric_lemma_check: W_Q must be square");
  GeometricCheck out;
  out.kappa = condition_kappa(w_q);
  const double dd = static_cast<double>(d);
  const double bound = x_diff_bound(tau, dd, out.kappa);
  const double radius = std::sqrt(dd);
  // Perturbation sizes up to a few times the isotropic boundary keep the
  // acceptance rate reasonable while still reaching the boundary.
  const double s_max = 2.0 * std::sqrt(2.0 * tau) * out.kappa;

  std::vector<double> x(d), y(d), noise(d), qx(d), qy(d), diff(d);
  const std::size_t max_proposals = 1000 * accepted + 100000;
  while (out.accepted < accepted && out.proposed < max_proposals) {
    ++out.proposed;
    random_sphere(rng, x, radius);
    random_sphere(rng, noise, radius);
    const double s = s_max * rng.uniform();
    for (std::size_t i = 0; i < d; ++i) y[i] = x[i] + s * noise[i];
    const double ny = norm2(y);
    if (ny < 1e-12) continue;
    for (double& c : y) c *= radius / ny;
    matmul_row(x, w_q, qx);
    matmul_row(y, w_q, qy);
    if (norm2(qx) == 0.0 || norm2(qy) == 0.0) continue;
    if (drift_score(qx, qy) > tau) continue;
    ++out.accepted;
    for (std::size_t i = 0; i < d; ++i) diff[i] = x[i] - y[i];
    const double dist2 = dot(diff, diff);
    if (dist2 > bound + 1e-9) ++out.violations;
    if (bound > 0.0) out.max_ratio = std::max(out.max_ratio, dist2 / bound);
  }
  return out;
}

}  // namespace dare
