#include "dare/model.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "dare/error.hpp"
#include "dare/rng.hpp"

namespace dare {

std::string_view to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

Activation activation_from_string(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ContractError("unknown activation '" + std::string(name) + "'");
}

double activation_lipschitz(Activation a) { return a == Activation::relu ? 1.0 : 1.13; }

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || d_model < 1 || d_int < 1 || block_len < 1) {
    throw ContractError("ModelConfig: all counts must be >= 1");
  }
  if (n_vocab < 2) throw ContractError("ModelConfig: n_vocab must be >= 2");
  if (d_model % heads != 0) {
    throw ContractError("ModelConfig: d_model " + std::to_string(d_model) +
                        " not divisible by heads " + std::to_string(heads));
  }
}

void ModelWeights::validate() const {
  config.validate();
  const std::size_t d = config.d_model;
  auto check = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw ContractError(std::string("ModelWeights: bad shape for ") + name);
    }
    for (double x : m.data()) {
      if (!std::isfinite(x)) throw ContractError(std::string("ModelWeights: non-finite ") + name);
    }
  };
  if (layers.size() != config.layers) throw ContractError("ModelWeights: layer count mismatch");
  for (const auto& l : layers) {
    check(l.w_q, d, d, "w_q");
    check(l.w_k, d, d, "w_k");
    check(l.w_v, d, d, "w_v");
    check(l.w_o, d, d, "w_o");
    check(l.w_u, d, config.d_int, "w_u");
    check(l.w_d, config.d_int, d, "w_d");
  }
  check(embedding, config.n_vocab, d, "embedding");
  if (mask_token >= config.n_vocab) throw ContractError("ModelWeights: mask token out of range");
  if (radius != norm_2_to_inf(embedding)) {
    throw ContractError("ModelWeights: radius does not match the embedding");
  }
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(rows, cols);
  for (double& x : m.data()) x = stddev * rng.normal();
  return m;
}

double apply_activation(double x, Activation a) {
  if (a == Activation::relu) return x > 0.0 ? x : 0.0;
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

}  // namespace

ModelWeights init_weights(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));

  ModelWeights w;
  w.config = config;
  w.layers.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights layer;
    layer.w_q = gaussian(rng, d, d, stddev);
    layer.w_k = gaussian(rng, d, d, stddev);
    layer.w_v = gaussian(rng, d, d, stddev);
    layer.w_o = gaussian(rng, d, d, stddev);
    layer.w_u = gaussian(rng, d, config.d_int, stddev);
    layer.w_d = gaussian(rng, config.d_int, d, stddev);
    w.layers.push_back(std::move(layer));
  }
  w.embedding = gaussian(rng, config.n_vocab, d, stddev);
  w.embedding = scaled(w.embedding, 1.0 / norm_2_to_inf(w.embedding));
  w.mask_token = config.n_vocab - 1;
  w.radius = norm_2_to_inf(w.embedding);
  return w;
}

Matrix embed_tokens(const ModelWeights& weights, std::span<const std::size_t> tokens) {
  const std::size_t d = weights.config.d_model;
  Matrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= weights.config.n_vocab) {
      throw ContractError("embed_tokens: token " + std::to_string(tokens[i]) + " out of range");
    }
    auto src = weights.embedding.row(tokens[i]);
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return row_normalize_sqrt_d(x);
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

void project_rows(const Matrix& x, const Matrix& w, std::span<const std::size_t> rows,
                  Matrix& out) {
  if (x.cols() != w.rows() || out.rows() != x.rows() || out.cols() != w.cols()) {
    throw ContractError("project_rows: shape mismatch");
  }
  for (std::size_t i : rows) matmul_row(x.row(i), w, out.row(i));
}

void attention_rows(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                    std::span<const std::size_t> rows, Matrix& out) {
  const std::size_t n = k.rows();
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != n || q.rows() != n || heads == 0 ||
      d % heads != 0 || out.rows() != n || out.cols() != d) {
    throw ContractError("attention_rows: shape mismatch");
  }
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores(n);
  for (std::size_t i : rows) {
    auto out_row = out.row(i);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      auto qi = q.row(i).subspan(c0, dh);
      for (std::size_t j = 0; j < n; ++j) scores[j] = dot(qi, k.row(j).subspan(c0, dh)) * scale;
      softmax_inplace(scores);
      for (std::size_t c = 0; c < dh; ++c) out_row[c0 + c] = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        auto vj = v.row(j);
        for (std::size_t c = 0; c < dh; ++c) out_row[c0 + c] += scores[j] * vj[c0 + c];
      }
    }
  }
}

Matrix mlp(const LayerWeights& layer, const Matrix& o, Activation activation) {
  Matrix up = matmul(o, layer.w_u);
  for (double& x : up.data()) x = apply_activation(x, activation);
  return matmul(up, layer.w_d);
}

Matrix next_layer_input(const Matrix& x, const Matrix& h) { return row_normalize_sqrt_d(add(x, h)); }

Matrix output_probs(const ModelWeights& weights, const Matrix& h) {
  return row_softmax(matmul_transposed(h, weights.embedding));
}

ForwardResult forward_full(const ModelWeights& weights, const Matrix& x) {
  const auto& cfg = weights.config;
  if (x.cols() != cfg.d_model || x.rows() == 0) throw ContractError("forward_full: bad input shape");
  const double target = std::sqrt(static_cast<double>(cfg.d_model));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (std::abs(norm2(x.row(i)) - target) > 1e-9 * target) {
      throw ContractError("forward_full: input row " + std::to_string(i) + " is not normalized");
    }
  }
  const std::size_t n = x.rows();
  const auto rows = all_rows(n);

  ForwardResult result;
  result.layers.reserve(cfg.layers);
  Matrix input = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lw = weights.layers[l];
    LayerActivations act;
    act.x = input;
    act.q = matmul(input, lw.w_q);
    act.k = matmul(input, lw.w_k);
    act.v = matmul(input, lw.w_v);
    act.attn = Matrix(n, cfg.d_model);
    attention_rows(act.q, act.k, act.v, cfg.heads, rows, act.attn);
    act.o = matmul(act.attn, lw.w_o);
    act.h = mlp(lw, act.o, cfg.activation);
    if (l + 1 < cfg.layers) input = next_layer_input(input, act.h);
    result.layers.push_back(std::move(act));
  }
  result.probs = output_probs(weights, result.layers.back().h);
  return result;
}

}  // namespace dare
