#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dare/linalg.hpp"

namespace dare {

enum class Activation { relu, gelu };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

/// Lipschitz constant of the MLP nonlinearity: 1 for ReLU, 1.13 for GELU
/// (the maximum of GELU's derivative is about 1.1289).
double activation_lipschitz(Activation a);

/// Architecture of the toy bidirectional denoiser.
struct ModelConfig {
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t d_model = 8;
  std::size_t d_int = 32;
  std::size_t n_vocab = 16;
  /// Tokens per denoising window. The theory harness uses it as the sequence
  /// length; generation uses the sampler's block size.
  std::size_t block_len = 4;
  Activation activation = Activation::relu;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t d_head() const { return d_model / heads; }
  /// Single layer, single head: the setting the error bounds are proven for.
  bool theory_regime() const { return layers == 1 && heads == 1; }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix w_q;  // d x d
  Matrix w_k;  // d x d
  Matrix w_v;  // d x d
  Matrix w_o;  // d x d
  Matrix w_u;  // d x d_int
  Matrix w_d;  // d_int x d

  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  std::vector<LayerWeights> layers;
  /// Shared input embedding and output unembedding, n_vocab x d.
  Matrix embedding;
  std::size_t mask_token = 0;
  /// Largest Euclidean row norm of the embedding.
  double radius = 0.0;

  /// Recomputes radius and checks shapes and finiteness.
  void validate() const;
  bool operator==(const ModelWeights&) const = default;
};

/// Intermediate activations of one layer, all window_len x d.
struct LayerActivations {
  Matrix x;     // normalized layer input
  Matrix q;
  Matrix k;
  Matrix v;
  Matrix attn;  // attention output before W_O
  Matrix o;     // attn * W_O
  Matrix h;     // MLP output
};

struct ForwardResult {
  Matrix probs;  // window_len x n_vocab
  std::vector<LayerActivations> layers;
};

/// Gaussian weights with standard deviation 1/sqrt(d); embedding rows are
/// rescaled so the largest row norm is exactly 1. The last vocabulary entry
/// is the mask token.
ModelWeights init_weights(const ModelConfig& config);

/// Looks up and normalizes token embeddings (row norm sqrt(d)).
Matrix embed_tokens(const ModelWeights& weights, std::span<const std::size_t> tokens);

/// Full forward pass without any reuse. x must be row-normalized.
ForwardResult forward_full(const ModelWeights& weights, const Matrix& x);

// Building blocks shared by the full and the reuse paths.

/// Scaled dot-product attention for the listed query rows only; other rows of
/// out are left untouched. Heads split the columns evenly.
void attention_rows(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                    std::span<const std::size_t> rows, Matrix& out);
/// Projects only the listed rows of x through w into out.
void project_rows(const Matrix& x, const Matrix& w, std::span<const std::size_t> rows,
                  Matrix& out);
/// sigma(o W_U) W_D
Matrix mlp(const LayerWeights& layer, const Matrix& o, Activation activation);
/// Input of the next layer: normalize(x + h).
Matrix next_layer_input(const Matrix& x, const Matrix& h);
/// Row softmax of h E^T.
Matrix output_probs(const ModelWeights& weights, const Matrix& h);

std::vector<std::size_t> all_rows(std::size_t n);

}  // namespace dare
