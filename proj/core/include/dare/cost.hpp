#pragma once

#include <cstddef>
#include <cstdint>

#include "dare/model.hpp"

namespace dare {

// Dense FLOP counts. A multiply-add is 2 FLOPs and softmax costs 5 FLOPs per
// element. Only the transformer layers are counted (not the unembedding).
struct CostModel {
  std::uint64_t d = 0;
  std::uint64_t d_int = 0;
  std::uint64_t heads = 1;

  explicit CostModel(const ModelConfig& c) : d(c.d_model), d_int(c.d_int), heads(c.heads) {}

  /// One of W_Q, W_K, W_V for one token.
  std::uint64_t projection() const { return 2 * d * d; }
  /// Scores, softmax and weighted sum for one query row against n keys.
  std::uint64_t attention_row(std::uint64_t n) const { return 4 * n * d + 5 * n * heads; }
  std::uint64_t output_projection() const { return 2 * d * d; }
  std::uint64_t mlp() const { return 4 * d * d_int; }

  /// One token through one layer with nothing reused.
  std::uint64_t token_layer(std::uint64_t n) const {
    return 3 * projection() + attention_row(n) + output_projection() + mlp();
  }
  /// One layer over a window of n tokens with nothing reused.
  std::uint64_t full_layer(std::uint64_t n) const { return n * token_layer(n); }

  /// Saved by one reused token in kv mode: its K and V projections.
  std::uint64_t kv_saving() const { return 2 * projection(); }
  /// Saved by one reused row in o mode: its attention row.
  std::uint64_t o_saving(std::uint64_t n) const { return attention_row(n); }
};

}  // namespace dare
