#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dare/model.hpp"

namespace dare {

// Weight file layout (all integers little-endian):
//
//   bytes 0..3   magic "DARE"
//   bytes 4..7   u32 version (= 1)
//   bytes 8..11  u32 header length N
//   next N bytes UTF-8 JSON header: {"config": {...}, "mask_token": m,
//                "tensors": [{"name", "rows", "cols", "offset"}, ...]}
//   payload      raw little-endian f64 values in manifest order; "offset" is
//                the byte offset of a tensor from the start of the payload.

inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct TensorEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
};

std::vector<std::uint8_t> encode_weights(const ModelWeights& weights);
ModelWeights decode_weights(const std::vector<std::uint8_t>& bytes);
/// Parses only the header manifest.
std::vector<TensorEntry> read_manifest(const std::vector<std::uint8_t>& bytes,
                                       std::size_t* payload_start = nullptr);

void save_weights(const std::filesystem::path& path, const ModelWeights& weights);
ModelWeights load_weights(const std::filesystem::path& path);

}  // namespace dare
