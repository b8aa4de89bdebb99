#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hulm/model.hpp"

namespace hulm {

// Symmetric absmax int4: per block, scale = absmax / 7 and
// code = clamp(round(x / scale), -7, 7). Codes are packed two per byte,
// low nibble first, in two's complement.
struct QuantizedTensor {
  std::vector<std::uint8_t> packed_codes;
  std::vector<double> scales;
  std::size_t block_size = 64;
  std::size_t size = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  int code(std::size_t i) const;
};

inline constexpr std::size_t kDefaultQuantBlock = 64;

QuantizedTensor quantize_4bit(std::span<const double> values, std::size_t block_size = kDefaultQuantBlock);
QuantizedTensor quantize_4bit(const Matrix& m, std::size_t block_size = kDefaultQuantBlock);
std::vector<double> dequantize(const QuantizedTensor& q);
Matrix dequantize_matrix(const QuantizedTensor& q);

// Replaces the attention and feed-forward weight matrices of every layer by
// their 4-bit round trip. Embeddings, norms, biases and the head stay dense.
LmParameters quantize_frozen_weights(const LmParameters& params, std::size_t block_size = kDefaultQuantBlock);

}  // namespace hulm
