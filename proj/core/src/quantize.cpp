#include "hulm/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace hulm {

int QuantizedTensor::code(std::size_t i) const {
  const std::uint8_t byte = packed_codes.at(i / 2);
  const int nibble = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  return nibble >= 8 ? nibble - 16 : nibble;
}

QuantizedTensor quantize_4bit(std::span<const double> values, std::size_t block_size) {
  if (block_size == 0) throw std::invalid_argument("block_size must be at least 1");
  QuantizedTensor q;
  q.block_size = block_size;
  q.size = values.size();
  q.rows = 1;
  q.cols = values.size();
  q.packed_codes.assign((values.size() + 1) / 2, 0);
  q.scales.reserve((values.size() + block_size - 1) / block_size);
  for (std::size_t begin = 0; begin < values.size(); begin += block_size) {
    const std::size_t end = std::min(values.size(), begin + block_size);
    double absmax = 0.0;
    for (std::size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::abs(values[i]));
    const double scale = absmax / 7.0;
    q.scales.push_back(scale);
    for (std::size_t i = begin; i < end; ++i) {
      int c = 0;
      if (scale > 0.0) c = static_cast<int>(std::clamp(std::nearbyint(values[i] / scale), -7.0, 7.0));
      const auto nibble = static_cast<std::uint8_t>(c & 0x0F);
      q.packed_codes[i / 2] |= (i % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
    }
  }
  return q;
}

QuantizedTensor quantize_4bit(const Matrix& m, std::size_t block_size) {
  auto q = quantize_4bit(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), block_size);
  q.rows = static_cast<std::size_t>(m.rows());
  q.cols = static_cast<std::size_t>(m.cols());
  return q;
}

std::vector<double> dequantize(const QuantizedTensor& q) {
  std::vector<double> out(q.size);
  for (std::size_t i = 0; i < q.size; ++i) out[i] = q.code(i) * q.scales[i / q.block_size];
  return out;
}

Matrix dequantize_matrix(const QuantizedTensor& q) {
  const auto values = dequantize(q);
  Matrix m(static_cast<Eigen::Index>(q.rows), static_cast<Eigen::Index>(q.cols));
  std::copy(values.begin(), values.end(), m.data());
  return m;
}

LmParameters quantize_frozen_weights(const LmParameters& params, std::size_t block_size) {
  LmParameters out = params;
  for (auto& L : out.layers) {
    for (Matrix* w : {&L.wq, &L.wk, &L.wv, &L.wo, &L.w1, &L.w2}) {
      *w = dequantize_matrix(quantize_4bit(*w, block_size));
    }
  }
  return out;
}

}  // namespace hulm
