#include <doctest.h>

#include <cmath>
#include <random>

#include "hulm/quantize.hpp"
#include "oracles.hpp"

using namespace hulm;

TEST_CASE("known block") {
  const std::vector<double> v{0.7, -0.35, 0.1, 0.0};
  const auto q = quantize_4bit(v, 4);
  REQUIRE(q.scales.size() == 1);
  CHECK(q.scales[0] == doctest::Approx(0.1));
  CHECK(q.code(0) == 7);
  CHECK((q.code(1) == -3 || q.code(1) == -4));
  CHECK(q.code(2) == 1);
  CHECK(q.code(3) == 0);
}

TEST_CASE("zero block stays zero") {
  const std::vector<double> v(10, 0.0);
  for (double x : dequantize(quantize_4bit(v, 4))) CHECK(x == 0.0);
}

TEST_CASE("codes pack two per byte") {
  const std::vector<double> v{-7, 7, -1, 1, 3};
  const auto q = quantize_4bit(v, 8);
  CHECK(q.packed_codes.size() == 3);
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(q.code(i) == static_cast<int>(v[i]));
}

TEST_CASE("round trip matches oracle and error bound") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 2.0);
  for (std::size_t block : {1u, 7u, 64u}) {
    std::vector<double> v(1000);
    for (auto& x : v) x = n(rng);
    const auto back = dequantize(quantize_4bit(v, block));
    for (std::size_t b = 0; b < v.size(); b += block) {
      const std::size_t e = std::min(v.size(), b + block);
      const auto expect = oracle::absmax_roundtrip(std::span<const double>(v).subspan(b, e - b));
      double amax = 0;
      for (std::size_t i = b; i < e; ++i) amax = std::max(amax, std::abs(v[i]));
      for (std::size_t i = b; i < e; ++i) {
        CHECK(std::abs(back[i] - expect[i - b]) <= 1e-12);
        CHECK(std::abs(back[i] - v[i]) <= amax / 14 + 1e-12);
      }
    }
  }
}

TEST_CASE("matrix shape preserved and only weights quantized") {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_positions = 8;
  const auto p = init_parameters(c);
  const auto q = quantize_frozen_weights(p, 16);
  CHECK(q.layers[0].wq.rows() == p.layers[0].wq.rows());
  CHECK(q.layers[0].wq != p.layers[0].wq);
  CHECK(q.token_embedding == p.token_embedding);
  CHECK(q.layers[1].b1 == p.layers[1].b1);
  CHECK(q.output_head == p.output_head);
  CHECK_THROWS_AS(quantize_4bit(std::vector<double>{1.0}, 0), std::invalid_argument);
}
