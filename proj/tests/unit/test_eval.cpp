#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "hulm/error.hpp"
#include "hulm/eval.hpp"
#include "oracles.hpp"

using namespace hulm;

TEST_CASE("weighted_f1 examples") {
  const std::vector<int> y{0, 0, 1};
  CHECK(weighted_f1(y, y) == 1.0);
  CHECK(weighted_f1(std::vector<int>{0, 0, 1}, std::vector<int>{0, 1, 1}) == doctest::Approx(2.0 / 3.0));
  CHECK(weighted_f1(std::vector<int>{0, 1, 0, 1}, std::vector<int>{1, 0, 1, 0}) == 0.0);
  CHECK_THROWS_AS(weighted_f1(std::vector<int>{0}, std::vector<int>{0, 1}), DataError);
  CHECK_THROWS_AS(weighted_f1(std::vector<int>{}, std::vector<int>{}), DataError);
}

TEST_CASE("pearson_r examples") {
  const std::vector<double> x{1, 2, 3};
  const std::vector<double> neg{-1, -2, -3};
  CHECK(pearson_r(x, x) == doctest::Approx(1.0));
  CHECK(pearson_r(x, neg) == doctest::Approx(-1.0));
  CHECK(pearson_r(x, std::vector<double>{1, 2, 4}) == doctest::Approx(3.0 / std::sqrt(2.0 * 14.0 / 3.0)));
  CHECK_THROWS_WITH_AS(pearson_r(x, std::vector<double>{5, 5, 5}), "degenerate correlation", DataError);
  CHECK_THROWS_AS(pearson_r(std::vector<double>{1}, std::vector<double>{2}), DataError);
}

TEST_CASE("metrics match oracles on random cases") {
  std::mt19937_64 rng(99);
  for (int c = 0; c < 100; ++c) {
    const std::size_t n = 2 + rng() % 40;
    const int k = 2 + static_cast<int>(rng() % 4);
    std::vector<int> y(n), p(n);
    for (auto& v : y) v = static_cast<int>(rng() % k);
    for (auto& v : p) v = static_cast<int>(rng() % k);
    CHECK(std::abs(weighted_f1(y, p) - oracle::weighted_f1(y, p)) <= 1e-10);

    std::normal_distribution<double> nd;
    std::vector<double> x(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = nd(rng);
      z[i] = 0.5 * x[i] + nd(rng);
    }
    CHECK(std::abs(pearson_r(x, z) - oracle::pearson(x, z)) <= 1e-10);
  }
}

TEST_CASE("metric invariances") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::vector<double> x(30), y(30);
  std::vector<int> a(30), b(30);
  for (std::size_t i = 0; i < 30; ++i) {
    x[i] = nd(rng);
    y[i] = x[i] + nd(rng);
    a[i] = static_cast<int>(rng() % 3);
    b[i] = static_cast<int>(rng() % 3);
  }
  const double r = pearson_r(x, y);
  const double f = weighted_f1(a, b);
  std::vector<std::size_t> order(30);
  for (std::size_t i = 0; i < 30; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> x2, y2;
  std::vector<int> a2, b2;
  for (auto i : order) {
    x2.push_back(x[i]);
    y2.push_back(y[i]);
    a2.push_back(a[i]);
    b2.push_back(b[i]);
  }
  CHECK(pearson_r(x2, y2) == doctest::Approx(r).epsilon(1e-12));
  CHECK(weighted_f1(a2, b2) == doctest::Approx(f).epsilon(1e-12));
  std::vector<double> affine(x);
  for (auto& v : affine) v = 3.5 * v - 2.0;
  CHECK(pearson_r(affine, y) == doctest::Approx(r).epsilon(1e-12));
  CHECK(weighted_f1(a, a) == 1.0);
}

TEST_CASE("incomplete beta and t cdf") {
  CHECK(regularized_incomplete_beta(1, 1, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(regularized_incomplete_beta(2, 3, 0.0) == 0.0);
  CHECK(regularized_incomplete_beta(2, 3, 1.0) == 1.0);
  // I_x(a, 1) = x^a
  CHECK(regularized_incomplete_beta(3.5, 1, 0.6) == doctest::Approx(std::pow(0.6, 3.5)).epsilon(1e-12));
  CHECK(student_t_cdf(0.0, 4) == doctest::Approx(0.5));
  // dof 1 is Cauchy
  CHECK(student_t_cdf(1.0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(student_t_cdf(-2.0, 7) + student_t_cdf(2.0, 7) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("paired t-test") {
  const std::vector<double> a{1, 2, 3, 4};
  CHECK(paired_t_test(a, a) == 1.0);
  const std::vector<double> zero(4, 0.0);
  CHECK(paired_t_test(std::vector<double>{1, -1, 1, -1}, zero) == 1.0);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1}, std::vector<double>{0}), DataError);

  const std::vector<double> d{1.0, 1.1, 0.9, 1.2, 0.8};
  const std::vector<double> z5(5, 0.0);
  const auto r = paired_t_test_detail(d, z5);
  CHECK(r.dof == 4);
  CHECK(std::abs(r.p_value - oracle::t_two_sided_p(r.t, 4)) <= 1e-6);

  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd(0.3, 1.0);
  for (int c = 0; c < 5; ++c) {
    std::vector<double> x(3 + c * 4), y(3 + c * 4);
    for (auto& v : x) v = nd(rng);
    for (auto& v : y) v = nd(rng) - 0.2;
    const auto t = paired_t_test_detail(x, y);
    CHECK(std::abs(t.p_value - oracle::t_two_sided_p(t.t, t.dof)) <= 1e-6);
  }

  const auto constant = paired_t_test_detail(std::vector<double>{2, 3}, std::vector<double>{1, 2});
  CHECK(std::isinf(constant.t));
  CHECK(constant.p_value > 0.0);
}

TEST_CASE("permutation test") {
  const std::vector<double> a{0.3, 0.9, 0.5};
  CHECK(permutation_test(a, a) == 1.0);

  SUBCASE("hand enumeration n = 3") {
    // d = [1, 2, 4]: |sum| over the 8 sign patterns is 7,5,3,1,1,3,5,7, so
    // exactly two reach 7.
    const std::vector<double> x{1, 2, 4};
    const std::vector<double> y(3, 0.0);
    CHECK(permutation_test(x, y) == 0.25);
  }

  SUBCASE("exhaustive matches oracle for n <= 8") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    for (std::size_t n = 1; n <= 8; ++n) {
      for (int c = 0; c < 5; ++c) {
        std::vector<double> x(n), y(n);
        for (auto& v : x) v = nd(rng) + 0.5;
        for (auto& v : y) v = nd(rng);
        CHECK(permutation_test(x, y, 10000, 1) == oracle::sign_flip_p(x, y));
      }
    }
    // Ties in the statistic.
    const std::vector<double> t{1, 1, 1, 1};
    const std::vector<double> z(4, 0.0);
    CHECK(permutation_test(t, z) == oracle::sign_flip_p(t, z));
  }

  SUBCASE("sampled mode is stable and seeded") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> nd;
    std::vector<double> x(40), y(40);
    for (auto& v : x) v = nd(rng) + 0.2;
    for (auto& v : y) v = nd(rng);
    const double p1 = permutation_test(x, y, 10000, 1);
    const double p2 = permutation_test(x, y, 10000, 2);
    CHECK(std::abs(p1 - p2) <= 2.0 / std::sqrt(10000.0));
    CHECK(permutation_test(x, y, 10000, 1) == p1);
    CHECK(p1 >= 1.0 / 10001.0);
  }

  SUBCASE("symmetry") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    for (std::size_t n : {5u, 30u}) {
      std::vector<double> x(n), y(n);
      for (auto& v : x) v = nd(rng);
      for (auto& v : y) v = nd(rng);
      CHECK(permutation_test(x, y, 10000, 9) == permutation_test(y, x, 10000, 9));
    }
  }

  CHECK_THROWS_AS(permutation_test(a, std::vector<double>{1}), DataError);
  CHECK_THROWS_AS(permutation_test(a, a, 0), DataError);
}

TEST_CASE("perplexity") {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_positions = 32;
  auto p = init_parameters(c);
  std::mt19937_64 rng(12);
  std::vector<PackedInstance> inst(5);
  double sum = 0;
  std::size_t count = 0;
  for (auto& in : inst) {
    in.tokens.resize(3 + rng() % 10);
    for (auto& t : in.tokens) t = static_cast<TokenId>(rng() % 256);
    in.loss_mask = next_token_mask(in.tokens);
    const auto logits = forward(p, nullptr, in.tokens).logits;
    for (std::size_t i = 0; i + 1 < in.tokens.size(); ++i) {
      sum -= oracle::log_softmax_at(logits, static_cast<Eigen::Index>(i), in.tokens[i + 1]);
      ++count;
    }
  }
  CHECK(perplexity(p, nullptr, inst) == doctest::Approx(std::exp(sum / static_cast<double>(count))).epsilon(1e-10));

  // Zero output head gives a uniform model.
  p.output_head.setZero();
  CHECK(perplexity(p, nullptr, inst) == doctest::Approx(259.0).epsilon(1e-10));
  std::vector<PackedInstance> empty(1);
  empty[0].tokens = {1};
  empty[0].loss_mask = {0};
  CHECK_THROWS_AS(perplexity(p, nullptr, empty), DataError);
}
