#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hulm/model.hpp"
#include "hulm/packer.hpp"

namespace hulm {

// Per-class F1 averaged with weights proportional to true-class support.
// Classes with no true and no predicted instances contribute 0.
// Throws DataError on length mismatch or empty input.
double weighted_f1(std::span<const int> y_true, std::span<const int> y_pred);

// Sample Pearson correlation. Throws DataError("degenerate correlation") when
// either side has zero variance, and on length mismatch or n < 2.
double pearson_r(std::span<const double> x, std::span<const double> y);

// exp of the token-weighted mean NLL over all counted positions.
// Throws DataError("empty loss support") when nothing is counted.
double perplexity(const LmParameters& params, const LoraAdapter* adapter, std::span<const PackedInstance> instances);

// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double dof);

struct PairedTTest {
  double t = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

// Two-sided paired t-test on per-item differences a - b. All-zero
// differences give p = 1. Throws DataError when n < 2 or lengths differ.
PairedTTest paired_t_test_detail(std::span<const double> a, std::span<const double> b);
double paired_t_test(std::span<const double> a, std::span<const double> b);

inline constexpr std::size_t kDefaultPermutations = 10000;

// Two-sided paired sign-flip test on the mean difference. Enumerates all 2^n
// sign assignments when 2^n <= n_permutations (p = hits / 2^n); otherwise
// samples n_permutations assignments (p = (hits + 1) / (n_permutations + 1)).
double permutation_test(std::span<const double> a, std::span<const double> b,
                        std::size_t n_permutations = kDefaultPermutations, std::uint64_t seed = 42);

// Tolerance under which a permuted statistic counts as "at least as extreme".
double permutation_tie_tolerance(std::span<const double> diffs);

}  // namespace hulm
