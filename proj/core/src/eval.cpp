#include "hulm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "hulm/error.hpp"

namespace hulm {

double weighted_f1(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size()) throw DataError("weighted_f1: length mismatch");
  if (y_true.empty()) throw DataError("weighted_f1: empty input");
  struct Counts {
    double tp = 0, fp = 0, fn = 0, support = 0;
  };
  std::map<int, Counts> classes;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    classes[y_true[i]].support += 1;
    if (y_true[i] == y_pred[i]) {
      classes[y_true[i]].tp += 1;
    } else {
      classes[y_pred[i]].fp += 1;
      classes[y_true[i]].fn += 1;
    }
  }
  double score = 0.0;
  for (const auto& [label, c] : classes) {
    const double denom = 2 * c.tp + c.fp + c.fn;
    const double f1 = denom > 0 ? 2 * c.tp / denom : 0.0;
    score += c.support * f1;
  }
  return score / static_cast<double>(y_true.size());
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw DataError("pearson_r: length mismatch");
  if (x.size() < 2) throw DataError("pearson_r: need at least two pairs");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw DataError("degenerate correlation");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double perplexity(const LmParameters& params, const LoraAdapter* adapter, std::span<const PackedInstance> instances) {
  NllSum total;
  for (const auto& inst : instances) {
    const auto result = forward(params, adapter, inst.tokens, true);
    const auto s = nll_sum(result.logits, inst.tokens, inst.loss_mask);
    total.sum += s.sum;
    total.count += s.count;
  }
  if (total.count == 0) throw DataError("empty loss support");
  return std::exp(total.mean());
}

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw std::domain_error("incomplete beta needs positive shape parameters");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double dof) {
  if (!(dof > 0.0)) throw std::domain_error("degrees of freedom must be positive");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double x = dof / (dof + t * t);
  const double tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x);
  return t > 0 ? 1.0 - tail : tail;
}

PairedTTest paired_t_test_detail(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("paired_t_test: length mismatch");
  if (a.size() < 2) throw DataError("paired_t_test: need at least two pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  bool all_zero = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    all_zero = all_zero && d == 0.0;
    ss += (d - mean) * (d - mean);
  }
  PairedTTest out;
  out.dof = n - 1.0;
  if (all_zero) return out;
  const double se = std::sqrt(ss / (n - 1.0) / n);
  if (se == 0.0) {
    // Constant non-zero differences: the statistic is unbounded.
    out.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    out.p_value = std::numeric_limits<double>::min();
    return out;
  }
  out.t = mean / se;
  const double p = regularized_incomplete_beta(out.dof / 2.0, 0.5, out.dof / (out.dof + out.t * out.t));
  out.p_value = std::clamp(p, std::numeric_limits<double>::min(), 1.0);
  return out;
}

double paired_t_test(std::span<const double> a, std::span<const double> b) {
  return paired_t_test_detail(a, b).p_value;
}

double permutation_tie_tolerance(std::span<const double> diffs) {
  double scale = 0.0;
  for (double d : diffs) scale += std::abs(d);
  return 1e-12 * std::max(scale, 1e-300);
}

double permutation_test(std::span<const double> a, std::span<const double> b, std::size_t n_permutations,
                        std::uint64_t seed) {
  if (a.size() != b.size()) throw DataError("permutation_test: length mismatch");
  if (n_permutations < 1) throw DataError("permutation_test: n_permutations must be at least 1");
  const std::size_t n = a.size();
  if (n == 0) return 1.0;
  std::vector<double> diffs(n);
  for (std::size_t i = 0; i < n; ++i) diffs[i] = a[i] - b[i];
  double observed = 0.0;
  for (double d : diffs) observed += d;
  observed = std::abs(observed);
  const double tol = permutation_tie_tolerance(diffs);

  const bool exhaustive = n < 63 && (std::uint64_t{1} << n) <= n_permutations;
  if (exhaustive) {
    const std::uint64_t total = std::uint64_t{1} << n;
    std::uint64_t hits = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += ((mask >> i) & 1u) ? -diffs[i] : diffs[i];
      if (std::abs(s) >= observed - tol) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(total);
  }
  std::mt19937_64 rng(seed);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < n_permutations; ++p) {
    double s = 0.0;
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (i % 64 == 0) bits = rng();
      s += (bits & 1u) ? -diffs[i] : diffs[i];
      bits >>= 1;
    }
    if (std::abs(s) >= observed - tol) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(n_permutations + 1);
}

}  // namespace hulm
