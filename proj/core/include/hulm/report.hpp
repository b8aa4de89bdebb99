#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace hulm {

enum class SignificanceTest { paired_t, permutation };

// Evaluation output of one variant on one task. `item_scores` hold the
// per-item quantity compared across variants (higher is better).
struct TaskResult {
  std::string task_id;
  std::string variant;
  std::string metric;
  double value = 0.0;
  std::vector<double> item_scores;
};

struct ComparisonRequest {
  std::string task_id;
  std::string variant;
  std::string baseline;
  SignificanceTest test = SignificanceTest::paired_t;
};

struct Comparison {
  std::string baseline_id;
  double delta = 0.0;
  double p_value = 1.0;
  SignificanceTest test = SignificanceTest::paired_t;
};

struct MetricReport {
  std::string task_id;
  std::string variant;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::vector<Comparison> comparisons;

  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline bool operator==(const Comparison& a, const Comparison& b) {
  return a.baseline_id == b.baseline_id && a.delta == b.delta && a.p_value == b.p_value && a.test == b.test;
}

// Correct-or-not for classification, negative squared error for regression.
std::vector<double> item_scores(std::span<const double> labels, std::span<const double> predictions,
                                bool classification);

// One report per result, in input order. Throws DataError when a comparison
// names an unknown variant or the item counts differ.
std::vector<MetricReport> build_report(std::span<const TaskResult> results,
                                       std::span<const ComparisonRequest> comparisons,
                                       std::size_t n_permutations = 10000, std::uint64_t seed = 42);

nlohmann::json to_json(const std::vector<MetricReport>& reports);
std::vector<MetricReport> reports_from_json(const nlohmann::json& j);

// Variants as rows, tasks as columns; "*" marks p < alpha against a baseline.
std::string format_table(const std::vector<MetricReport>& reports, double alpha = 0.05);

}  // namespace hulm
