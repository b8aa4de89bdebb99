#include "hulm/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "hulm/error.hpp"
#include "hulm/eval.hpp"

namespace hulm {

namespace {

const char* test_name(SignificanceTest t) { return t == SignificanceTest::paired_t ? "paired_t" : "permutation"; }

SignificanceTest test_from(const std::string& s) {
  if (s == "paired_t") return SignificanceTest::paired_t;
  if (s == "permutation") return SignificanceTest::permutation;
  throw DataError("unknown significance test: " + s);
}

const TaskResult* find_result(std::span<const TaskResult> results, const std::string& task, const std::string& variant) {
  for (const auto& r : results) {
    if (r.task_id == task && r.variant == variant) return &r;
  }
  return nullptr;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<double> item_scores(std::span<const double> labels, std::span<const double> predictions,
                                bool classification) {
  if (labels.size() != predictions.size()) throw DataError("item_scores: length mismatch");
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double d = predictions[i] - labels[i];
    out[i] = classification ? (labels[i] == predictions[i] ? 1.0 : 0.0) : -d * d;
  }
  return out;
}

std::vector<MetricReport> build_report(std::span<const TaskResult> results,
                                       std::span<const ComparisonRequest> comparisons, std::size_t n_permutations,
                                       std::uint64_t seed) {
  std::vector<MetricReport> out;
  for (const auto& r : results) {
    MetricReport rep{r.task_id, r.variant, r.metric, r.value, r.item_scores.size(), {}};
    for (const auto& c : comparisons) {
      if (c.task_id != r.task_id || c.variant != r.variant) continue;
      const auto* base = find_result(results, c.task_id, c.baseline);
      if (!base) throw DataError("comparison against unknown variant: " + c.baseline);
      if (base->item_scores.size() != r.item_scores.size()) {
        throw DataError("comparison needs the same items: " + c.variant + " vs " + c.baseline);
      }
      Comparison cmp;
      cmp.baseline_id = c.baseline;
      cmp.delta = r.value - base->value;
      cmp.test = c.test;
      cmp.p_value = c.test == SignificanceTest::paired_t
                        ? paired_t_test(r.item_scores, base->item_scores)
                        : permutation_test(r.item_scores, base->item_scores, n_permutations, seed);
      rep.comparisons.push_back(cmp);
    }
    out.push_back(std::move(rep));
  }
  return out;
}

nlohmann::json to_json(const std::vector<MetricReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json cmps = nlohmann::json::array();
    for (const auto& c : r.comparisons) {
      cmps.push_back({{"baseline_id", c.baseline_id}, {"delta", c.delta}, {"p_value", c.p_value},
                      {"test", test_name(c.test)}});
    }
    arr.push_back({{"task_id", r.task_id},
                   {"variant", r.variant},
                   {"metric", r.metric},
                   {"value", r.value},
                   {"n", r.n},
                   {"comparisons", cmps}});
  }
  return arr;
}

std::vector<MetricReport> reports_from_json(const nlohmann::json& j) {
  std::vector<MetricReport> out;
  try {
    for (const auto& r : j) {
      MetricReport rep;
      rep.task_id = r.at("task_id").get<std::string>();
      rep.variant = r.at("variant").get<std::string>();
      rep.metric = r.at("metric").get<std::string>();
      rep.value = r.at("value").get<double>();
      rep.n = r.at("n").get<std::size_t>();
      for (const auto& c : r.at("comparisons")) {
        rep.comparisons.push_back({c.at("baseline_id").get<std::string>(), c.at("delta").get<double>(),
                                   c.at("p_value").get<double>(), test_from(c.at("test").get<std::string>())});
      }
      out.push_back(std::move(rep));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return out;
}

std::string format_table(const std::vector<MetricReport>& reports, double alpha) {
  std::vector<std::string> tasks;
  std::vector<std::string> variants;
  for (const auto& r : reports) {
    if (std::find(tasks.begin(), tasks.end(), r.task_id) == tasks.end()) tasks.push_back(r.task_id);
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
  }
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"variant"};
  for (const auto& t : tasks) {
    std::string metric;
    for (const auto& r : reports) {
      if (r.task_id == t) metric = r.metric;
    }
    header.push_back(t + " (" + metric + ")");
  }
  rows.push_back(header);
  for (const auto& v : variants) {
    std::vector<std::string> row{v};
    for (const auto& t : tasks) {
      std::string cell = "-";
      for (const auto& r : reports) {
        if (r.task_id != t || r.variant != v) continue;
        cell = fixed(r.value, 3);
        const bool significant = std::any_of(r.comparisons.begin(), r.comparisons.end(),
                                             [&](const Comparison& c) { return c.p_value < alpha; });
        if (significant) cell += "*";
      }
      row.push_back(cell);
    }
    rows.push_back(row);
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (c) out << "  ";
      const auto pad = widths[c] - rows[r][c].size();
      if (c == 0) {
        out << rows[r][c] << std::string(pad, ' ');
      } else {
        out << std::string(pad, ' ') << rows[r][c];
      }
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w;
      out << std::string(total + 2 * (widths.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

}  // namespace hulm
