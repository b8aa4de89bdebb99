#include "hulm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "hulm/error.hpp"

namespace hulm {

namespace {

constexpr double kBaseScale = 1.0;
constexpr double kSpaceBias = 1.0;

std::array<double, SyntheticLanguage::kAlphabet> normal_row(std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  std::array<double, SyntheticLanguage::kAlphabet> row{};
  for (auto& v : row) v = dist(rng);
  return row;
}

std::size_t sample(const std::array<double, SyntheticLanguage::kAlphabet>& log_probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng);
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    r -= std::exp(log_probs[i]);
    if (r <= 0.0) return i;
  }
  return log_probs.size() - 1;
}

}  // namespace

SyntheticLanguage::SyntheticLanguage(std::uint64_t language_seed, std::size_t n_clusters, double cluster_scale,
                                     double trait_scale, bool shared_trait_axis) {
  if (n_clusters == 0) throw ConfigError("n_clusters must be positive");
  std::mt19937_64 rng(language_seed);
  base_.resize(kAlphabet + 1);
  for (auto& row : base_) {
    row = normal_row(rng, kBaseScale);
    row[26] += kSpaceBias;
  }
  base_[26][26] -= 4.0;  // no double spaces
  base_[kAlphabet][26] -= 4.0;
  for (std::size_t k = 0; k < n_clusters; ++k) cluster_bias_.push_back(normal_row(rng, cluster_scale));
  if (!shared_trait_axis) {
    for (std::size_t k = 0; k < n_clusters; ++k) trait_direction_.push_back(normal_row(rng, trait_scale));
    return;
  }
  // One trait axis whose sign alternates between clusters: reading the trait
  // off a text requires knowing the author's cluster.
  const auto axis = normal_row(rng, trait_scale);
  for (std::size_t k = 0; k < n_clusters; ++k) {
    auto row = axis;
    if (k % 2 == 1) {
      for (auto& v : row) v = -v;
    }
    trait_direction_.push_back(row);
  }
}

std::array<double, SyntheticLanguage::kAlphabet> SyntheticLanguage::log_probs(std::size_t prev, std::size_t cluster,
                                                                              double trait,
                                                                              double style_strength) const {
  std::array<double, kAlphabet> logits{};
  const auto& base = base_.at(prev);
  const auto& cb = cluster_bias_.at(cluster);
  const auto& td = trait_direction_.at(cluster);
  double mx = -1e300;
  for (std::size_t c = 0; c < kAlphabet; ++c) {
    logits[c] = base[c] + style_strength * (cb[c] + trait * td[c]);
    mx = std::max(mx, logits[c]);
  }
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (auto& v : logits) v -= lse;
  return logits;
}

std::size_t SyntheticLanguage::symbol_id(char c) noexcept {
  if (c >= 'a' && c <= 'z') return static_cast<std::size_t>(c - 'a');
  if (c == ' ') return 26;
  return kAlphabet;
}

int synthetic_document_label(const std::string& text, double trait) {
  if (text.empty()) return trait > 0.0 ? 1 : 0;
  std::size_t vowels = 0;
  for (char c : text) vowels += (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') ? 1 : 0;
  const double share = static_cast<double>(vowels) / static_cast<double>(text.size());
  return 4.0 * (share - 0.2) + trait > 0.0 ? 1 : 0;
}

SyntheticCorpus generate_synthetic_author_corpus(const SyntheticConfig& config) {
  if (!(config.style_strength >= 0.0 && config.style_strength <= 1.0)) {
    throw ConfigError("style_strength must lie in [0,1]");
  }
  if (config.doc_len == 0) throw ConfigError("doc_len must be positive");
  const SyntheticLanguage language(config.language_seed, config.n_clusters, config.cluster_scale, config.trait_scale,
                                   config.shared_trait_axis);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> trait_dist(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> cluster_dist(0, config.n_clusters - 1);
  std::uniform_real_distribution<double> stop(0.0, 1.0);
  const double stop_p = 1.0 / static_cast<double>(config.doc_len);

  SyntheticCorpus corpus;
  corpus.config = config;
  constexpr std::int64_t kEpoch = 1'600'000'000;
  for (std::size_t a = 0; a < config.n_authors; ++a) {
    SyntheticAuthor author;
    char id[16];
    std::snprintf(id, sizeof id, "u%05zu", a);
    author.author_id = id;
    author.trait = trait_dist(rng);
    author.cluster = cluster_dist(rng);

    AuthorStream stream{author.author_id, {}};
    for (std::size_t t = 0; t < config.docs_per_author; ++t) {
      std::string text;
      std::size_t prev = SyntheticLanguage::kAlphabet;
      // Geometric length: the end of a document carries no positional signal.
      do {
        const std::size_t next =
            sample(language.log_probs(prev, author.cluster, author.trait, config.style_strength), rng);
        text.push_back(SyntheticLanguage::symbol(next));
        prev = next;
      } while (stop(rng) >= stop_p);
      CleanDocument doc;
      doc.author_id = author.author_id;
      doc.text = text;
      doc.normalized_text = text;
      doc.dedupe_key = dedupe_key(text);
      doc.created_at = kEpoch + static_cast<std::int64_t>(a) * 1000 + static_cast<std::int64_t>(t) * 86400;
      doc.source = "synthetic";
      doc.label = static_cast<double>(synthetic_document_label(text, author.trait));
      stream.documents.push_back(std::move(doc));
    }
    corpus.streams.push_back(std::move(stream));
    corpus.authors.push_back(std::move(author));
  }
  return corpus;
}

std::vector<AuthorStream> with_person_labels(const SyntheticCorpus& corpus, PersonLabel which) {
  std::vector<AuthorStream> out = corpus.streams;
  for (std::size_t a = 0; a < out.size(); ++a) {
    const auto& author = corpus.authors[a];
    const double label = which == PersonLabel::trait ? author.trait : static_cast<double>(author.cluster);
    for (auto& d : out[a].documents) d.label = label;
  }
  return out;
}

}  // namespace hulm
