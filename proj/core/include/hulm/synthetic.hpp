#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hulm/corpus.hpp"

namespace hulm {

struct SyntheticConfig {
  std::uint64_t seed = 42;
  std::size_t n_authors = 200;
  std::size_t docs_per_author = 64;
  std::size_t doc_len = 4;   // mean bytes per document (geometric, at least 1)
  double style_strength = 0.8;
  std::size_t n_clusters = 4;
  // Seeds the shared "language" (base bigram table, cluster and trait
  // directions). Corpora with different `seed` but equal `language_seed` are
  // drawn from the same language.
  std::uint64_t language_seed = 1;
  double cluster_scale = 1.5;  // spread of per-cluster unigram biases
  double trait_scale = 0.7;    // spread of the trait direction
  // One trait axis shared by all clusters (sign flipped for odd clusters)
  // instead of an independent direction per cluster.
  bool shared_trait_axis = false;
};

struct SyntheticAuthor {
  std::string author_id;
  double trait = 0.0;       // uniform on [-1, 1]
  std::size_t cluster = 0;  // style cluster id
};

struct SyntheticCorpus {
  SyntheticConfig config;
  // Documents carry the document-level binary label.
  std::vector<AuthorStream> streams;
  std::vector<SyntheticAuthor> authors;
};

// Generative model shared by all authors: next-symbol distribution over a
// 27-symbol alphabet (a-z and space) conditioned on the previous symbol, the
// author's cluster and trait.
class SyntheticLanguage {
 public:
  static constexpr std::size_t kAlphabet = 27;

  SyntheticLanguage(std::uint64_t language_seed, std::size_t n_clusters, double cluster_scale = 1.5,
                    double trait_scale = 0.7, bool shared_trait_axis = false);

  // log P(next | prev) for an author; prev == kAlphabet denotes document start.
  std::array<double, kAlphabet> log_probs(std::size_t prev, std::size_t cluster, double trait,
                                          double style_strength) const;

  static char symbol(std::size_t id) noexcept { return id < 26 ? static_cast<char>('a' + id) : ' '; }
  // Symbol id of a byte, or kAlphabet when outside the alphabet.
  static std::size_t symbol_id(char c) noexcept;

  std::size_t n_clusters() const noexcept { return cluster_bias_.size(); }

 private:
  std::vector<std::array<double, kAlphabet>> base_;  // (kAlphabet + 1) rows
  std::vector<std::array<double, kAlphabet>> cluster_bias_;
  std::vector<std::array<double, kAlphabet>> trait_direction_;
};

// Deterministic document label from content and trait.
int synthetic_document_label(const std::string& text, double trait);

// Throws ConfigError when style_strength is outside [0, 1].
SyntheticCorpus generate_synthetic_author_corpus(const SyntheticConfig& config);

enum class PersonLabel { trait, cluster };

// Copies the streams with every document labelled by its author's trait or
// cluster id (person-level task data).
std::vector<AuthorStream> with_person_labels(const SyntheticCorpus& corpus, PersonLabel which);

}  // namespace hulm
