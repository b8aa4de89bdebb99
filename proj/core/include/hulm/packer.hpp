#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hulm/corpus.hpp"
#include "hulm/tokenizer.hpp"

namespace hulm {

// Pretraining windows of one author, one document, and fine-tuning instances.
inline constexpr std::size_t kAuthorMaxLen = 8192;
inline constexpr std::size_t kIndependentMaxLen = 200;
inline constexpr std::size_t kTaskMaxLen = 4096;

// Token range [start, end) of document `doc_index` (its ordinal in the
// author's stream). The trailing EOS separator is not part of the span.
struct DocumentSpan {
  std::size_t doc_index = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  bool is_target = false;

  std::size_t size() const noexcept { return end - start; }
  friend bool operator==(const DocumentSpan&, const DocumentSpan&) = default;
};

struct PackedInstance {
  std::string author_id;
  std::vector<TokenId> tokens;
  std::vector<DocumentSpan> spans;
  // loss_mask[i] == 1 iff the prediction of tokens[i + 1] from position i counts.
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const noexcept { return tokens.size(); }
  friend bool operator==(const PackedInstance&, const PackedInstance&) = default;
};

struct PackOptions {
  bool prepend_bos = false;
};

enum class PoolMode { target_last_token, author_mean };

// Empty stream yields no instances. Throws std::invalid_argument when max_len
// leaves fewer than two slots per window.
std::vector<PackedInstance> pack_author(const AuthorStream& stream, std::size_t max_len,
                                        PackOptions options = {});

std::vector<PackedInstance> pack_independent(std::span<const CleanDocument> docs, std::size_t max_len,
                                             PackOptions options = {});

// target_index == nullopt packs every document of the stream as a target
// (person-level); history is always included in that case. Throws DataError
// "target exceeds window" when the target cannot fit with its separator.
PackedInstance pack_for_task(const AuthorStream& stream, std::optional<std::size_t> target_index,
                             std::size_t max_len, bool include_history, PackOptions options = {});

// Positions whose hidden states feed a task head. With include_separator the
// target mode points at the EOS following the target instead of its last
// content token.
std::vector<std::size_t> locate_pool_positions(const PackedInstance& instance, PoolMode mode,
                                               bool include_separator = false);

// Recomputes loss_mask from tokens: every position whose next token exists
// and is not PAD.
std::vector<std::uint8_t> next_token_mask(std::span<const TokenId> tokens);

// Checks the structural invariants (span partition, separators, monotone
// document order, mask shape). Returns a description of the first violation.
std::optional<std::string> validate_instance(const PackedInstance& instance);

// Content tokens of every span, in order.
std::vector<TokenId> strip_specials(const PackedInstance& instance);

nlohmann::json to_json(const PackedInstance& instance);
PackedInstance packed_from_json(const nlohmann::json& j);

void write_packed_jsonl(std::ostream& out, std::span<const PackedInstance> instances);
std::vector<PackedInstance> read_packed_jsonl(std::istream& in);

// Length-prefixed little-endian binary form: per instance
//   u32 author_len, author bytes, u32 n_tokens, u16 tokens[n],
//   u32 n_spans, (u32 doc_index, u32 start, u32 end, u32 is_target)[n_spans],
//   u8 loss_mask[n_tokens].
void write_packed_binary(std::ostream& out, std::span<const PackedInstance> instances);
std::vector<PackedInstance> read_packed_binary(std::istream& in);

}  // namespace hulm
