#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace hulm {

// Optional document label as it appeared in the input: a string or a number.
using Label = std::variant<std::string, double>;

struct RawDocument {
  std::string author_id;
  std::string text;
  std::optional<std::int64_t> created_at;  // seconds since epoch
  std::optional<std::string> source;
  std::optional<Label> label;
};

struct CleanDocument {
  std::string author_id;
  std::string text;
  std::optional<std::int64_t> created_at;
  std::optional<std::string> source;
  std::optional<Label> label;
  std::string normalized_text;
  std::uint64_t dedupe_key = 0;
};

struct AuthorStream {
  std::string author_id;
  std::vector<CleanDocument> documents;
};

struct SourceStats {
  std::uint64_t users = 0;
  std::uint64_t documents = 0;
  std::uint64_t tokens = 0;
  std::uint64_t utf8_bytes = 0;

  friend bool operator==(const SourceStats&, const SourceStats&) = default;
};

struct CorpusStats {
  std::map<std::string, SourceStats> per_source;
  SourceStats total;
};

struct IngestResult {
  std::vector<RawDocument> documents;
  std::vector<std::size_t> rejected_lines;  // 1-based line numbers
};

struct ReplacementCounts {
  std::size_t emails = 0;
  std::size_t phones = 0;
  std::size_t mentions = 0;
};

struct PipelineConfig {
  double ascii_threshold = 0.9;
  double stopword_threshold = 0.15;
  std::set<std::string> toxic_lexicon;  // empty: toxicity stage skipped
  std::size_t toxic_max_hits = 0;
  bool replace_mentions = true;
};

struct PipelineReport {
  std::size_t input = 0;
  std::size_t after_drop_missing = 0;
  std::size_t after_dedupe = 0;
  std::size_t after_english = 0;
  std::size_t after_toxic = 0;
  ReplacementCounts replacements;
  bool toxicity_applied = false;
};

// ISO-8601 date/time ("2020-01-02", "2020-01-02T03:04:05Z", with optional
// fractional seconds and +hh:mm offset) to epoch seconds.
std::optional<std::int64_t> parse_timestamp(std::string_view iso);

// Parses one JSON Lines record. Throws DataError on schema violations.
RawDocument parse_raw_document(std::string_view line);

IngestResult ingest(std::istream& in);
// Throws DataError if the file cannot be opened.
IngestResult ingest(const std::filesystem::path& path);

// Lifts raw documents to CleanDocument with normalized_text == text and the
// dedupe key computed. Used at the start of the pipeline.
std::vector<CleanDocument> to_clean(std::vector<RawDocument> docs);

// Lowercased, whitespace-collapsed form hashed for deduplication.
std::string dedupe_form(std::string_view text);
std::uint64_t dedupe_key(std::string_view text);

std::vector<CleanDocument> drop_missing(std::vector<CleanDocument> docs);
std::vector<CleanDocument> dedupe(std::vector<CleanDocument> docs);

double ascii_fraction(std::string_view text);
double stopword_fraction(std::string_view text, std::size_t* token_count = nullptr);
const std::set<std::string, std::less<>>& english_stopwords();
std::vector<CleanDocument> filter_english(std::vector<CleanDocument> docs,
                                          double ascii_threshold = 0.9,
                                          double stopword_threshold = 0.15);

std::string normalize_string(std::string_view text);
CleanDocument normalize_text(CleanDocument doc);

std::size_t count_lexicon_hits(std::string_view text, const std::set<std::string>& lexicon);
std::vector<CleanDocument> filter_toxic(std::vector<CleanDocument> docs,
                                        const std::set<std::string>& lexicon,
                                        std::size_t max_hits = 0);

std::string anonymize_string(std::string_view text, bool replace_mentions,
                             ReplacementCounts* counts = nullptr);
CleanDocument anonymize(CleanDocument doc, bool replace_mentions,
                        ReplacementCounts* counts = nullptr);

std::vector<AuthorStream> group_by_author(std::vector<CleanDocument> docs);

CorpusStats corpus_stats(const std::vector<AuthorStream>& streams);

// Runs every cleaning stage in the fixed order and groups the survivors.
std::vector<AuthorStream> run_pipeline(std::vector<RawDocument> docs, const PipelineConfig& config,
                                       PipelineReport* report = nullptr);

nlohmann::json to_json(const CleanDocument& doc);
nlohmann::json to_json(const CorpusStats& stats);
nlohmann::json label_to_json(const Label& label);

// One JSON object per document with an "author_id" key, streams in order.
void write_streams_jsonl(std::ostream& out, const std::vector<AuthorStream>& streams);
// Reads a stream file written by write_streams_jsonl (or any corpus-schema
// file); documents are grouped by author in first-appearance order without
// re-sorting.
std::vector<AuthorStream> read_streams_jsonl(const std::filesystem::path& path);

}  // namespace hulm
