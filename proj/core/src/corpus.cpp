#include "hulm/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <unicode/normalizer2.h>
#include <unicode/regex.h>
#include <unicode/unistr.h>

#include "hulm/error.hpp"
#include "hulm/tokenizer.hpp"

namespace hulm {

namespace {

using nlohmann::json;

bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Decodes one code point; malformed sequences advance by a single byte.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t k) -> unsigned {
    return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) & 0x3Fu : 0u;
  };
  if (b0 < 0x80) {
    i += 1;
    return b0;
  }
  if ((b0 >> 5) == 0x6 && i + 1 < s.size()) {
    char32_t cp = ((b0 & 0x1Fu) << 6) | cont(1);
    i += 2;
    return cp;
  }
  if ((b0 >> 4) == 0xE && i + 2 < s.size()) {
    char32_t cp = ((b0 & 0x0Fu) << 12) | (cont(1) << 6) | cont(2);
    i += 3;
    return cp;
  }
  if ((b0 >> 3) == 0x1E && i + 3 < s.size()) {
    char32_t cp = ((b0 & 0x07u) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3);
    i += 4;
    return cp;
  }
  i += 1;
  return 0xFFFD;
}

std::string to_utf8(const icu::UnicodeString& s) {
  std::string out;
  s.toUTF8String(out);
  return out;
}

// ICU pattern objects are immutable after compilation and shared by all
// matchers; each call creates its own matcher.
struct Pattern {
  std::unique_ptr<icu::RegexPattern> compiled;

  explicit Pattern(const char* source) {
    UErrorCode status = U_ZERO_ERROR;
    UParseError perr;
    compiled.reset(icu::RegexPattern::compile(icu::UnicodeString::fromUTF8(source), 0, perr, status));
    if (U_FAILURE(status)) throw RuntimeFailure(std::string("bad built-in pattern: ") + source);
  }
};

const Pattern& url_pattern() {
  static const Pattern p(R"((?:\b[A-Za-z][A-Za-z0-9+.\-]*://|\bwww\.)[^\s<>"]+)");
  return p;
}

const Pattern& email_pattern() {
  static const Pattern p(R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]{2,})");
  return p;
}

const Pattern& phone_pattern() {
  // 7 to 15 digits, optionally separated by up to two of [space . - ( )].
  static const Pattern p(R"((?<![\w+])\+?\(?\d(?:[ .\-()]{0,2}\d){6,14}(?![\w]))");
  return p;
}

const Pattern& mention_pattern() {
  static const Pattern p(R"((?<![\w@<])@[A-Za-z0-9_]{1,30}\b)");
  return p;
}

bool is_trailing_url_punct(UChar c) {
  switch (c) {
    case '.': case ',': case ';': case ':': case '!': case '?':
    case ')': case ']': case '}': case '\'':
      return true;
    default:
      return false;
  }
}

// Replaces every match of `pattern` in `text` by `replacement`. With
// trim_url_punct, trailing sentence punctuation is left outside the match.
icu::UnicodeString replace_all(const icu::UnicodeString& text, const Pattern& pattern,
                               const icu::UnicodeString& replacement, std::size_t* count,
                               bool trim_url_punct = false) {
  UErrorCode status = U_ZERO_ERROR;
  std::unique_ptr<icu::RegexMatcher> m(pattern.compiled->matcher(text, status));
  if (U_FAILURE(status)) throw RuntimeFailure("regex matcher allocation failed");
  icu::UnicodeString out;
  int32_t last = 0;
  while (m->find(status) && U_SUCCESS(status)) {
    int32_t start = m->start(status);
    int32_t end = m->end(status);
    if (trim_url_punct) {
      while (end > start + 1 && is_trailing_url_punct(text.charAt(end - 1))) --end;
    }
    out.append(text, last, start - last);
    out.append(replacement);
    last = end;
    if (count) ++*count;
  }
  out.append(text, last, text.length() - last);
  return out;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::vector<std::string_view> split_whitespace(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_ascii_space(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_ascii_space(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string_view strip_ascii_punct(std::string_view w) {
  auto punct = [](char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; };
  while (!w.empty() && punct(w.front())) w.remove_prefix(1);
  while (!w.empty() && punct(w.back())) w.remove_suffix(1);
  return w;
}

void recompute_key(CleanDocument& doc) { doc.dedupe_key = dedupe_key(doc.normalized_text); }

}  // namespace

std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  auto digits = [&](std::size_t pos, std::size_t n) -> std::optional<int> {
    if (pos + n > s.size()) return std::nullopt;
    int v = 0;
    for (std::size_t k = 0; k < n; ++k) {
      char c = s[pos + k];
      if (c < '0' || c > '9') return std::nullopt;
      v = v * 10 + (c - '0');
    }
    return v;
  };
  auto y = digits(0, 4);
  if (!y || s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  auto mo = digits(5, 2);
  auto d = digits(8, 2);
  if (!mo || !d) return std::nullopt;
  using namespace std::chrono;
  const year_month_day ymd{year{*y}, month{static_cast<unsigned>(*mo)}, day{static_cast<unsigned>(*d)}};
  if (!ymd.ok()) return std::nullopt;
  std::int64_t secs = duration_cast<seconds>(sys_days{ymd}.time_since_epoch()).count();
  std::size_t pos = 10;
  if (pos == s.size()) return secs;
  if (s[pos] != 'T' && s[pos] != 't' && s[pos] != ' ') return std::nullopt;
  ++pos;
  auto hh = digits(pos, 2);
  if (!hh || pos + 2 >= s.size() || s[pos + 2] != ':') return std::nullopt;
  auto mm = digits(pos + 3, 2);
  if (!mm || *hh > 23 || *mm > 59) return std::nullopt;
  secs += *hh * 3600 + *mm * 60;
  pos += 5;
  if (pos < s.size() && s[pos] == ':') {
    auto ss = digits(pos + 1, 2);
    if (!ss || *ss > 60) return std::nullopt;
    secs += *ss;
    pos += 3;
    if (pos < s.size() && s[pos] == '.') {
      ++pos;
      std::size_t start = pos;
      while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') ++pos;
      if (pos == start) return std::nullopt;
    }
  }
  if (pos == s.size()) return secs;
  if (s[pos] == 'Z' || s[pos] == 'z') return pos + 1 == s.size() ? std::optional(secs) : std::nullopt;
  if (s[pos] == '+' || s[pos] == '-') {
    int sign = s[pos] == '+' ? 1 : -1;
    auto oh = digits(pos + 1, 2);
    if (!oh) return std::nullopt;
    std::size_t mpos = pos + 3;
    if (mpos < s.size() && s[mpos] == ':') ++mpos;
    auto om = digits(mpos, 2);
    if (!om || mpos + 2 != s.size()) return std::nullopt;
    return secs - sign * (*oh * 3600 + *om * 60);
  }
  return std::nullopt;
}

RawDocument parse_raw_document(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("record is not a JSON object");
  RawDocument doc;
  const char* id_key = j.contains("user_id") ? "user_id" : "author_id";
  if (!j.contains(id_key) || !j[id_key].is_string()) throw DataError("missing string key \"user_id\"");
  doc.author_id = j[id_key].get<std::string>();
  if (!j.contains("text") || !j["text"].is_string()) throw DataError("missing string key \"text\"");
  doc.text = j["text"].get<std::string>();
  if (auto it = j.find("created_at"); it != j.end() && !it->is_null()) {
    if (it->is_number_integer()) {
      doc.created_at = it->get<std::int64_t>();
    } else if (it->is_string()) {
      auto ts = parse_timestamp(it->get<std::string>());
      if (!ts) throw DataError("unparseable created_at");
      doc.created_at = ts;
    } else {
      throw DataError("created_at must be an ISO-8601 string or integer");
    }
  }
  if (auto it = j.find("source"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw DataError("source must be a string");
    doc.source = it->get<std::string>();
  }
  if (auto it = j.find("label"); it != j.end() && !it->is_null()) {
    if (it->is_string()) {
      doc.label = it->get<std::string>();
    } else if (it->is_number()) {
      doc.label = it->get<double>();
    } else {
      throw DataError("label must be a string or number");
    }
  }
  return doc;
}

IngestResult ingest(std::istream& in) {
  IngestResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      result.documents.push_back(parse_raw_document(line));
    } catch (const DataError&) {
      result.rejected_lines.push_back(line_no);
    }
  }
  return result;
}

IngestResult ingest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return ingest(in);
}

std::vector<CleanDocument> to_clean(std::vector<RawDocument> docs) {
  std::vector<CleanDocument> out;
  out.reserve(docs.size());
  for (auto& d : docs) {
    CleanDocument c;
    c.author_id = std::move(d.author_id);
    c.normalized_text = d.text;
    c.text = std::move(d.text);
    c.created_at = d.created_at;
    c.source = std::move(d.source);
    c.label = std::move(d.label);
    recompute_key(c);
    out.push_back(std::move(c));
  }
  return out;
}

std::string dedupe_form(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (auto word : split_whitespace(text)) {
    if (!out.empty()) out.push_back(' ');
    out += ascii_lower(word);
  }
  return out;
}

std::uint64_t dedupe_key(std::string_view text) { return fnv1a64(dedupe_form(text)); }

std::vector<CleanDocument> drop_missing(std::vector<CleanDocument> docs) {
  std::erase_if(docs, [](const CleanDocument& d) {
    return d.author_id.empty() || split_whitespace(d.normalized_text).empty();
  });
  return docs;
}

std::vector<CleanDocument> dedupe(std::vector<CleanDocument> docs) {
  // Keys are compared by normalized form, not only by hash, so a 64-bit
  // collision never drops a distinct document.
  std::unordered_map<std::uint64_t, std::vector<std::string>> seen;
  std::vector<CleanDocument> out;
  out.reserve(docs.size());
  for (auto& d : docs) {
    std::string form = dedupe_form(d.normalized_text);
    auto& bucket = seen[d.dedupe_key];
    if (std::find(bucket.begin(), bucket.end(), form) != bucket.end()) continue;
    bucket.push_back(std::move(form));
    out.push_back(std::move(d));
  }
  return out;
}

double ascii_fraction(std::string_view text) {
  std::size_t total = 0;
  std::size_t ascii = 0;
  for (std::size_t i = 0; i < text.size();) {
    char32_t cp = next_code_point(text, i);
    ++total;
    if ((cp >= 0x20 && cp <= 0x7E) || cp == '\n' || cp == '\t' || cp == '\r') ++ascii;
  }
  return total == 0 ? 1.0 : static_cast<double>(ascii) / static_cast<double>(total);
}

const std::set<std::string, std::less<>>& english_stopwords() {
  static const std::set<std::string, std::less<>> words = {
      "the", "a",    "an",    "and",   "or",   "but",  "if",   "of",   "to",    "in",
      "on",  "at",   "by",    "for",   "with", "from", "as",   "is",   "are",   "was",
      "were", "be",  "been",  "it",    "this", "that", "these", "those", "i",   "you",
      "he",  "she",  "we",    "they",  "me",   "my",   "your", "his",  "her",   "our",
      "their", "not", "no",   "so",    "do",   "have", "has",  "had",  "will",  "because"};
  return words;
}

double stopword_fraction(std::string_view text, std::size_t* token_count) {
  auto tokens = split_whitespace(text);
  if (token_count) *token_count = tokens.size();
  if (tokens.empty()) return 0.0;
  const auto& stop = english_stopwords();
  std::size_t hits = 0;
  for (auto t : tokens) {
    if (stop.contains(ascii_lower(strip_ascii_punct(t)))) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(tokens.size());
}

std::vector<CleanDocument> filter_english(std::vector<CleanDocument> docs, double ascii_threshold,
                                          double stopword_threshold) {
  if (ascii_threshold < 0.0 || ascii_threshold > 1.0 || stopword_threshold < 0.0 ||
      stopword_threshold > 1.0) {
    throw ConfigError("english filter thresholds must lie in [0,1]");
  }
  std::erase_if(docs, [&](const CleanDocument& d) {
    if (ascii_fraction(d.normalized_text) < ascii_threshold) return true;
    std::size_t n = 0;
    double frac = stopword_fraction(d.normalized_text, &n);
    return n >= 5 && frac < stopword_threshold;
  });
  return docs;
}

std::string normalize_string(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw RuntimeFailure("ICU NFC normalizer unavailable");
  icu::UnicodeString composed =
      nfc->normalize(icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size()))), status);
  if (U_FAILURE(status)) throw RuntimeFailure("NFC normalization failed");

  icu::UnicodeString no_controls;
  for (int32_t i = 0; i < composed.length();) {
    UChar32 cp = composed.char32At(i);
    bool control = (cp < 0x20 && cp != '\n') || (cp >= 0x7F && cp <= 0x9F);
    if (!control) no_controls.append(cp);
    i += U16_LENGTH(cp);
  }
  icu::UnicodeString replaced = replace_all(no_controls, url_pattern(), "<URL>", nullptr, true);
  std::string utf8 = to_utf8(replaced);

  std::string out;
  out.reserve(utf8.size());
  std::size_t newline_run = 0;
  for (char c : utf8) {
    newline_run = c == '\n' ? newline_run + 1 : 0;
    if (newline_run <= 2) out.push_back(c);
  }
  return out;
}

CleanDocument normalize_text(CleanDocument doc) {
  doc.normalized_text = normalize_string(doc.normalized_text);
  recompute_key(doc);
  return doc;
}

std::size_t count_lexicon_hits(std::string_view text, const std::set<std::string>& lexicon) {
  std::set<std::string, std::less<>> lowered;
  for (const auto& w : lexicon) lowered.insert(ascii_lower(w));
  auto word_char = [](unsigned char c) { return std::isalnum(c) || c == '_' || c >= 0x80; };
  std::size_t hits = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && !word_char(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && word_char(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i && lowered.contains(ascii_lower(text.substr(i, j - i)))) ++hits;
    i = j;
  }
  return hits;
}

std::vector<CleanDocument> filter_toxic(std::vector<CleanDocument> docs, const std::set<std::string>& lexicon,
                                        std::size_t max_hits) {
  if (lexicon.empty()) throw ConfigError("toxicity lexicon must not be empty");
  std::erase_if(docs, [&](const CleanDocument& d) {
    return count_lexicon_hits(d.normalized_text, lexicon) > max_hits;
  });
  return docs;
}

std::string anonymize_string(std::string_view text, bool replace_mentions, ReplacementCounts* counts) {
  ReplacementCounts local;
  icu::UnicodeString s =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s = replace_all(s, email_pattern(), "<EMAIL>", &local.emails);
  s = replace_all(s, phone_pattern(), "<PHONE>", &local.phones);
  if (replace_mentions) s = replace_all(s, mention_pattern(), "<USER>", &local.mentions);
  if (counts) {
    counts->emails += local.emails;
    counts->phones += local.phones;
    counts->mentions += local.mentions;
  }
  return to_utf8(s);
}

CleanDocument anonymize(CleanDocument doc, bool replace_mentions, ReplacementCounts* counts) {
  doc.normalized_text = anonymize_string(doc.normalized_text, replace_mentions, counts);
  recompute_key(doc);
  return doc;
}

std::vector<AuthorStream> group_by_author(std::vector<CleanDocument> docs) {
  std::vector<AuthorStream> streams;
  std::unordered_map<std::string, std::size_t> index;
  for (auto& d : docs) {
    auto [it, inserted] = index.try_emplace(d.author_id, streams.size());
    if (inserted) streams.push_back(AuthorStream{d.author_id, {}});
    streams[it->second].documents.push_back(std::move(d));
  }
  for (auto& s : streams) {
    bool all_timed = std::all_of(s.documents.begin(), s.documents.end(),
                                 [](const CleanDocument& d) { return d.created_at.has_value(); });
    if (all_timed) {
      std::stable_sort(s.documents.begin(), s.documents.end(),
                       [](const CleanDocument& a, const CleanDocument& b) { return *a.created_at < *b.created_at; });
    }
  }
  return streams;
}

CorpusStats corpus_stats(const std::vector<AuthorStream>& streams) {
  CorpusStats stats;
  std::map<std::string, std::unordered_set<std::string>> authors_per_source;
  for (const auto& s : streams) {
    for (const auto& d : s.documents) {
      const std::string source = d.source.value_or("unknown");
      auto& st = stats.per_source[source];
      st.documents += 1;
      st.tokens += count_tokens(d.normalized_text);
      st.utf8_bytes += d.normalized_text.size();
      authors_per_source[source].insert(s.author_id);
    }
  }
  for (auto& [source, st] : stats.per_source) {
    st.users = authors_per_source[source].size();
    stats.total.documents += st.documents;
    stats.total.tokens += st.tokens;
    stats.total.utf8_bytes += st.utf8_bytes;
  }
  stats.total.users = streams.size();
  return stats;
}

std::vector<AuthorStream> run_pipeline(std::vector<RawDocument> raw, const PipelineConfig& config,
                                       PipelineReport* report) {
  PipelineReport r;
  r.input = raw.size();
  auto docs = drop_missing(to_clean(std::move(raw)));
  r.after_drop_missing = docs.size();
  docs = dedupe(std::move(docs));
  r.after_dedupe = docs.size();
  docs = filter_english(std::move(docs), config.ascii_threshold, config.stopword_threshold);
  r.after_english = docs.size();
  for (auto& d : docs) d = normalize_text(std::move(d));
  if (!config.toxic_lexicon.empty()) {
    docs = filter_toxic(std::move(docs), config.toxic_lexicon, config.toxic_max_hits);
    r.toxicity_applied = true;
  }
  r.after_toxic = docs.size();
  for (auto& d : docs) d = anonymize(std::move(d), config.replace_mentions, &r.replacements);
  if (report) *report = r;
  return group_by_author(std::move(docs));
}

json label_to_json(const Label& label) {
  return std::visit([](const auto& v) { return json(v); }, label);
}

json to_json(const CleanDocument& doc) {
  json j;
  j["author_id"] = doc.author_id;
  j["text"] = doc.normalized_text;
  if (doc.created_at) j["created_at"] = *doc.created_at;
  if (doc.source) j["source"] = *doc.source;
  if (doc.label) j["label"] = label_to_json(*doc.label);
  j["dedupe_key"] = doc.dedupe_key;
  return j;
}

json to_json(const CorpusStats& stats) {
  auto row = [](const SourceStats& s) {
    return json{{"users", s.users}, {"docs", s.documents}, {"tokens", s.tokens}, {"utf8_bytes", s.utf8_bytes}};
  };
  json j;
  j["sources"] = json::object();
  for (const auto& [name, s] : stats.per_source) j["sources"][name] = row(s);
  j["total"] = row(stats.total);
  return j;
}

void write_streams_jsonl(std::ostream& out, const std::vector<AuthorStream>& streams) {
  for (const auto& s : streams) {
    for (const auto& d : s.documents) out << to_json(d).dump() << '\n';
  }
}

std::vector<AuthorStream> read_streams_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<AuthorStream> streams;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    RawDocument raw;
    try {
      raw = parse_raw_document(line);
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    auto clean = to_clean({std::move(raw)});
    auto& d = clean.front();
    auto [it, inserted] = index.try_emplace(d.author_id, streams.size());
    if (inserted) streams.push_back(AuthorStream{d.author_id, {}});
    streams[it->second].documents.push_back(std::move(d));
  }
  return streams;
}

}  // namespace hulm
