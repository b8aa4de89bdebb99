#include <doctest.h>

#include <random>
#include <sstream>

#include "hulm/corpus.hpp"
#include "hulm/error.hpp"
#include "oracles.hpp"

using namespace hulm;

namespace {

CleanDocument doc(std::string author, std::string text, std::optional<std::int64_t> ts = std::nullopt) {
  CleanDocument d;
  d.author_id = std::move(author);
  d.text = text;
  d.normalized_text = std::move(text);
  d.created_at = ts;
  return d;
}

std::vector<std::string> texts(const std::vector<CleanDocument>& docs) {
  std::vector<std::string> out;
  for (const auto& d : docs) out.push_back(d.normalized_text);
  return out;
}

}  // namespace

TEST_CASE("ingest keeps valid lines in order and counts rejects") {
  SUBCASE("two valid lines") {
    std::istringstream in(R"({"user_id":"a","text":"x"}
{"user_id":"b","text":"y","created_at":"2020-01-02T03:04:05Z","source":"s","label":3})");
    const auto r = ingest(in);
    REQUIRE(r.documents.size() == 2);
    CHECK(r.documents[0].author_id == "a");
    CHECK(r.documents[1].text == "y");
    CHECK(r.documents[1].created_at == 1577934245);
    CHECK(r.documents[1].source == "s");
    CHECK(std::get<double>(*r.documents[1].label) == 3.0);
    CHECK(r.rejected_lines.empty());
  }
  SUBCASE("empty file") {
    std::istringstream in("");
    const auto r = ingest(in);
    CHECK(r.documents.empty());
    CHECK(r.rejected_lines.empty());
  }
  SUBCASE("malformed line is skipped") {
    std::istringstream in("{\"user_id\":\"a\",\"text\":\"x\"}\n{not json\n");
    const auto r = ingest(in);
    CHECK(r.documents.size() == 1);
    REQUIRE(r.rejected_lines.size() == 1);
    CHECK(r.rejected_lines[0] == 2);
  }
  SUBCASE("integer timestamps and string labels") {
    std::istringstream in(R"({"user_id":"a","text":"x","created_at":17,"label":"pos"})");
    const auto r = ingest(in);
    REQUIRE(r.documents.size() == 1);
    CHECK(r.documents[0].created_at == 17);
    CHECK(std::get<std::string>(*r.documents[0].label) == "pos");
  }
  SUBCASE("missing text is a reject") {
    std::istringstream in(R"({"user_id":"a"})");
    CHECK(ingest(in).rejected_lines.size() == 1);
  }
}

TEST_CASE("unreadable file is fatal") {
  CHECK_THROWS(ingest(std::filesystem::path("/nonexistent/definitely/not/here.jsonl")));
}

TEST_CASE("drop_missing") {
  CHECK(texts(drop_missing({doc("a1", "hi"), doc("a2", "  ")})) == std::vector<std::string>{"hi"});
  CHECK(texts(drop_missing({doc("a1", "x"), doc("a2", "y")})) == std::vector<std::string>{"x", "y"});
  CHECK(drop_missing({doc("", "hi")}).empty());
}

TEST_CASE("dedupe on normalized form") {
  CHECK(texts(dedupe({doc("a", "Hello  world"), doc("b", "hello world")})) == std::vector<std::string>{"Hello  world"});
  CHECK(dedupe({doc("a", "one"), doc("a", "two")}).size() == 2);
}

TEST_CASE("dedupe matches a pairwise comparator and is idempotent") {
  std::mt19937_64 rng(5);
  const std::vector<std::string> pieces{"a", "B", "c", " ", "  ", "\t", "A", "b"};
  for (int round = 0; round < 200; ++round) {
    const auto n = std::uniform_int_distribution<std::size_t>(0, 100)(rng);
    std::vector<CleanDocument> docs;
    std::vector<std::string> raw;
    for (std::size_t i = 0; i < n; ++i) {
      std::string s;
      const auto len = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
      for (std::size_t k = 0; k < len; ++k) s += pieces[rng() % pieces.size()];
      raw.push_back(s);
      docs.push_back(doc("u" + std::to_string(rng() % 3), s));
    }
    const auto once = dedupe(docs);
    const auto expected = oracle::dedupe_survivors(raw);
    REQUIRE(once.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) CHECK(once[i].normalized_text == raw[expected[i]]);
    CHECK(texts(dedupe(once)) == texts(once));
  }
}

TEST_CASE("filter_english") {
  auto kept = [](std::string t) { return filter_english({doc("a", std::move(t))}).size() == 1; };
  CHECK(kept("the cat sat on the mat because it was tired"));
  CHECK_FALSE(kept("\xD0\x9F\xD1\x80\xD0\xB8\xD0\xB2\xD0\xB5\xD1\x82 \xD0\xBC\xD0\xB8\xD1\x80"));
  CHECK(kept("xyzzy plugh frobnicate"));
  CHECK_FALSE(kept("alpha beta gamma delta epsilon zeta eta"));
}

TEST_CASE("normalize_string") {
  CHECK(normalize_string("see http://x.y/z now") == "see <URL> now");
  CHECK(normalize_string("visit www.example.com.") == "visit <URL>.");
  CHECK(normalize_string("plain text, nothing odd.") == "plain text, nothing odd.");
  CHECK(normalize_string("a\tb\x07" "c") == "abc");
  CHECK(normalize_string("a\n\n\n\nb") == "a\n\nb");
  CHECK(normalize_string("a\n\nb") == "a\n\nb");
  // e + combining acute composes to a single code point.
  CHECK(normalize_string("e\xCC\x81") == "\xC3\xA9");
}

TEST_CASE("normalize_text keeps author and timestamp") {
  const auto d = normalize_text(doc("a", "x\x01y", 9));
  CHECK(d.normalized_text == "xy");
  CHECK(d.author_id == "a");
  CHECK(d.created_at == 9);
}

TEST_CASE("filter_toxic whole-word matching") {
  const std::set<std::string> lex{"slur"};
  CHECK(filter_toxic({doc("a", "a slur here")}, lex, 0).empty());
  CHECK(filter_toxic({doc("a", "a clean sentence")}, lex, 0).size() == 1);
  CHECK(filter_toxic({doc("a", "slurry")}, lex, 0).size() == 1);
  CHECK(filter_toxic({doc("a", "SLUR!")}, lex, 0).empty());
  CHECK(filter_toxic({doc("a", "slur slur")}, lex, 2).size() == 1);
  CHECK_THROWS_AS(filter_toxic({doc("a", "x")}, {}, 0), ConfigError);
}

TEST_CASE("anonymize") {
  CHECK(anonymize_string("mail bob@x.com", true) == "mail <EMAIL>");
  CHECK(anonymize_string("call 555-123-4567", true) == "call <PHONE>");
  CHECK(anonymize_string("@anna hi", false) == "@anna hi");
  CHECK(anonymize_string("@anna hi", true) == "<USER> hi");
  ReplacementCounts c;
  const auto once = anonymize_string("a@b.org +1 (555) 123-4567 @x", true, &c);
  CHECK(c.emails == 1);
  CHECK(c.phones == 1);
  CHECK(c.mentions == 1);
  CHECK(anonymize_string(once, true) == once);
}

TEST_CASE("group_by_author") {
  SUBCASE("timestamps sort") {
    const auto s = group_by_author({doc("a1", "late", 5), doc("a1", "early", 2)});
    REQUIRE(s.size() == 1);
    CHECK(texts(s[0].documents) == std::vector<std::string>{"early", "late"});
  }
  SUBCASE("missing timestamp keeps ingest order") {
    const auto s = group_by_author({doc("a1", "x", 5), doc("a1", "y")});
    CHECK(texts(s[0].documents) == std::vector<std::string>{"x", "y"});
  }
  SUBCASE("first appearance order") {
    const auto s = group_by_author({doc("a2", "1"), doc("a1", "2"), doc("a2", "3")});
    REQUIRE(s.size() == 2);
    CHECK(s[0].author_id == "a2");
    CHECK(s[1].author_id == "a1");
    CHECK(s[0].documents.size() == 2);
  }
  SUBCASE("equal timestamps are stable") {
    const auto s = group_by_author({doc("a", "first", 1), doc("a", "second", 1)});
    CHECK(texts(s[0].documents) == std::vector<std::string>{"first", "second"});
  }
}

TEST_CASE("corpus_stats") {
  auto d1 = doc("a", "ab");
  d1.source = "s1";
  auto d2 = doc("a", "c");
  d2.source = "s2";
  const std::vector<AuthorStream> streams{{"a", {d1, d2, doc("a", "x")}}, {"b", {doc("b", "y")}}};
  const auto st = corpus_stats(streams);
  CHECK(st.total.users == 2);
  CHECK(st.total.documents == 4);
  CHECK(st.total.utf8_bytes == 5);
  std::uint64_t docs = 0;
  for (const auto& [name, s] : st.per_source) docs += s.documents;
  CHECK(docs == st.total.documents);
  CHECK(st.per_source.at("s1").utf8_bytes + st.per_source.at("s2").utf8_bytes == 3);
  const auto empty = corpus_stats({});
  CHECK(empty.total == SourceStats{});
}

TEST_CASE("pipeline is deterministic and preserves document count") {
  std::vector<RawDocument> raw;
  for (int i = 0; i < 50; ++i) {
    raw.push_back({"u" + std::to_string(i % 7), "the post number " + std::to_string(i % 40) + " is about the weather",
                   i, std::nullopt, std::nullopt});
  }
  raw.push_back({"u1", "   ", std::nullopt, std::nullopt, std::nullopt});
  PipelineReport report;
  const auto a = run_pipeline(raw, {}, &report);
  const auto b = run_pipeline(raw, {});
  std::ostringstream sa, sb;
  write_streams_jsonl(sa, a);
  write_streams_jsonl(sb, b);
  CHECK(sa.str() == sb.str());
  std::size_t total = 0;
  for (const auto& s : a) total += s.documents.size();
  CHECK(total == report.after_toxic);
  CHECK(report.after_drop_missing == 50);
  CHECK(report.after_dedupe == 40);
}
