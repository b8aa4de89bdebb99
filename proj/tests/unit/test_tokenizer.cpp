#include <doctest.h>

#include <random>

#include "hulm/tokenizer.hpp"

using namespace hulm;

namespace {

// Random valid UTF-8: code points from several planes, surrogates skipped.
std::string random_utf8(std::mt19937_64& rng, std::size_t n) {
  std::string s;
  std::uniform_int_distribution<int> plane(0, 3);
  for (std::size_t i = 0; i < n; ++i) {
    char32_t cp = 0;
    switch (plane(rng)) {
      case 0: cp = std::uniform_int_distribution<char32_t>(0x00, 0x7F)(rng); break;
      case 1: cp = std::uniform_int_distribution<char32_t>(0x80, 0x7FF)(rng); break;
      case 2: cp = std::uniform_int_distribution<char32_t>(0xE000, 0xFFFF)(rng); break;
      default: cp = std::uniform_int_distribution<char32_t>(0x10000, 0x10FFFF)(rng); break;
    }
    if (cp < 0x80) {
      s.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      s.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return s;
}

}  // namespace

TEST_CASE("tokenize emits byte values") {
  CHECK(tokenize("ab") == std::vector<TokenId>{97, 98});
  CHECK(tokenize("").empty());
  CHECK(tokenize("\xC3\xA9") == std::vector<TokenId>{0xC3, 0xA9});
}

TEST_CASE("detokenize inverts tokenize on random UTF-8") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto s = random_utf8(rng, std::uniform_int_distribution<std::size_t>(0, 40)(rng));
    const auto t = tokenize(s);
    CHECK(t.size() == s.size());
    REQUIRE(detokenize(t) == s);
  }
}

TEST_CASE("specials are dropped on detokenize") {
  const std::vector<TokenId> t{kBos, 104, 105, kEos, kPad};
  CHECK(detokenize(t) == "hi");
  CHECK(is_special(kPad));
  CHECK(is_special(kEos));
  CHECK(is_special(kBos));
  CHECK_FALSE(is_special(255));
  CHECK(kVocabSize == 259);
}
