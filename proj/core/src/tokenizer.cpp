#include "hulm/tokenizer.hpp"

namespace hulm {

std::vector<TokenId> tokenize(std::string_view text) {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (!is_special(t)) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

std::size_t count_tokens(std::string_view text) noexcept { return text.size(); }

}  // namespace hulm
