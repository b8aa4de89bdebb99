#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hulm {

// Byte-level vocabulary: ids 0..255 are raw UTF-8 bytes, followed by three
// reserved specials.
using TokenId = std::uint16_t;

inline constexpr TokenId kPad = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kBos = 258;
inline constexpr std::size_t kVocabSize = 259;

inline constexpr bool is_special(TokenId t) noexcept { return t >= kPad; }

// One token per UTF-8 byte; never emits specials.
std::vector<TokenId> tokenize(std::string_view text);

// Inverse of tokenize. Special tokens are skipped.
std::string detokenize(std::span<const TokenId> tokens);

std::size_t count_tokens(std::string_view text) noexcept;

}  // namespace hulm
