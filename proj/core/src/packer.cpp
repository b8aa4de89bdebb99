#include "hulm/packer.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "hulm/error.hpp"

namespace hulm {

namespace {

using nlohmann::json;

// Builds one instance incrementally.
class WindowBuilder {
 public:
  WindowBuilder(std::string author_id, bool bos) : bos_(bos) {
    current_.author_id = std::move(author_id);
    reset();
  }

  std::size_t used() const noexcept { return current_.tokens.size(); }
  bool has_content() const noexcept { return !current_.spans.empty(); }

  void add(std::size_t doc_index, std::span<const TokenId> content, bool with_eos, bool is_target) {
    DocumentSpan span;
    span.doc_index = doc_index;
    span.start = current_.tokens.size();
    current_.tokens.insert(current_.tokens.end(), content.begin(), content.end());
    span.end = current_.tokens.size();
    span.is_target = is_target;
    current_.spans.push_back(span);
    if (with_eos) current_.tokens.push_back(kEos);
  }

  PackedInstance take() {
    PackedInstance out = std::move(current_);
    out.loss_mask = next_token_mask(out.tokens);
    current_ = PackedInstance{};
    current_.author_id = out.author_id;
    reset();
    return out;
  }

 private:
  void reset() {
    if (bos_) current_.tokens.push_back(kBos);
  }

  bool bos_;
  PackedInstance current_;
};

std::size_t window_capacity(std::size_t max_len, const PackOptions& options) {
  const std::size_t reserved = options.prepend_bos ? 1 : 0;
  if (max_len < 2 + reserved) throw std::invalid_argument("max_len must leave room for a token and a separator");
  return max_len - reserved;
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& out, std::uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}

bool get_bytes(std::istream& in, unsigned char* dst, std::size_t n) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<std::size_t>(in.gcount()) == n;
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!get_bytes(in, b, 4)) throw DataError("truncated packed binary stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xFFFFFFFFu) throw DataError("value does not fit the binary format");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

std::vector<std::uint8_t> next_token_mask(std::span<const TokenId> tokens) {
  std::vector<std::uint8_t> mask(tokens.size(), 0);
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) mask[i] = tokens[i + 1] != kPad ? 1 : 0;
  return mask;
}

std::vector<PackedInstance> pack_author(const AuthorStream& stream, std::size_t max_len, PackOptions options) {
  const std::size_t cap = window_capacity(max_len, options);
  const std::size_t limit = max_len;
  std::vector<PackedInstance> out;
  WindowBuilder window(stream.author_id, options.prepend_bos);

  for (std::size_t t = 0; t < stream.documents.size(); ++t) {
    const auto tokens = tokenize(stream.documents[t].normalized_text);
    if (tokens.empty()) continue;
    std::span<const TokenId> rest(tokens);
    if (window.used() + rest.size() + 1 <= limit) {
      window.add(t, rest, true, false);
      continue;
    }
    if (window.has_content()) out.push_back(window.take());
    // Oversized document: fill whole windows, keeping at least one token for
    // the final piece so it can carry the separator.
    while (rest.size() + 1 > cap) {
      const std::size_t take = rest.size() > cap ? cap : cap - 1;
      window.add(t, rest.first(take), false, false);
      out.push_back(window.take());
      rest = rest.subspan(take);
    }
    window.add(t, rest, true, false);
  }
  if (window.has_content()) out.push_back(window.take());
  return out;
}

std::vector<PackedInstance> pack_independent(std::span<const CleanDocument> docs, std::size_t max_len,
                                             PackOptions options) {
  const std::size_t cap = window_capacity(max_len, options);
  std::vector<PackedInstance> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto tokens = tokenize(docs[i].normalized_text);
    if (tokens.empty()) continue;
    if (tokens.size() > cap - 1) tokens.resize(cap - 1);
    WindowBuilder window(docs[i].author_id, options.prepend_bos);
    window.add(i, tokens, true, false);
    out.push_back(window.take());
  }
  return out;
}

PackedInstance pack_for_task(const AuthorStream& stream, std::optional<std::size_t> target_index,
                             std::size_t max_len, bool include_history, PackOptions options) {
  const std::size_t cap = window_capacity(max_len, options);
  const auto& docs = stream.documents;
  if (docs.empty()) throw DataError("cannot pack an empty stream for a task");
  if (target_index && *target_index >= docs.size()) throw std::out_of_range("target_index out of range");

  const bool all = !target_index.has_value();
  const std::size_t last = all ? docs.size() - 1 : *target_index;
  const auto last_tokens = tokenize(docs[last].normalized_text);
  if (last_tokens.empty()) throw DataError("target document is empty");
  if (last_tokens.size() + 1 > cap) throw DataError("target exceeds window");

  // Walk backwards from the newest included document, keeping whole documents
  // while they fit and head-truncating the oldest one that only partly fits.
  struct Piece {
    std::size_t doc_index;
    std::vector<TokenId> tokens;
  };
  std::vector<Piece> pieces;
  pieces.push_back({last, last_tokens});
  std::size_t budget = cap - (last_tokens.size() + 1);
  if (include_history || all) {
    for (std::size_t k = last; k-- > 0;) {
      if (budget < 2) break;
      auto tokens = tokenize(docs[k].normalized_text);
      if (tokens.empty()) continue;
      if (tokens.size() + 1 > budget) {
        tokens.erase(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(budget - 1));
      }
      budget -= tokens.size() + 1;
      pieces.push_back({k, std::move(tokens)});
    }
  }
  std::reverse(pieces.begin(), pieces.end());

  WindowBuilder window(stream.author_id, options.prepend_bos);
  for (const auto& p : pieces) window.add(p.doc_index, p.tokens, true, all || p.doc_index == last);
  return window.take();
}

std::vector<std::size_t> locate_pool_positions(const PackedInstance& instance, PoolMode mode,
                                               bool include_separator) {
  std::vector<std::size_t> positions;
  if (mode == PoolMode::target_last_token) {
    const DocumentSpan* target = nullptr;
    for (const auto& s : instance.spans) {
      if (!s.is_target) continue;
      if (target) throw DataError("target_last_token pooling needs exactly one target span");
      target = &s;
    }
    if (!target) throw DataError("instance has no target span");
    std::size_t pos = target->end - 1;
    if (include_separator && target->end < instance.tokens.size()) pos = target->end;
    positions.push_back(pos);
    return positions;
  }
  for (const auto& s : instance.spans) {
    for (std::size_t i = s.start; i < s.end; ++i) positions.push_back(i);
  }
  return positions;
}

std::optional<std::string> validate_instance(const PackedInstance& inst) {
  const std::size_t n = inst.tokens.size();
  if (inst.loss_mask.size() != n) return "loss_mask length differs from token count";
  std::vector<bool> covered(n, false);
  std::size_t cursor = 0;
  if (n > 0 && inst.tokens[0] == kBos) cursor = 1;
  for (std::size_t k = 0; k < inst.spans.size(); ++k) {
    const auto& s = inst.spans[k];
    if (s.start >= s.end) return "empty span";
    if (s.end > n) return "span exceeds instance";
    if (k > 0 && s.doc_index <= inst.spans[k - 1].doc_index) return "doc_index not strictly increasing";
    if (s.start != cursor) return "gap or overlap before span " + std::to_string(k);
    for (std::size_t i = s.start; i < s.end; ++i) {
      if (is_special(inst.tokens[i])) return "special token inside span";
      covered[i] = true;
    }
    cursor = s.end;
    if (cursor < n) {
      if (inst.tokens[cursor] != kEos) return "span not followed by EOS";
      ++cursor;
    }
  }
  for (std::size_t i = cursor; i < n; ++i) {
    if (inst.tokens[i] != kPad) return "trailing non-PAD token outside spans";
  }
  for (std::size_t i = 0; i < n; ++i) {
    bool defined = i + 1 < n && inst.tokens[i + 1] != kPad;
    if (inst.loss_mask[i] && !defined) return "loss_mask set where no target exists";
  }
  return std::nullopt;
}

std::vector<TokenId> strip_specials(const PackedInstance& instance) {
  std::vector<TokenId> out;
  for (const auto& s : instance.spans) {
    out.insert(out.end(), instance.tokens.begin() + static_cast<std::ptrdiff_t>(s.start),
               instance.tokens.begin() + static_cast<std::ptrdiff_t>(s.end));
  }
  return out;
}

json to_json(const PackedInstance& inst) {
  json spans = json::array();
  for (const auto& s : inst.spans) spans.push_back({s.doc_index, s.start, s.end, s.is_target ? 1 : 0});
  return json{{"author_id", inst.author_id}, {"tokens", inst.tokens}, {"spans", spans}, {"loss_mask", inst.loss_mask}};
}

PackedInstance packed_from_json(const json& j) {
  PackedInstance inst;
  try {
    inst.author_id = j.at("author_id").get<std::string>();
    inst.tokens = j.at("tokens").get<std::vector<TokenId>>();
    for (const auto& s : j.at("spans")) {
      if (!s.is_array() || s.size() != 4) throw DataError("span must be [doc_index,start,end,is_target]");
      inst.spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<std::size_t>(),
                            s[3].get<int>() != 0});
    }
    inst.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad packed instance: ") + e.what());
  }
  for (TokenId t : inst.tokens) {
    if (t >= kVocabSize) throw DataError("token id out of vocabulary");
  }
  return inst;
}

void write_packed_jsonl(std::ostream& out, std::span<const PackedInstance> instances) {
  for (const auto& inst : instances) out << to_json(inst).dump() << '\n';
}

std::vector<PackedInstance> read_packed_jsonl(std::istream& in) {
  std::vector<PackedInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed packed line: ") + e.what());
    }
    out.push_back(packed_from_json(j));
  }
  return out;
}

void write_packed_binary(std::ostream& out, std::span<const PackedInstance> instances) {
  for (const auto& inst : instances) {
    put_u32(out, checked_u32(inst.author_id.size()));
    out.write(inst.author_id.data(), static_cast<std::streamsize>(inst.author_id.size()));
    put_u32(out, checked_u32(inst.tokens.size()));
    for (TokenId t : inst.tokens) put_u16(out, t);
    put_u32(out, checked_u32(inst.spans.size()));
    for (const auto& s : inst.spans) {
      put_u32(out, checked_u32(s.doc_index));
      put_u32(out, checked_u32(s.start));
      put_u32(out, checked_u32(s.end));
      put_u32(out, s.is_target ? 1u : 0u);
    }
    out.write(reinterpret_cast<const char*>(inst.loss_mask.data()), static_cast<std::streamsize>(inst.loss_mask.size()));
  }
}

std::vector<PackedInstance> read_packed_binary(std::istream& in) {
  std::vector<PackedInstance> out;
  while (in.peek() != std::char_traits<char>::eof()) {
    PackedInstance inst;
    inst.author_id.resize(get_u32(in));
    if (!get_bytes(in, reinterpret_cast<unsigned char*>(inst.author_id.data()), inst.author_id.size())) {
      throw DataError("truncated packed binary stream");
    }
    inst.tokens.resize(get_u32(in));
    for (auto& t : inst.tokens) {
      unsigned char b[2];
      if (!get_bytes(in, b, 2)) throw DataError("truncated packed binary stream");
      t = static_cast<TokenId>(b[0] | (b[1] << 8));
      if (t >= kVocabSize) throw DataError("token id out of vocabulary");
    }
    inst.spans.resize(get_u32(in));
    for (auto& s : inst.spans) {
      s.doc_index = get_u32(in);
      s.start = get_u32(in);
      s.end = get_u32(in);
      s.is_target = get_u32(in) != 0;
    }
    inst.loss_mask.resize(inst.tokens.size());
    if (!get_bytes(in, inst.loss_mask.data(), inst.loss_mask.size())) throw DataError("truncated packed binary stream");
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace hulm
