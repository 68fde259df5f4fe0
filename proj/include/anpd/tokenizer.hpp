#pragma once

// Byte-level, word-level and greedy-BPE tokenization plus the token/word
// statistics used to show how subword vocabularies inflate sequence length.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anpd/types.hpp"

namespace anpd {

enum class TokenizerMode { byte, whitespace, bpe };

inline std::string_view to_string(TokenizerMode mode) {
  switch (mode) {
    case TokenizerMode::byte: return "byte";
    case TokenizerMode::whitespace: return "whitespace";
    case TokenizerMode::bpe: return "bpe";
  }
  return "?";
}

inline TokenizerMode parse_tokenizer_mode(std::string_view name) {
  if (name == "byte") return TokenizerMode::byte;
  if (name == "whitespace") return TokenizerMode::whitespace;
  if (name == "bpe") return TokenizerMode::bpe;
  throw std::invalid_argument("unknown tokenizer mode '" + std::string(name) +
                              "' (expected byte, whitespace or bpe)");
}

namespace detail {

struct StringHash {
  using is_transparent = void;
  std::size_t operator()(std::string_view s) const noexcept { return std::hash<std::string_view>{}(s); }
};

inline bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\v' || c == '\f' || c == '\r';
}

inline constexpr std::string_view kBase64Alphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8) |
                            std::uint8_t(bytes[i + 2]);
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += kBase64Alphabet[v & 63];
  }
  const std::size_t rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = std::uint8_t(bytes[i]) << 16;
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8);
    out += kBase64Alphabet[(v >> 18) & 63];
    out += kBase64Alphabet[(v >> 12) & 63];
    out += kBase64Alphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view text) {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    for (std::size_t i = 0; i < kBase64Alphabet.size(); ++i) t[std::uint8_t(kBase64Alphabet[i])] = int(i);
    return t;
  }();
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = table[std::uint8_t(c)];
      if (d < 0 || pad > 0) throw std::invalid_argument("invalid base64 character");
      v = (v << 6) | std::uint32_t(d);
    }
    out += char((v >> 16) & 0xff);
    if (pad < 2) out += char((v >> 8) & 0xff);
    if (pad < 1) out += char(v & 0xff);
  }
  return out;
}

// Pre-tokenization for BPE: a single space glues onto the word that follows
// it, every other whitespace byte stands alone. Merges never cross chunks.
inline std::vector<std::string_view> bpe_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t start = i;
    if (is_space(c)) {
      if (c == ' ' && i + 1 < text.size() && !is_space(static_cast<unsigned char>(text[i + 1]))) {
        ++i;
      } else {
        chunks.push_back(text.substr(i, 1));
        ++i;
        continue;
      }
    }
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

// Word-level chunks: maximal non-whitespace runs and single whitespace bytes.
inline std::vector<std::string_view> word_chunks(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  while (i < text.size()) {
    if (is_space(static_cast<unsigned char>(text[i]))) {
      chunks.push_back(text.substr(i, 1));
      ++i;
      continue;
    }
    std::size_t start = i;
    while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

}  // namespace detail

/// Dense token-id vocabulary. Ids are positions in `tokens()`; token strings
/// are arbitrary byte sequences and must be unique.
class Vocab {
 public:
  Vocab() = default;

  Vocab(std::vector<std::string> tokens, std::optional<TokenId> eos)
      : tokens_(std::move(tokens)), eos_(eos) {
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
      if (!inserted) {
        throw std::invalid_argument("duplicate token string at ids " + std::to_string(it->second) +
                                    " and " + std::to_string(i));
      }
    }
    if (eos_ && (*eos_ < 0 || static_cast<std::size_t>(*eos_) >= tokens_.size())) {
      throw std::invalid_argument("eos id " + std::to_string(*eos_) + " outside vocab of size " +
                                  std::to_string(tokens_.size()));
    }
  }

  /// 256 single-byte tokens (id == byte value) followed by an eos token whose
  /// string is empty, so decoding eos contributes no bytes.
  static Vocab bytes() {
    std::vector<std::string> tokens;
    tokens.reserve(257);
    for (int b = 0; b < 256; ++b) tokens.emplace_back(1, static_cast<char>(b));
    tokens.emplace_back();
    return Vocab(std::move(tokens), TokenId{256});
  }

  /// Byte vocab extended with every distinct multi-byte word of `corpus`,
  /// sorted bytewise.
  static Vocab words(std::string_view corpus) {
    Vocab base = bytes();
    std::set<std::string_view> distinct;
    for (auto chunk : detail::word_chunks(corpus)) {
      if (chunk.size() > 1) distinct.insert(chunk);
    }
    std::vector<std::string> tokens = base.tokens_;
    for (auto w : distinct) tokens.emplace_back(w);
    return Vocab(std::move(tokens), base.eos_);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> eos() const { return eos_; }

  std::optional<TokenId> find(std::string_view s) const {
    auto it = index_.find(s);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json toks = nlohmann::json::array();
    for (const auto& t : tokens_) toks.push_back(detail::base64_encode(t));
    return {{"tokens", std::move(toks)}, {"eos", eos_ ? nlohmann::json(*eos_) : nlohmann::json(nullptr)}};
  }

  static Vocab from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("tokens") || !j["tokens"].is_array()) {
      throw std::invalid_argument("vocab json must be an object with a \"tokens\" array");
    }
    std::vector<std::string> tokens;
    tokens.reserve(j["tokens"].size());
    for (const auto& t : j["tokens"]) tokens.push_back(detail::base64_decode(t.get<std::string>()));
    std::optional<TokenId> eos;
    if (j.contains("eos") && !j["eos"].is_null()) eos = j["eos"].get<TokenId>();
    return Vocab(std::move(tokens), eos);
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_ && a.eos_ == b.eos_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId, detail::StringHash, std::equal_to<>> index_;
  std::optional<TokenId> eos_;
};

inline Vocab load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file " + path.string());
  return Vocab::from_json(nlohmann::json::parse(in));
}

inline void save_vocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocab file " + path.string());
  out << vocab.to_json().dump() << '\n';
}

namespace detail {

inline TokenId byte_id(const Vocab& vocab, unsigned char b) {
  auto id = vocab.find(std::string_view(reinterpret_cast<const char*>(&b), 1));
  if (!id) throw std::invalid_argument("vocab has no token for byte " + std::to_string(int(b)));
  return *id;
}

inline void append_bytes(const Vocab& vocab, std::string_view s, TokenSequence& out) {
  for (unsigned char b : s) out.push_back(byte_id(vocab, b));
}

// Merges the adjacent pair whose concatenation is the lowest-id multi-byte
// token, leftmost occurrence first, until nothing merges. Token ids encode
// merge order because training appends merges in the order they were learned.
inline TokenSequence bpe_encode_chunk(const Vocab& vocab, std::string_view chunk) {
  TokenSequence ids;
  append_bytes(vocab, chunk, ids);
  std::string joined;
  while (ids.size() > 1) {
    std::optional<TokenId> best;
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      joined = vocab.token(ids[i]);
      joined += vocab.token(ids[i + 1]);
      auto id = vocab.find(joined);
      if (id && (!best || *id < *best)) {
        best = id;
        best_pos = i;
      }
    }
    if (!best) break;
    ids[best_pos] = *best;
    ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
  return ids;
}

}  // namespace detail

inline TokenSequence encode(std::string_view text, const Vocab& vocab, TokenizerMode mode) {
  TokenSequence out;
  switch (mode) {
    case TokenizerMode::byte:
      out.reserve(text.size());
      detail::append_bytes(vocab, text, out);
      break;
    case TokenizerMode::whitespace:
      for (auto chunk : detail::word_chunks(text)) {
        if (auto id = vocab.find(chunk)) {
          out.push_back(*id);
        } else {
          detail::append_bytes(vocab, chunk, out);
        }
      }
      break;
    case TokenizerMode::bpe: {
      std::unordered_map<std::string_view, TokenSequence> cache;
      for (auto chunk : detail::bpe_chunks(text)) {
        auto it = cache.find(chunk);
        if (it == cache.end()) it = cache.emplace(chunk, detail::bpe_encode_chunk(vocab, chunk)).first;
        out.insert(out.end(), it->second.begin(), it->second.end());
      }
      break;
    }
  }
  return out;
}

inline std::string decode(TokenSpan ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t pos = 0; pos < ids.size(); ++pos) {
    const TokenId id = ids[pos];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " at position " + std::to_string(pos) +
                              " is outside vocab of size " + std::to_string(vocab.size()));
    }
    out += vocab.token(id);
  }
  return out;
}

/// Greedy pair-merge BPE training. Each round merges the most frequent
/// adjacent pair (overlapping occurrences counted), ties going to the
/// bytewise-smallest merged string. Stops at `target_vocab_size` or when no
/// pair is left.
inline Vocab train_bpe(std::string_view corpus, std::size_t target_vocab_size) {
  if (corpus.empty()) throw std::invalid_argument("cannot train BPE on an empty corpus");
  if (target_vocab_size < 257) {
    throw std::invalid_argument("target vocab size must be at least 257 (256 bytes + eos), got " +
                                std::to_string(target_vocab_size));
  }
  const Vocab base = Vocab::bytes();
  std::vector<std::string> tokens = base.tokens();
  std::unordered_map<std::string, TokenId> index;
  for (std::size_t i = 0; i < tokens.size(); ++i) index.emplace(tokens[i], TokenId(i));

  struct Word {
    TokenSequence ids;
    std::int64_t freq;
  };
  std::map<std::string_view, std::int64_t> freq;
  for (auto chunk : detail::bpe_chunks(corpus)) ++freq[chunk];
  std::vector<Word> words;
  words.reserve(freq.size());
  for (const auto& [chunk, f] : freq) {
    Word w{{}, f};
    for (unsigned char b : chunk) w.ids.push_back(TokenId(b));
    words.push_back(std::move(w));
  }

  while (tokens.size() < target_vocab_size) {
    std::map<std::pair<TokenId, TokenId>, std::int64_t> pairs;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) pairs[{w.ids[i], w.ids[i + 1]}] += w.freq;
    }
    if (pairs.empty()) break;

    const std::pair<TokenId, TokenId>* best = nullptr;
    std::int64_t best_count = 0;
    std::string best_str;
    for (const auto& [pair, count] : pairs) {
      std::string merged = tokens[pair.first] + tokens[pair.second];
      const bool better =
          !best || count > best_count ||
          (count == best_count &&
           (merged < best_str || (merged == best_str && tokens[pair.first] < tokens[best->first])));
      if (better) {
        best = &pair;
        best_count = count;
        best_str = std::move(merged);
      }
    }

    const auto [left, right] = *best;
    TokenId merged_id;
    if (auto it = index.find(best_str); it != index.end()) {
      merged_id = it->second;
    } else {
      merged_id = TokenId(tokens.size());
      index.emplace(best_str, merged_id);
      tokens.push_back(best_str);
    }
    for (auto& w : words) {
      TokenSequence next;
      next.reserve(w.ids.size());
      for (std::size_t i = 0; i < w.ids.size(); ++i) {
        if (i + 1 < w.ids.size() && w.ids[i] == left && w.ids[i + 1] == right) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(w.ids[i]);
        }
      }
      w.ids = std::move(next);
    }
  }
  return Vocab(std::move(tokens), base.eos());
}

struct CorpusStats {
  std::size_t word_count = 0;
  std::size_t token_count = 0;
  double ratio = 1.0;  // token_count / word_count; 1.0 when there are no words
};

inline std::size_t count_words(std::string_view text) {
  std::size_t words = 0;
  bool in_word = false;
  for (unsigned char c : text) {
    const bool space = detail::is_space(c);
    if (!space && !in_word) ++words;
    in_word = !space;
  }
  return words;
}

inline CorpusStats corpus_stats(std::string_view corpus, const Vocab& vocab, TokenizerMode mode) {
  CorpusStats s;
  s.word_count = count_words(corpus);
  s.token_count = encode(corpus, vocab, mode).size();
  s.ratio = s.word_count == 0 ? 1.0 : double(s.token_count) / double(s.word_count);
  return s;
}

/// Reads a file, or every regular file under a directory concatenated in
/// lexicographic path order.
inline std::string read_corpus(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read corpus file " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::error_code ec;
  if (fs::is_directory(path, ec)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(path)) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::string out;
    for (const auto& f : files) out += slurp(f);
    return out;
  }
  if (!fs::exists(path, ec)) throw std::runtime_error("corpus path does not exist: " + path.string());
  return slurp(path);
}

}  // namespace anpd
