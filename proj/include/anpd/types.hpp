#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace anpd {

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;
using TokenSpan = std::span<const TokenId>;

// Last `count` tokens of `seq`, or all of it when shorter.
inline TokenSpan tail(TokenSpan seq, std::size_t count) {
  return count >= seq.size() ? seq : seq.subspan(seq.size() - count);
}

inline std::string to_string(TokenSpan seq) {
  std::string out = "[";
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(seq[i]);
  }
  out += ']';
  return out;
}

}  // namespace anpd
