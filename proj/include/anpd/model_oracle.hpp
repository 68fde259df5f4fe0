#pragma once

// The autoregressive model contract the decoder verifies drafts against, the
// in-process oracles used for experiments, and the per-call latency model.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "anpd/ngram_store.hpp"
#include "anpd/types.hpp"

namespace anpd {

/// Failure talking to a model. `kind` separates the ways a remote model can
/// break so callers can report them distinctly.
class OracleError : public std::runtime_error {
 public:
  enum class Kind { connect, timeout, transport, protocol, remote };

  OracleError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline std::string_view to_string(OracleError::Kind kind) {
  switch (kind) {
    case OracleError::Kind::connect: return "connect";
    case OracleError::Kind::timeout: return "timeout";
    case OracleError::Kind::transport: return "transport";
    case OracleError::Kind::protocol: return "protocol";
    case OracleError::Kind::remote: return "remote";
  }
  return "?";
}

struct OracleInfo {
  std::size_t vocab_size = 0;
  std::optional<TokenId> eos;
};

/// Deterministic greedy next-token predictor with an internal cache of
/// consumed tokens.
///
/// extend() consumes every token of its argument and returns one prediction
/// per consumed position: prediction j is the greedy next token given the
/// whole consumed prefix up to and including tokens[j]. Predictions must not
/// depend on how a prefix was split across extend() calls.
class ModelOracle {
 public:
  virtual ~ModelOracle() = default;

  virtual TokenSequence extend(TokenSpan tokens) = 0;
  virtual void reset() = 0;
  virtual std::size_t consumed_len() const = 0;
  virtual OracleInfo info() const = 0;

  /// Drops cached tokens beyond `len`, like truncating a KV cache. Returns
  /// false when the oracle cannot do that; callers then reset and replay.
  virtual bool truncate_cache(std::size_t len) {
    (void)len;
    return false;
  }
};

/// Teacher-forcing stand-in: prediction depends only on how many tokens have
/// been consumed. Inside the prompt it echoes the next prompt token; after it,
/// position p (tokens past the prompt) predicts target[p], then eos forever.
class ReplayOracle final : public ModelOracle {
 public:
  ReplayOracle(TokenSequence prompt, TokenSequence target, TokenId eos)
      : prompt_(std::move(prompt)), target_(std::move(target)), eos_(eos) {
    if (target_.empty()) throw std::invalid_argument("replay oracle needs a non-empty target");
  }

  TokenSequence extend(TokenSpan tokens) override {
    if (tokens.empty()) throw std::invalid_argument("extend needs at least one token");
    TokenSequence out;
    out.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) out.push_back(predict_at(++consumed_));
    return out;
  }

  void reset() override { consumed_ = 0; }
  std::size_t consumed_len() const override { return consumed_; }

  OracleInfo info() const override {
    TokenId top = eos_;
    for (TokenId t : prompt_) top = std::max(top, t);
    for (TokenId t : target_) top = std::max(top, t);
    return {std::size_t(top) + 1, eos_};
  }

  bool truncate_cache(std::size_t len) override {
    consumed_ = std::min(consumed_, len);
    return true;
  }

  const TokenSequence& target() const { return target_; }

 private:
  TokenId predict_at(std::size_t consumed) const {
    if (consumed < prompt_.size()) return prompt_[consumed];
    const std::size_t p = consumed - prompt_.size();
    return p < target_.size() ? target_[p] : eos_;
  }

  TokenSequence prompt_;
  TokenSequence target_;
  TokenId eos_;
  std::size_t consumed_ = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

struct MarkovParams {
  TokenSequence corpus;
  int order = 1;
  std::uint64_t seed = 0;
  // Defaults to max(corpus)+1 (and covers eos).
  std::optional<std::size_t> vocab_size;
  std::optional<TokenId> eos;
};

/// Order-k count model over a token corpus. Predicts the most frequent
/// successor of the last k consumed tokens (smallest id on ties); contexts the
/// corpus never shows map to a token derived from the seed and the context.
class MarkovOracle final : public ModelOracle {
 public:
  explicit MarkovOracle(MarkovParams params) : params_(std::move(params)) {
    const auto& corpus = params_.corpus;
    if (params_.order < 1) throw std::invalid_argument("markov order must be >= 1");
    if (corpus.size() <= std::size_t(params_.order)) {
      throw std::invalid_argument("markov corpus of length " + std::to_string(corpus.size()) +
                                  " is too short for order " + std::to_string(params_.order));
    }
    TokenId top = params_.eos.value_or(0);
    for (TokenId t : corpus) {
      if (t < 0) throw std::invalid_argument("negative token id in markov corpus");
      top = std::max(top, t);
    }
    vocab_size_ = params_.vocab_size.value_or(std::size_t(top) + 1);
    if (vocab_size_ <= std::size_t(top)) throw std::invalid_argument("markov vocab_size smaller than corpus ids");

    const auto k = std::size_t(params_.order);
    std::unordered_map<TokenSequence, std::map<TokenId, std::int64_t>, detail::SpanHash, detail::SpanEq> counts;
    for (std::size_t i = k; i < corpus.size(); ++i) {
      ++counts[TokenSequence(corpus.begin() + std::ptrdiff_t(i - k), corpus.begin() + std::ptrdiff_t(i))][corpus[i]];
    }
    table_.reserve(counts.size());
    for (auto& [ctx, succ] : counts) {
      // std::map iterates ids ascending, so strict > keeps the smallest id.
      TokenId best = succ.begin()->first;
      std::int64_t best_count = succ.begin()->second;
      for (auto [t, c] : succ) {
        if (c > best_count) {
          best = t;
          best_count = c;
        }
      }
      table_.emplace(ctx, best);
    }
  }

  TokenSequence extend(TokenSpan tokens) override {
    if (tokens.empty()) throw std::invalid_argument("extend needs at least one token");
    TokenSequence out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
      consumed_.push_back(t);
      out.push_back(predict(consumed_));
    }
    return out;
  }

  void reset() override { consumed_.clear(); }
  std::size_t consumed_len() const override { return consumed_.size(); }
  OracleInfo info() const override { return {vocab_size_, params_.eos}; }

  bool truncate_cache(std::size_t len) override {
    if (len < consumed_.size()) consumed_.resize(len);
    return true;
  }

  /// Greedy prediction after consuming exactly `prefix`.
  TokenId predict(TokenSpan prefix) const {
    const TokenSpan ctx = tail(prefix, std::size_t(params_.order));
    if (ctx.size() == std::size_t(params_.order)) {
      if (auto it = table_.find(ctx); it != table_.end()) return it->second;
    }
    std::uint64_t h = detail::splitmix64(params_.seed ^ 0x6a09e667f3bcc909ull);
    for (TokenId t : ctx) h = detail::splitmix64(h ^ std::uint64_t(std::uint32_t(t)));
    return TokenId(h % vocab_size_);
  }

  const MarkovParams& params() const { return params_; }

 private:
  MarkovParams params_;
  std::size_t vocab_size_ = 0;
  std::unordered_map<TokenSequence, TokenId, detail::SpanHash, detail::SpanEq> table_;
  TokenSequence consumed_;
};

/// Affine latency model in abstract time units.
struct CostModel {
  double prefill_per_token = 0.002;
  double verify_base = 1.0;
  double verify_per_token = 0.05;

  /// No prefill cost and batch-size-independent verify cost: simulated time
  /// reduces to counting model calls.
  static CostModel flat() { return {0.0, 1.0, 0.0}; }

  void validate() const {
    if (prefill_per_token < 0 || verify_base < 0 || verify_per_token < 0) {
      throw std::invalid_argument("cost model fields must be non-negative");
    }
  }

  nlohmann::json to_json() const {
    return {{"prefill_per_token", prefill_per_token}, {"verify_base", verify_base}, {"verify_per_token", verify_per_token}};
  }

  static CostModel from_json(const nlohmann::json& j) {
    CostModel c;
    c.prefill_per_token = j.value("prefill_per_token", c.prefill_per_token);
    c.verify_base = j.value("verify_base", c.verify_base);
    c.verify_per_token = j.value("verify_per_token", c.verify_per_token);
    c.validate();
    return c;
  }
};

enum class CallKind { prefill, verify };

inline double simulate_cost(const CostModel& model, CallKind kind, std::size_t batch_len) {
  if (batch_len < 1) throw std::invalid_argument("batch_len must be >= 1");
  const double n = double(batch_len);
  return kind == CallKind::prefill ? model.prefill_per_token * n : model.verify_base + model.verify_per_token * n;
}

}  // namespace anpd
