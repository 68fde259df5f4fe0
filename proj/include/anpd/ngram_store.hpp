#pragma once

// Adaptive multi-level n-gram memory: one count table per order 2..N_max,
// fed from the prompt and from every committed token during decoding, and
// queried from the highest order downward.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iterator>
#include <list>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anpd/types.hpp"

namespace anpd {

namespace detail {

struct SpanHash {
  using is_transparent = void;
  std::size_t operator()(TokenSpan s) const noexcept {
    // FNV-1a over the raw ids.
    std::uint64_t h = 1469598103934665603ull;
    for (TokenId t : s) {
      h ^= static_cast<std::uint32_t>(t);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
  std::size_t operator()(const TokenSequence& s) const noexcept { return (*this)(TokenSpan(s)); }
};

struct SpanEq {
  using is_transparent = void;
  bool operator()(TokenSpan a, TokenSpan b) const noexcept { return std::ranges::equal(a, b); }
};

}  // namespace detail

/// How query_multilevel walks the levels. `fixed_level` consults only the
/// top order, which is the plain single-table n-gram.
enum class QueryMode { multilevel, fixed_level };

struct QueryHit {
  TokenId token = 0;
  int level_n = 0;
  std::int64_t count = 0;

  friend bool operator==(const QueryHit&, const QueryHit&) = default;
};

struct StoreOptions {
  bool runtime_update = true;
  // Per-level cap on distinct contexts; least recently updated contexts are
  // evicted first. 0 means unbounded.
  std::size_t max_contexts = 0;
};

/// Count table for a single order n: (n-1)-token context -> next-token
/// counts with the ordinal of each entry's latest increment.
class NgramLevel {
 public:
  struct Successor {
    TokenId next;
    std::int64_t count;
    std::uint64_t ordinal;
  };

  explicit NgramLevel(int order, std::size_t max_contexts = 0)
      : order_(order), max_contexts_(max_contexts) {}

  // The LRU list points at keys inside the table; moves keep nodes in place,
  // copies would not.
  NgramLevel(NgramLevel&&) noexcept = default;
  NgramLevel& operator=(NgramLevel&&) noexcept = default;
  NgramLevel(const NgramLevel&) = delete;
  NgramLevel& operator=(const NgramLevel&) = delete;

  int order() const { return order_; }
  std::size_t context_count() const { return table_.size(); }

  void add(TokenSpan context, TokenId next, std::uint64_t ordinal) {
    auto it = table_.find(context);
    if (it == table_.end()) {
      it = table_.emplace(TokenSequence(context.begin(), context.end()), Entry{}).first;
      if (max_contexts_ > 0) {
        it->second.lru = lru_.insert(lru_.end(), &it->first);
        if (table_.size() > max_contexts_) evict_oldest();
      }
    } else if (max_contexts_ > 0) {
      lru_.splice(lru_.end(), lru_, it->second.lru);
    }
    Entry& e = it->second;
    auto succ = std::ranges::find(e.successors, next, &Successor::next);
    if (succ == e.successors.end()) {
      e.successors.push_back({next, 1, ordinal});
      succ = std::prev(e.successors.end());
    } else {
      ++succ->count;
      succ->ordinal = ordinal;
    }
    // The touched successor holds the newest ordinal, so it wins every tie
    // and only has to match the current best's count to take over.
    const auto touched = static_cast<std::size_t>(succ - e.successors.begin());
    if (touched != e.best && succ->count >= e.successors[e.best].count) e.best = touched;
  }

  const Successor* best(TokenSpan context) const {
    auto it = table_.find(context);
    if (it == table_.end()) return nullptr;
    return &it->second.successors[it->second.best];
  }

  std::int64_t count(TokenSpan context, TokenId next) const {
    auto it = table_.find(context);
    if (it == table_.end()) return 0;
    auto succ = std::ranges::find(it->second.successors, next, &Successor::next);
    return succ == it->second.successors.end() ? 0 : succ->count;
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& [ctx, e] : table_) {
      for (const auto& s : e.successors) fn(TokenSpan(ctx), s);
    }
  }

 private:
  struct Entry {
    std::vector<Successor> successors;
    std::size_t best = 0;
    std::list<const TokenSequence*>::iterator lru;
  };

  void evict_oldest() {
    const TokenSequence* victim = lru_.front();
    lru_.pop_front();
    table_.erase(*victim);
  }

  int order_;
  std::size_t max_contexts_;
  std::unordered_map<TokenSequence, Entry, detail::SpanHash, detail::SpanEq> table_;
  std::list<const TokenSequence*> lru_;
};

/// The n-gram module. Holds the committed token stream it has seen so each
/// update can form the windows ending at the new token.
class MultiLevelNgram {
 public:
  static MultiLevelNgram initialize(TokenSpan token_ids, int n_max, StoreOptions options = {}) {
    if (n_max < 2) throw std::invalid_argument("n_max must be >= 2, got " + std::to_string(n_max));
    MultiLevelNgram store(n_max, options);
    store.committed_.reserve(token_ids.size());
    for (TokenId t : token_ids) store.append(t, /*count=*/true);
    return store;
  }

  int n_max() const { return n_max_; }
  const TokenSequence& committed() const { return committed_; }
  bool runtime_update_enabled() const { return options_.runtime_update; }
  void set_runtime_update(bool enabled) { options_.runtime_update = enabled; }
  const NgramLevel& level(int n) const { return levels_.at(level_index(n)); }

  /// Commits one token. Counts move only while runtime updates are enabled.
  void update(TokenId new_token) { append(new_token, options_.runtime_update); }

  /// Count-argmax successor of the last n-1 tokens of `context` at order n.
  /// Ties go to the most recently reinforced successor.
  std::optional<TokenId> query(TokenSpan context, int n) const {
    check_order(n);
    if (context.size() < static_cast<std::size_t>(n - 1)) {
      throw std::invalid_argument("query at order " + std::to_string(n) + " needs " + std::to_string(n - 1) +
                                  " context tokens, got " + std::to_string(context.size()));
    }
    if (const auto* s = levels_[level_index(n)].best(tail(context, std::size_t(n - 1)))) return s->next;
    return std::nullopt;
  }

  /// Highest-order match first, falling back one order at a time. Orders the
  /// context is too short for are skipped.
  std::optional<QueryHit> query_multilevel(TokenSpan context_tail, QueryMode mode = QueryMode::multilevel) const {
    const int lowest = mode == QueryMode::multilevel ? 2 : n_max_;
    for (int n = n_max_; n >= lowest; --n) {
      if (context_tail.size() < static_cast<std::size_t>(n - 1)) continue;
      if (const auto* s = levels_[level_index(n)].best(tail(context_tail, std::size_t(n - 1)))) {
        return QueryHit{s->next, n, s->count};
      }
    }
    return std::nullopt;
  }

  std::int64_t count_of(int n, TokenSpan context, TokenId next) const {
    check_order(n);
    if (context.size() != static_cast<std::size_t>(n - 1)) return 0;
    return levels_[level_index(n)].count(context, next);
  }

  /// Snapshot with entries ordered by (context, next) so dumps diff cleanly.
  nlohmann::json snapshot() const {
    nlohmann::json levels = nlohmann::json::array();
    for (const auto& lvl : levels_) {
      struct Row {
        TokenSequence context;
        NgramLevel::Successor s;
      };
      std::vector<Row> rows;
      lvl.for_each([&](TokenSpan ctx, const NgramLevel::Successor& s) {
        rows.push_back({TokenSequence(ctx.begin(), ctx.end()), s});
      });
      std::ranges::sort(rows, [](const Row& a, const Row& b) {
        return std::tie(a.context, a.s.next) < std::tie(b.context, b.s.next);
      });
      nlohmann::json entries = nlohmann::json::array();
      for (const auto& r : rows) {
        entries.push_back({{"context", r.context}, {"next", r.s.next}, {"count", r.s.count}, {"ordinal", r.s.ordinal}});
      }
      levels.push_back({{"n", lvl.order()}, {"entries", std::move(entries)}});
    }
    return {{"n_max", n_max_}, {"levels", std::move(levels)}};
  }

 private:
  MultiLevelNgram(int n_max, StoreOptions options) : n_max_(n_max), options_(options) {
    levels_.reserve(std::size_t(n_max - 1));
    for (int n = 2; n <= n_max; ++n) levels_.emplace_back(n, options.max_contexts);
  }

  static std::size_t level_index(int n) { return static_cast<std::size_t>(n - 2); }

  void check_order(int n) const {
    if (n < 2 || n > n_max_) {
      throw std::out_of_range("order " + std::to_string(n) + " outside [2, " + std::to_string(n_max_) + "]");
    }
  }

  void append(TokenId token, bool count) {
    committed_.push_back(token);
    if (!count) return;
    const TokenSpan seq(committed_);
    for (int n = 2; n <= n_max_ && seq.size() >= std::size_t(n); ++n) {
      const TokenSpan window = tail(seq, std::size_t(n));
      levels_[level_index(n)].add(window.first(std::size_t(n - 1)), token, ++ordinal_);
    }
  }

  int n_max_;
  StoreOptions options_;
  std::vector<NgramLevel> levels_;
  TokenSequence committed_;
  std::uint64_t ordinal_ = 0;
};

}  // namespace anpd
