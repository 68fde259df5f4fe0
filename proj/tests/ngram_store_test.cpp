#include <gtest/gtest.h>

#include <map>
#include <random>

#include "anpd/ngram_store.hpp"

namespace {

using namespace anpd;

using Seq = TokenSequence;

// Brute-force reference: recount every window and remember where each
// (context, next) pair last ended, for the recency tie-break.
struct WindowCounts {
  std::map<std::pair<Seq, TokenId>, std::int64_t> count;
  std::map<std::pair<Seq, TokenId>, std::size_t> last_end;

  WindowCounts(const Seq& seq, int n) {
    for (std::size_t end = std::size_t(n); end <= seq.size(); ++end) {
      Seq ctx(seq.begin() + std::ptrdiff_t(end - std::size_t(n)), seq.begin() + std::ptrdiff_t(end - 1));
      const auto key = std::make_pair(ctx, seq[end - 1]);
      ++count[key];
      last_end[key] = end;
    }
  }

  std::optional<TokenId> argmax(const Seq& ctx) const {
    std::optional<TokenId> best;
    std::int64_t best_count = 0;
    std::size_t best_end = 0;
    for (auto it = count.lower_bound({ctx, INT32_MIN}); it != count.end() && it->first.first == ctx; ++it) {
      const auto end = last_end.at(it->first);
      if (!best || it->second > best_count || (it->second == best_count && end > best_end)) {
        best = it->first.second;
        best_count = it->second;
        best_end = end;
      }
    }
    return best;
  }
};

Seq random_seq(std::mt19937& rng, std::size_t len, int vocab) {
  Seq s(len);
  for (auto& t : s) t = TokenId(rng() % unsigned(vocab));
  return s;
}

TEST(Initialize, Examples) {
  const Seq a{1, 2, 1, 2, 1};
  const auto s = MultiLevelNgram::initialize(a, 2);
  EXPECT_EQ(s.count_of(2, Seq{1}, 2), 2);
  EXPECT_EQ(s.count_of(2, Seq{2}, 1), 2);
  EXPECT_EQ(s.committed(), a);

  const auto tiny = MultiLevelNgram::initialize(Seq{7}, 3);
  EXPECT_EQ(tiny.level(2).context_count(), 0u);
  EXPECT_EQ(tiny.level(3).context_count(), 0u);

  const auto tri = MultiLevelNgram::initialize(Seq{1, 2, 3}, 3);
  EXPECT_EQ(tri.count_of(3, Seq{1, 2}, 3), 1);

  const auto ones = MultiLevelNgram::initialize(Seq{1, 1, 1}, 2);
  EXPECT_EQ(ones.count_of(2, Seq{1}, 1), 2);
  EXPECT_EQ(ones.count_of(2, Seq{1}, 9), 0);
  EXPECT_EQ(ones.count_of(2, Seq{1, 1}, 1), 0);  // wrong context length
}

TEST(Initialize, RejectsSmallOrder) {
  EXPECT_THROW(MultiLevelNgram::initialize(Seq{1, 2}, 1), std::invalid_argument);
}

TEST(Update, Examples) {
  auto s = MultiLevelNgram::initialize(Seq{1, 2}, 2);
  s.update(3);
  EXPECT_EQ(s.count_of(2, Seq{2}, 3), 1);

  auto empty = MultiLevelNgram::initialize(Seq{}, 2);
  empty.update(5);
  EXPECT_EQ(empty.level(2).context_count(), 0u);
  EXPECT_EQ(empty.committed(), Seq{5});
}

TEST(Update, DisabledLeavesCountsUntouched) {
  auto s = MultiLevelNgram::initialize(Seq{1, 2, 3, 1}, 3, StoreOptions{false});
  const auto before = s.snapshot();
  for (TokenId t : {2, 3, 4, 4}) s.update(t);
  EXPECT_EQ(s.snapshot(), before);
  EXPECT_EQ(s.committed().size(), 8u);
}

TEST(Query, Examples) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2, 1, 3, 1, 2}, 2);
  EXPECT_EQ(s.query(Seq{1}, 2), 2);

  const auto empty = MultiLevelNgram::initialize(Seq{}, 3);
  EXPECT_FALSE(empty.query(Seq{1}, 2));
  EXPECT_FALSE(empty.query(Seq{1, 2}, 3));

  const auto tie = MultiLevelNgram::initialize(Seq{1, 2, 1, 3}, 2);
  EXPECT_EQ(tie.query(Seq{1}, 2), 3);
}

TEST(Query, UsesOnlyTheTail) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2, 3}, 3);
  EXPECT_EQ(s.query(Seq{9, 9, 1, 2}, 3), 3);
}

TEST(Query, Errors) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2, 3}, 3);
  EXPECT_THROW(s.query(Seq{1, 2}, 4), std::out_of_range);
  EXPECT_THROW(s.query(Seq{1}, 1), std::out_of_range);
  EXPECT_THROW(s.query(Seq{1}, 3), std::invalid_argument);
}

TEST(QueryMultilevel, Examples) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2, 3, 1, 2, 3}, 3);
  const auto hit = s.query_multilevel(Seq{1, 2});
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->token, 3);
  EXPECT_EQ(hit->level_n, 3);
  EXPECT_EQ(hit->count, 2);
  EXPECT_FALSE(s.query_multilevel(Seq{9, 9}));

  const auto bigram = MultiLevelNgram::initialize(Seq{1, 2}, 3);
  const auto low = bigram.query_multilevel(Seq{5, 1});
  ASSERT_TRUE(low);
  EXPECT_EQ(low->token, 2);
  EXPECT_EQ(low->level_n, 2);
}

TEST(QueryMultilevel, ShortContextSkipsLevels) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2, 3}, 4);
  const auto hit = s.query_multilevel(Seq{2});
  ASSERT_TRUE(hit);
  EXPECT_EQ(hit->level_n, 2);
  EXPECT_FALSE(s.query_multilevel(Seq{}));
}

TEST(QueryMultilevel, FixedLevelHasNoFallback) {
  const auto s = MultiLevelNgram::initialize(Seq{1, 2}, 3);
  EXPECT_FALSE(s.query_multilevel(Seq{5, 1}, QueryMode::fixed_level));
  const auto t = MultiLevelNgram::initialize(Seq{5, 1, 2}, 3);
  EXPECT_EQ(t.query_multilevel(Seq{5, 1}, QueryMode::fixed_level)->level_n, 3);
}

TEST(Property, CountsAndQueriesMatchBruteForce) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const int n_max = 2 + int(rng() % 5);
    const int vocab = 2 + int(rng() % 10);
    const Seq init = random_seq(rng, rng() % 200, vocab);
    auto store = MultiLevelNgram::initialize(init, n_max);
    for (TokenId t : random_seq(rng, rng() % 200, vocab)) store.update(t);
    const Seq& all = store.committed();

    for (int n = 2; n <= n_max; ++n) {
      const WindowCounts ref(all, n);
      std::size_t stored = 0;
      store.level(n).for_each([&](TokenSpan ctx, const NgramLevel::Successor& s) {
        ++stored;
        const auto key = std::make_pair(Seq(ctx.begin(), ctx.end()), s.next);
        ASSERT_EQ(s.count, ref.count.at(key));
      });
      EXPECT_EQ(stored, ref.count.size());
      for (const auto& [key, c] : ref.count) {
        EXPECT_EQ(store.query(key.first, n), ref.argmax(key.first));
        // Soundness: the answer's count is maximal for its context.
        EXPECT_GE(store.count_of(n, key.first, *store.query(key.first, n)), c);
      }
    }
  }
}

TEST(Property, MultilevelDominance) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n_max = 2 + int(rng() % 5);
    const auto store = MultiLevelNgram::initialize(random_seq(rng, 60, 6), n_max);
    const Seq ctx = random_seq(rng, rng() % 7, 6);
    const auto hit = store.query_multilevel(ctx);
    const int found = hit ? hit->level_n : 1;
    for (int n = found + 1; n <= n_max; ++n) {
      if (ctx.size() >= std::size_t(n - 1)) {
        EXPECT_FALSE(store.query(ctx, n).has_value());
      }
    }
    if (hit) {
      EXPECT_EQ(store.query(ctx, found), hit->token);
    }
  }
}

TEST(Property, Deterministic) {
  std::mt19937 rng(5);
  const Seq init = random_seq(rng, 500, 8);
  const Seq more = random_seq(rng, 300, 8);
  auto a = MultiLevelNgram::initialize(init, 4);
  auto b = MultiLevelNgram::initialize(init, 4);
  for (TokenId t : more) {
    a.update(t);
    b.update(t);
  }
  EXPECT_EQ(a.snapshot(), b.snapshot());
}

TEST(Property, FrozenStoreAnswersDependOnlyOnInit) {
  std::mt19937 rng(9);
  const Seq init = random_seq(rng, 100, 5);
  const auto reference = MultiLevelNgram::initialize(init, 3);
  auto frozen = MultiLevelNgram::initialize(init, 3, StoreOptions{false});
  for (TokenId t : random_seq(rng, 100, 5)) frozen.update(t);
  for (int i = 0; i < 100; ++i) {
    const Seq ctx = random_seq(rng, 2, 5);
    const auto a = reference.query_multilevel(ctx);
    const auto b = frozen.query_multilevel(ctx);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      EXPECT_EQ(a->token, b->token);
      EXPECT_EQ(a->level_n, b->level_n);
    }
  }
}

TEST(Snapshot, ShapeAndOrdering) {
  const auto s = MultiLevelNgram::initialize(Seq{3, 1, 3, 2, 1}, 3);
  const auto j = s.snapshot();
  EXPECT_EQ(j["n_max"], 3);
  ASSERT_EQ(j["levels"].size(), 2u);
  EXPECT_EQ(j["levels"][0]["n"], 2);
  const auto& e = j["levels"][0]["entries"];
  // bigrams: (3)->1, (1)->3, (3)->2, (2)->1
  ASSERT_EQ(e.size(), 4u);
  EXPECT_EQ(e[0]["context"], Seq{1});
  EXPECT_EQ(e[1]["context"], Seq{2});
  EXPECT_EQ(e[2]["context"], Seq{3});
  EXPECT_EQ(e[2]["next"], 1);
  EXPECT_EQ(e[3]["next"], 2);
  // Ordinals: windows are counted position by position, low order first.
  EXPECT_EQ(e[2]["ordinal"], 1);  // (3)->1 ends at position 1
  EXPECT_EQ(e[0]["ordinal"], 2);  // (1)->3 ends at position 2
  const auto& tri = j["levels"][1]["entries"];
  EXPECT_EQ(tri[0]["context"], (Seq{1, 3}));
  EXPECT_EQ(tri[0]["ordinal"], 5);
  EXPECT_EQ(tri[1]["context"], (Seq{3, 1}));
  EXPECT_EQ(tri[1]["ordinal"], 3);
}

TEST(Eviction, OldestContextGoes) {
  auto s = MultiLevelNgram::initialize(Seq{}, 2, StoreOptions{true, 2});
  for (TokenId t : {1, 2, 3}) s.update(t);  // contexts (1), (2)
  s.update(1);                               // (3) evicts (1)
  EXPECT_EQ(s.level(2).context_count(), 2u);
  EXPECT_EQ(s.count_of(2, Seq{1}, 2), 0);
  EXPECT_EQ(s.count_of(2, Seq{2}, 3), 1);
  EXPECT_EQ(s.count_of(2, Seq{3}, 1), 1);
  s.update(2);  // (1) comes back, evicting (2)
  EXPECT_EQ(s.count_of(2, Seq{1}, 2), 1);
  EXPECT_EQ(s.count_of(2, Seq{2}, 3), 0);
}

TEST(Move, StoreSurvivesMove) {
  auto a = MultiLevelNgram::initialize(Seq{1, 2, 1, 2}, 3, StoreOptions{true, 4});
  const auto snap = a.snapshot();
  MultiLevelNgram b = std::move(a);
  EXPECT_EQ(b.snapshot(), snap);
  b.update(1);
  EXPECT_EQ(b.count_of(3, Seq{1, 2}, 1), 2);
}

}  // namespace
