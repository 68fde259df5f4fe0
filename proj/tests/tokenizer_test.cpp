#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "anpd/tokenizer.hpp"

namespace {

using namespace anpd;

std::string read_asset(const std::string& rel) { return read_corpus(std::filesystem::path(ANPD_ASSETS_DIR) / rel); }

TEST(Encode, EmptyInput) {
  const auto v = Vocab::bytes();
  for (auto mode : {TokenizerMode::byte, TokenizerMode::whitespace, TokenizerMode::bpe}) {
    EXPECT_TRUE(encode("", v, mode).empty());
  }
}

TEST(Encode, ByteIdentity) {
  EXPECT_EQ(encode("ab", Vocab::bytes(), TokenizerMode::byte), (TokenSequence{97, 98}));
}

TEST(Encode, WhitespaceFallsBackToBytes) {
  const auto v = Vocab::words("red fox");
  const auto ids = encode("red cat", v, TokenizerMode::whitespace);
  ASSERT_EQ(ids.size(), 5u);  // "red", " ", 'c', 'a', 't'
  EXPECT_EQ(v.token(ids[0]), "red");
  EXPECT_EQ(decode(ids, v), "red cat");
}

// Expected ids come from a separate Python reference of the same merge rules
// (train on the corpus, then merge lowest-ranked pairs first).
TEST(Bpe, UnseenWordSplitsIntoSubwords) {
  std::string corpus;
  for (int i = 0; i < 2; ++i) corpus += "Bill\nBay\nalso\nbao\nBilge\nlabel\nBill\nbao\nBay\nalbum\n";
  const auto v = train_bpe(corpus, 300);
  EXPECT_EQ(v.size(), 276u);  // ran out of pairs before 300
  EXPECT_FALSE(v.find("Bilbao"));
  const auto ids = encode("Bilbao", v, TokenizerMode::bpe);
  EXPECT_EQ(ids, (TokenSequence{258, 264}));
  EXPECT_EQ(v.token(258), "Bil");
  EXPECT_EQ(v.token(264), "bao");
  EXPECT_EQ(decode(ids, v), "Bilbao");
}

TEST(Bpe, OverlappingPairsCounted) {
  const auto v = train_bpe("aaaa", 258);
  ASSERT_EQ(v.size(), 258u);
  EXPECT_EQ(v.token(257), "aa");
}

TEST(Bpe, MostFrequentPairWins) {
  const auto v = train_bpe("abab", 258);
  ASSERT_EQ(v.size(), 258u);
  EXPECT_EQ(v.token(257), "ab");
}

TEST(Bpe, NoMergeBudget) {
  EXPECT_EQ(train_bpe("hello hello", 257), Vocab::bytes());
}

TEST(Bpe, Errors) {
  EXPECT_THROW(train_bpe("", 300), std::invalid_argument);
  EXPECT_THROW(train_bpe("abc", 256), std::invalid_argument);
}

TEST(Bpe, SpaceGluesToFollowingWord) {
  const auto chunks = detail::bpe_chunks("a  b\nc d");
  const std::vector<std::string_view> expected{"a", " ", " b", "\n", "c", " d"};
  EXPECT_EQ(chunks, expected);
}

TEST(Decode, Examples) {
  const auto v = Vocab::bytes();
  EXPECT_EQ(decode({}, v), "");
  const TokenSequence ab{97, 98};
  EXPECT_EQ(decode(ab, v), "ab");
  const TokenSequence eos{104, 256};
  EXPECT_EQ(decode(eos, v), "h");
}

TEST(Decode, InvalidIdNamesPosition) {
  const TokenSequence ids{97, 98, 9999};
  try {
    decode(ids, Vocab::bytes());
    FAIL() << "expected out_of_range";
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos) << e.what();
  }
}

TEST(RoundTrip, RandomAsciiAllModes) {
  std::mt19937 rng(7);
  const std::string alphabet = "abcde fgh\n\tXYZ.,;!?0123456789  ";
  const auto corpus = read_asset("corpora/code.txt");
  const Vocab vocabs[] = {Vocab::bytes(), Vocab::words(corpus), train_bpe(corpus, 400)};
  const TokenizerMode modes[] = {TokenizerMode::byte, TokenizerMode::whitespace, TokenizerMode::bpe};
  for (int trial = 0; trial < 300; ++trial) {
    std::string s(rng() % 80, ' ');
    for (auto& c : s) c = alphabet[rng() % alphabet.size()];
    for (int m = 0; m < 3; ++m) {
      ASSERT_EQ(decode(encode(s, vocabs[m], modes[m]), vocabs[m]), s) << "mode " << to_string(modes[m]);
    }
  }
}

TEST(RoundTrip, BundledCorporaBpe) {
  for (const char* name : {"corpora/repetitive.txt", "corpora/code.txt", "corpora/shuffled.txt"}) {
    const auto text = read_asset(name);
    const auto v = train_bpe(text, 512);
    EXPECT_EQ(decode(encode(text, v, TokenizerMode::bpe), v), text) << name;
  }
}

TEST(VocabJson, RoundTrip) {
  const auto v = train_bpe(read_asset("corpora/code.txt"), 300);
  EXPECT_EQ(Vocab::from_json(v.to_json()), v);

  const auto path = std::filesystem::temp_directory_path() / "anpd_vocab_test.json";
  save_vocab(v, path);
  EXPECT_EQ(load_vocab(path), v);
  std::filesystem::remove(path);
}

TEST(VocabJson, NullEosAndBinaryTokens) {
  const Vocab v({std::string("\0\xff", 2), "a", ""}, std::nullopt);
  const auto j = v.to_json();
  EXPECT_TRUE(j["eos"].is_null());
  EXPECT_EQ(Vocab::from_json(j), v);
}

TEST(VocabJson, Rejects) {
  EXPECT_THROW(Vocab({"a", "a"}, std::nullopt), std::invalid_argument);
  EXPECT_THROW(Vocab({"a"}, TokenId{3}), std::invalid_argument);
  EXPECT_THROW(Vocab::from_json(nlohmann::json::array()), std::invalid_argument);
}

TEST(Stats, Examples) {
  const auto v = Vocab::bytes();
  const auto s = corpus_stats("hello world", v, TokenizerMode::byte);
  EXPECT_EQ(s.word_count, 2u);
  EXPECT_EQ(s.token_count, 11u);

  const auto empty = corpus_stats("", v, TokenizerMode::byte);
  EXPECT_EQ(empty.word_count, 0u);
  EXPECT_EQ(empty.token_count, 0u);
  EXPECT_DOUBLE_EQ(empty.ratio, 1.0);
}

// Counts frozen from the Python reference on the first 1 kB of shuffled.txt.
TEST(Stats, TrainedBpeOnOneKilobyte) {
  const auto text = read_asset("corpora/shuffled.txt").substr(0, 1024);
  const auto v = train_bpe(text, 320);
  const auto s = corpus_stats(text, v, TokenizerMode::bpe);
  EXPECT_EQ(s.word_count, 147u);
  EXPECT_EQ(s.token_count, 647u);
  EXPECT_GE(s.ratio, 1.0);
}

TEST(ReadCorpus, DirectoryInPathOrder) {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "anpd_corpus_dir_test";
  fs::remove_all(dir);
  fs::create_directories(dir / "sub");
  std::ofstream(dir / "b.txt") << "B";
  std::ofstream(dir / "a.txt") << "A";
  std::ofstream(dir / "sub" / "c.txt") << "C";
  EXPECT_EQ(read_corpus(dir), "ABC");
  fs::remove_all(dir);
}

TEST(ReadCorpus, MissingPathIsNamed) {
  try {
    read_corpus("/nonexistent/corpus.txt");
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/corpus.txt"), std::string::npos);
  }
}

}  // namespace
