#include <gtest/gtest.h>

#include "lmvar/tokenizer.hpp"
#include "test_util.hpp"

using namespace lmvar;

namespace {
const std::string G(kDefaultSpaceMarker);
}

TEST(Tokenizer, TieBreaksOnSmallestMergedString) {
  const auto t = MergeTable::train(" ba ba ab ab", 10);
  ASSERT_EQ(t.merges().size(), 2u);
  EXPECT_EQ(t.merges()[0], (MergeTable::Merge{G + "a", "b"}));
  EXPECT_EQ(t.merges()[1], (MergeTable::Merge{G + "b", "a"}));
}

TEST(Tokenizer, StopsWhenNoPairRepeats) {
  const auto t = MergeTable::train("ab cd cd", 100);
  ASSERT_EQ(t.merges().size(), 1u);
  EXPECT_EQ(t.merges()[0], (MergeTable::Merge{G + "c", "d"}));
}

TEST(Tokenizer, MostFrequentPairFirst) {
  const auto t = MergeTable::train(" low low low lower lower newest newest", 3);
  ASSERT_EQ(t.merges().size(), 3u);
  // (o,w) and (Gl,o) both occur 5 times; "ow" sorts first bytewise.
  EXPECT_EQ(t.merges()[0], (MergeTable::Merge{"o", "w"}));
  EXPECT_EQ(t.merges()[1], (MergeTable::Merge{G + "l", "ow"}));
}

TEST(Tokenizer, AlphabetHasBareAndMarkedForms) {
  const auto t = MergeTable::train(" xy", 0);
  const auto& a = t.alphabet();
  for (const std::string& s : std::vector<std::string>{"x", "y", G + "x", G + "y"}) {
    EXPECT_NE(std::find(a.begin(), a.end(), s), a.end()) << s;
  }
  EXPECT_NO_THROW(t.encode("yx"));
}

TEST(Tokenizer, RoundTrip) {
  const std::string corpus = "the cat sat on the mat.\nThe dog sat too,  then left!\n";
  const auto t = MergeTable::train(corpus, 40);
  for (const std::string s : {corpus, std::string("  the   mat\n\ncat "), std::string("tac. eht")}) {
    EXPECT_EQ(t.decode(t.encode(s)), s);
  }
}

TEST(Tokenizer, WordEncodingUsesLeadingSpace) {
  const auto t = MergeTable::train(" the cat the cat the", 20);
  EXPECT_EQ(t.tokenize_word("cat"), t.encode(" cat"));
  const auto tau = t.tokenize_word("the");
  ASSERT_EQ(tau.size(), 1u);
  EXPECT_TRUE(t.starts_word(tau[0]));
  EXPECT_EQ(t.token_surface(tau[0]), " the");
  EXPECT_THROW(t.tokenize_word(""), Error);
}

TEST(Tokenizer, EncodingIsGreedyByRank) {
  const auto t = mock::tiny_table();
  // " aba": first merge (Ga,b) beats (b,a).
  const auto ids = t.encode(" aba");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(t.token_text(ids[0]), G + "ab");
  EXPECT_EQ(t.token_text(ids[1]), "a");
  EXPECT_EQ(t.vocab_size(), 7u);
}

TEST(Tokenizer, Errors) {
  EXPECT_THROW(MergeTable::train("", 10), Error);
  const auto t = MergeTable::train("abc abc", 5);
  EXPECT_THROW(t.encode("abz"), Error);
  EXPECT_THROW(t.encode("a" + G + "b"), Error);
  EXPECT_THROW(t.token_text(static_cast<TokenId>(t.vocab_size())), Error);
  EXPECT_THROW(MergeTable({"a"}, {{"a", "q"}}), Error);
  EXPECT_THROW(MergeTable({"a", "aa"}, {{"a", "a"}}), Error);
}

TEST(Tokenizer, JsonRoundTrip) {
  const auto t = MergeTable::train(" naive café déjà vu vu café", 15);
  const auto back = MergeTable::from_json(nlohmann::json::parse(t.to_json().dump()));
  EXPECT_EQ(back.hash(), t.hash());
  EXPECT_EQ(back.encode(" café vu"), t.encode(" café vu"));
  EXPECT_EQ(t.decode(t.encode("déjà café")), "déjà café");
  EXPECT_THROW(MergeTable::from_json(nlohmann::json{{"alphabet", 3}}), Error);
}

TEST(Tokenizer, TrainingIsDeterministic) {
  const std::string text = "one two three two one three three one";
  EXPECT_EQ(MergeTable::train(text, 30).to_json(), MergeTable::train(text, 30).to_json());
}
