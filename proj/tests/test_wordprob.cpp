#include <gtest/gtest.h>

#include <cmath>

#include "lmvar/eval.hpp"
#include "lmvar/wordprob.hpp"
#include "test_util.hpp"

using namespace lmvar;

namespace {
const std::string G(kDefaultSpaceMarker);

MergeTable char_table() { return MergeTable({"a", "b", G + "a", G + "b"}, {}); }

TokenId id(const MergeTable& t, const std::string& s) {
  const auto ids = t.encode(s);
  EXPECT_EQ(ids.size(), 1u) << s;
  return ids.at(0);
}
}  // namespace

TEST(WordProb, SingleTokenFactor) {
  const auto t = char_table();
  mock::TableModel m(4);
  const TokenSeq ctx{id(t, "a")};
  std::vector<double> d(4, 0.0);
  d[id(t, " b")] = 0.3;
  d[id(t, " a")] = 0.7;
  m.set(ctx, d);
  EXPECT_DOUBLE_EQ(word_prob(m, ctx, "b", t), 0.3);
}

TEST(WordProb, TwoTokenProduct) {
  const auto t = char_table();
  mock::TableModel m(4);
  const TokenSeq ctx{id(t, "b")};
  std::vector<double> first(4, 0.5 / 3), second(4, 0.6 / 3);
  first[id(t, " a")] = 0.5;
  second[id(t, "b")] = 0.4;
  m.set(ctx, first);
  m.set({id(t, "b"), id(t, " a")}, second);
  EXPECT_NEAR(word_prob(m, ctx, "ab", t), 0.2, 1e-15);
  EXPECT_THROW(word_prob(m, ctx, "abc", t), Error);
}

// Sums the joint probability of every canonical token path that decodes to
// " w" and compares with the chain product over tau(w).
TEST(WordProb, MatchesPathEnumeration) {
  for (const auto& table : {char_table(), MergeTable({"a", "b", G + "a", G + "b"}, {{G + "a", "b"}})}) {
    const std::size_t V = table.vocab_size();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const mock::HashModel model(V, seed);
      const TokenSeq ctx{0};
      std::map<std::string, double> by_word;
      std::map<std::size_t, double> mass_by_length;
      for (std::size_t len = 1; len <= 3; ++len) {
        TokenSeq path(len, 0);
        for (std::size_t code = 0; code < static_cast<std::size_t>(std::pow(V, len)); ++code) {
          std::size_t c = code;
          for (auto& tok : path) {
            tok = static_cast<TokenId>(c % V);
            c /= V;
          }
          if (!table.starts_word(path[0])) continue;
          bool inner_ok = true;
          for (std::size_t i = 1; i < len; ++i) inner_ok &= !table.starts_word(path[i]);
          if (!inner_ok) continue;
          const std::string word = table.decode(path).substr(1);
          if (table.tokenize_word(word) != path) continue;  // non-canonical spelling
          double p = 1.0;
          TokenSeq seq = ctx;
          for (TokenId tok : path) {
            p *= model.next_token_dist(seq)[tok];
            seq.push_back(tok);
          }
          by_word[word] += p;
          mass_by_length[len] += p;
        }
      }
      for (const auto& [w, p] : by_word) EXPECT_NEAR(word_prob(model, ctx, w, table), p, 1e-12) << w;
      // Words of one token length are prefix-free, so their mass is at most 1.
      for (const auto& [len, mass] : mass_by_length) EXPECT_LE(mass, 1.0 + 1e-9) << len;
    }
  }
}

TEST(WordProb, CachedModelAgrees) {
  const auto t = mock::tiny_table();
  const auto m = mock::tiny_model(t.vocab_size(), 2);
  CachedModel<TinyLm> c(m);
  const TokenSeq ctx{1, 2};
  EXPECT_EQ(word_prob(c, ctx, "aba", t), word_prob(m, ctx, "aba", t));
  EXPECT_EQ(word_prob(c, ctx, "aba", t), word_prob(m, ctx, "aba", t));
}

TEST(SampleWord, StopsAtNextWordInitialToken) {
  const auto t = MergeTable::train(" the the cat cat", 20);
  TokenSeq script = t.encode(" the cat");
  const TokenSeq ctx{0};
  const mock::SequenceModel m(t.vocab_size(), ctx.size(), script);
  Rng rng(1);
  const auto s = sample_word(m, ctx, rng, t);
  EXPECT_EQ(s.word, "the");
  EXPECT_FALSE(s.truncated);
  EXPECT_EQ(s.boundary, t.encode(" the").size());
}

TEST(SampleWord, JoinsContinuationTokens) {
  const auto t = MergeTable::train(" run run fast fast xning", 30);
  TokenSeq script = t.encode(" run");
  const auto ning = t.encode("ning");
  const auto fast = t.encode(" fast");
  script.insert(script.end(), ning.begin(), ning.end());
  script.insert(script.end(), fast.begin(), fast.end());
  const TokenSeq ctx{1};
  const mock::SequenceModel m(t.vocab_size(), ctx.size(), script);
  Rng rng(1);
  EXPECT_EQ(sample_word(m, ctx, rng, t).word, "running");
}

TEST(SampleWord, PunctuationClosesWord) {
  const auto t = MergeTable::train(" Cat. cat.", 5);
  const mock::SequenceModel m(t.vocab_size(), 0, t.encode(" Cat."));
  Rng rng(1);
  const auto s = sample_word(m, TokenSeq{}, rng, t);
  EXPECT_EQ(s.word, "cat");
  EXPECT_FALSE(s.truncated);
}

TEST(SampleWord, TruncatesAtTokenBudget) {
  const auto t = char_table();
  const mock::SequenceModel m(4, 0, {id(t, " a"), id(t, "b")});
  Rng rng(1);
  const auto s = sample_word(m, TokenSeq{}, rng, t, 16);
  EXPECT_TRUE(s.truncated);
  EXPECT_EQ(s.tokens.size(), 16u);
  EXPECT_EQ(s.word, "a" + std::string(15, 'b'));
  EXPECT_THROW(sample_word(m, TokenSeq{}, rng, t, 0), Error);
}

TEST(SampleWord, EmptyWordSentinel) {
  const auto t = MergeTable::train(" ' x", 0);
  const mock::SequenceModel m(t.vocab_size(), 0, t.encode(" ' x"));
  Rng rng(1);
  EXPECT_EQ(sample_word(m, TokenSeq{}, rng, t, 4).word, kEmptyWord);
}

TEST(SampleWord, FrequenciesConvergeToExactDistribution) {
  const auto t = mock::tiny_table();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto m = mock::tiny_model(t.vocab_size(), seed, 4, 6, 2, 1.0);
    const TokenSeq ctx{3, 1};
    const auto exact = Cpd::from_weights(mock::exact_word_dist(m, ctx, t, 6));
    Rng rng(seed);
    const auto est = sample_words(m, ctx, 10000, rng, t, {6, 1.0});
    EXPECT_LT(tvd(est.cpd, exact), 0.05);
  }
}

TEST(SampleWord, Temperature) {
  const std::vector<double> d{0.2, 0.8};
  const auto cold = detail::apply_temperature(d, 0.5);
  EXPECT_NEAR(cold[1], 0.64 / 0.68, 1e-12);
  EXPECT_EQ(detail::apply_temperature(d, 1.0), d);
  EXPECT_THROW(detail::apply_temperature(d, 0.0), Error);
}
