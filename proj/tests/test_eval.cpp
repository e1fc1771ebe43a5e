#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lmvar/eval.hpp"
#include "test_util.hpp"

using namespace lmvar;

namespace {
Cpd cpd(std::map<std::string, double> w) { return Cpd::from_weights(w); }

AnnotationMultiset ms(std::map<std::string, std::size_t> c) {
  AnnotationMultiset w;
  for (const auto& [word, n] : c) w.add(word, n);
  return w;
}

Cpd random_cpd(Rng& rng) {
  std::map<std::string, double> w;
  const auto n = 1 + uniform_index(rng, 6);
  for (std::uint64_t i = 0; i < n; ++i) w["w" + std::to_string(uniform_index(rng, 8))] = uniform01(rng) + 1e-3;
  return Cpd::from_weights(w);
}

// A model that always says " <word>." after any context.
struct Fixture {
  MergeTable table = MergeTable::train(" the cat sat on a mat. the dog ran.", 30);
  mock::ScriptedModel say(const std::string& word) const {
    const auto ids = table.encode(" " + word + ".");
    mock::ScriptedModel m(table.vocab_size(), ids[0]);
    // Each emitted token is followed by the next one of the script.
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) m.on({ids[i]}, ids[i + 1]);
    return m;
  }
};
}  // namespace

TEST(Tvd, Examples) {
  const auto p = cpd({{"a", 0.75}, {"b", 0.25}});
  EXPECT_EQ(tvd(p, p), 0.0);
  EXPECT_DOUBLE_EQ(tvd(p, cpd({{"a", 0.25}, {"b", 0.75}})), 0.5);
  EXPECT_DOUBLE_EQ(tvd(p, cpd({{"c", 1.0}})), 1.0);
}

TEST(Tvd, MetricProperties) {
  Rng rng(11);
  for (int i = 0; i < 10000; ++i) {
    const auto p = random_cpd(rng), q = random_cpd(rng), r = random_cpd(rng);
    const double pq = tvd(p, q);
    ASSERT_GE(pq, 0.0);
    ASSERT_LE(pq, 1.0);
    ASSERT_EQ(pq, tvd(q, p));
    ASSERT_EQ(tvd(p, p), 0.0);
    ASSERT_LE(pq, tvd(p, r) + tvd(r, q) + 1e-12);
  }
}

TEST(Entropy, Examples) {
  EXPECT_EQ(entropy(cpd({{"a", 1}})), 0.0);
  EXPECT_NEAR(entropy(cpd({{"a", 1}, {"b", 1}, {"c", 1}, {"d", 1}})), 1.386294, 1e-6);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    std::map<std::string, double> w;
    for (int k = 0; k < 4; ++k) w["w" + std::to_string(k)] = uniform01(rng) + 1e-6;
    EXPECT_LE(entropy(Cpd::from_weights(w)), std::log(4.0) + 1e-12);
  }
}

TEST(Coverage, Examples) {
  const auto h = ms({{"a", 1}, {"b", 2}, {"c", 1}, {"d", 1}});
  EXPECT_DOUBLE_EQ(unique_word_coverage(h, {"a", "c", "x"}), 0.5);
  EXPECT_DOUBLE_EQ(unique_word_coverage(h, {"a", "b", "c", "d", "e"}), 1.0);
  EXPECT_DOUBLE_EQ(unique_word_coverage(h, {"x"}), 0.0);
}

TEST(OracleTvd, Examples) {
  EXPECT_EQ(oracle_tvd(ms({{"a", 4}}), 1), 0.0);
  EXPECT_EQ(oracle_tvd(ms({{"a", 1}, {"b", 1}}), 1), 1.0);
  EXPECT_THROW(oracle_tvd(ms({{"a", 1}}), 1), Error);
}

TEST(OracleTvd, MeanMatchesEnumeration) {
  // Enumerate the 6 ways to pick the first half of {a,a,b,b}.
  const std::vector<std::string> inst{"a", "a", "b", "b"};
  double exact = 0.0;
  int ways = 0;
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      AnnotationMultiset first, second;
      for (int k = 0; k < 4; ++k) (k == i || k == j ? first : second).add(inst[k]);
      exact += tvd(empirical_cpd(first), empirical_cpd(second));
      ++ways;
    }
  }
  exact /= ways;
  EXPECT_NEAR(exact, 1.0 / 3.0, 1e-15);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 10000; ++s) mean += oracle_tvd(ms({{"a", 2}, {"b", 2}}), s);
  EXPECT_NEAR(mean / 10000, exact, 0.02);
}

TEST(OracleTvd, ShrinksWithMoreAnnotations) {
  const auto truth = cpd({{"a", 0.5}, {"b", 0.3}, {"c", 0.15}, {"d", 0.05}});
  std::vector<double> means;
  for (std::size_t m : {4u, 16u, 64u}) {
    double s = 0.0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      Rng rng(derive_seed(seed, "draws", m));
      AnnotationMultiset w;
      for (std::size_t i = 0; i < m; ++i) {
        const double u = uniform01(rng);
        double c = 0.0;
        std::string pick = "d";
        for (const auto& [word, p] : truth.probs()) {
          c += p;
          if (u < c) {
            pick = word;
            break;
          }
        }
        w.add(pick);
      }
      s += oracle_tvd(w, seed);
    }
    means.push_back(s / 1000);
  }
  EXPECT_GT(means[0], means[1]);
  EXPECT_GT(means[1], means[2]);
}

TEST(McEstimate, DeterministicModelGivesPointMass) {
  Fixture f;
  const auto m = f.say("cat");
  const auto est = mc_estimate_model_cpd(m, f.table.encode("the"), 40, 1, f.table);
  EXPECT_DOUBLE_EQ(est.cpd.prob("cat"), 1.0);
  EXPECT_EQ(est.words.size(), 40u);
}

TEST(McEstimate, CoinFlipWithinBound) {
  const std::string G(kDefaultSpaceMarker);
  const MergeTable t({"a", "b", G + "a", G + "b", " "}, {});
  mock::TableModel m(t.vocab_size());
  std::vector<double> first(t.vocab_size(), 0.0), stop(t.vocab_size(), 0.0);
  first[t.encode(" a")[0]] = 0.5;
  first[t.encode(" b")[0]] = 0.5;
  stop[t.encode(" ")[0]] = 1.0;
  m.set({}, first);
  m.set(t.encode(" a"), stop);
  m.set(t.encode(" b"), stop);
  const auto truth = cpd({{"a", 0.5}, {"b", 0.5}});
  int within = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) within += tvd(mc_estimate_model_cpd(m, TokenSeq{}, 40, s, t).cpd, truth) <= 0.25;
  EXPECT_GE(within, 990);
  EXPECT_EQ(mc_estimate_model_cpd(m, TokenSeq{}, 40, 7, t).words, mc_estimate_model_cpd(m, TokenSeq{}, 40, 7, t).words);

  const double hr = hit_rate(m, TokenSeq{}, "A", 10000, 3, t);
  EXPECT_NEAR(hr, 0.5, 0.015);
}

TEST(HitRate, Extremes) {
  Fixture f;
  const auto m = f.say("cat");
  EXPECT_EQ(hit_rate(m, f.table.encode("the"), "Cat.", 40, 1, f.table), 1.0);
  EXPECT_EQ(hit_rate(m, f.table.encode("the"), "dog", 40, 1, f.table), 0.0);
}

namespace {
ClozeDataset items(const std::vector<std::pair<std::string, AnnotationMultiset>>& spec) {
  ClozeDataset ds;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    ds.items.push_back({"c" + std::to_string(i), "p", spec[i].first, "cat", spec[i].second});
  }
  return ds;
}
}  // namespace

TEST(Evaluate, SingleMatchingContext) {
  Fixture f;
  const auto ds = items({{"the", ms({{"cat", 3}})}});
  const auto r = evaluate(f.say("cat"), ds, f.table, {});
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0][0].tvd_model_human, 0.0);
  EXPECT_EQ(r.rows[0][0].unique_word_coverage, 1.0);
  EXPECT_EQ(r.aggregates.at("tvd_model_human").mean, 0.0);
  EXPECT_EQ(r.aggregates.at("tvd_model_human").n_seeds, 3u);
}

TEST(Evaluate, OrderInvariantAndAggregatesAreMeans) {
  const auto t = MergeTable::train(" the cat sat on a mat. the dog ran.", 30);
  const auto model = mock::tiny_model(t.vocab_size(), 5, 4, 6, 3, 1.0);
  auto ds = items({{"the", ms({{"cat", 2}, {"dog", 1}})},
                   {"a", ms({{"mat", 1}})},
                   {"the dog", ms({{"ran", 4}, {"sat", 4}})}});
  EvalConfig cfg;
  cfg.sampling.max_tokens = 8;
  const auto r = evaluate(model, ds, t, cfg);
  std::reverse(ds.items.begin(), ds.items.end());
  const auto rev = evaluate(model, ds, t, cfg);
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(r.rows[s][i].tvd_model_human, rev.rows[s][2 - i].tvd_model_human);
    }
  }
  EXPECT_FALSE(r.rows[0][1].tvd_oracle.has_value());  // M = 1
  std::vector<double> per_seed;
  for (const auto& rows : r.rows) {
    double s = 0.0;
    for (const auto& m : rows) s += m.tvd_model_human;
    per_seed.push_back(s / 3);
  }
  const double mean = (per_seed[0] + per_seed[1] + per_seed[2]) / 3;
  EXPECT_NEAR(r.aggregates.at("tvd_model_human").mean, mean, 1e-12);
  double ss = 0.0;
  for (double x : per_seed) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(r.aggregates.at("tvd_model_human").sd, std::sqrt(ss / 2), 1e-12);
  EXPECT_THROW(evaluate(model, ClozeDataset{}, t, cfg), Error);
}

TEST(Evaluate, ReferenceDistributions) {
  Fixture f;
  const auto ds = items({{"the", ms({{"dog", 3}})}});
  std::map<std::string, Cpd> ref{{"c0", cpd({{"cat", 0.5}, {"dog", 0.5}})}};
  EvalConfig cfg;
  cfg.reference = &ref;
  EXPECT_DOUBLE_EQ(evaluate(f.say("cat"), ds, f.table, cfg).rows[0][0].tvd_model_human, 0.5);
  std::map<std::string, Cpd> missing;
  cfg.reference = &missing;
  EXPECT_THROW(evaluate(f.say("cat"), ds, f.table, cfg), Error);
}

TEST(Evaluate, CsvRoundTripAndCompare) {
  const auto t = MergeTable::train(" the cat sat on a mat. the dog ran.", 30);
  const auto model = mock::tiny_model(t.vocab_size(), 8, 4, 6, 3, 1.0);
  const auto ds = items({{"the", ms({{"cat", 2}, {"dog", 1}})}, {"a", ms({{"mat", 1}})}});
  EvalConfig cfg;
  cfg.sampling.max_tokens = 8;
  const auto r = evaluate(model, ds, t, cfg);
  std::ostringstream out;
  write_report_csv(out, r);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')),
            "seed,context_id,tvd_model_human,tvd_oracle,model_entropy,human_entropy,unique_word_coverage,"
            "n_model_samples,truncation_count");
  EXPECT_NE(out.str().find(",NA,"), std::string::npos);
  std::istringstream in(out.str());
  const auto back = read_report_csv(in);
  std::ostringstream again;
  write_report_csv(again, back);
  EXPECT_EQ(again.str(), out.str());

  const auto same = report_compare(r, back);
  ASSERT_EQ(same.size(), 2u);
  for (const auto& row : same) EXPECT_EQ(row.tvd_delta, 0.0);

  auto better = back;
  for (auto& rows : better.rows) rows[0].tvd_model_human -= 0.1;
  const auto d = report_compare(r, better);
  EXPECT_NEAR(d[0].tvd_delta, -0.1, 1e-12);

  auto fewer = back;
  for (auto& rows : fewer.rows) rows.pop_back();
  EXPECT_THROW(report_compare(r, fewer), Error);
}
