#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lmvar/lm.hpp"
#include "lmvar/rng.hpp"
#include "lmvar/tokenizer.hpp"
#include "lmvar/wordprob.hpp"

namespace lmvar::mock {

// Next-token distributions that are a fixed pseudo-random function of the
// conditioning sequence.
class HashModel {
 public:
  HashModel(std::size_t vocab, std::uint64_t seed, double floor = 0.05) : vocab_(vocab), seed_(seed), floor_(floor) {}

  std::size_t vocab_size() const { return vocab_; }
  std::vector<double> next_token_dist(std::span<const TokenId> ctx) const {
    std::uint64_t h = seed_;
    for (TokenId t : ctx) h = splitmix64(h ^ (t + 0x9e37ULL));
    Rng rng(h);
    std::vector<double> p(vocab_);
    double s = 0.0;
    for (auto& x : p) s += (x = floor_ + uniform01(rng));
    for (auto& x : p) x /= s;
    return p;
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
  double floor_;
};

// Deterministic continuations: the longest registered suffix of the
// conditioning sequence selects the next token, otherwise `fallback`.
class ScriptedModel {
 public:
  ScriptedModel(std::size_t vocab, TokenId fallback) : vocab_(vocab), fallback_(fallback) {}

  void on(TokenSeq suffix, TokenId next) { rules_[std::move(suffix)] = next; }

  std::size_t vocab_size() const { return vocab_; }
  std::vector<double> next_token_dist(std::span<const TokenId> ctx) const {
    TokenId next = fallback_;
    std::size_t best = 0;
    for (const auto& [suffix, t] : rules_) {
      if (suffix.size() > ctx.size() || suffix.size() < best) continue;
      if (std::equal(suffix.begin(), suffix.end(), ctx.end() - static_cast<std::ptrdiff_t>(suffix.size()))) {
        best = suffix.size();
        next = t;
      }
    }
    std::vector<double> p(vocab_, 0.0);
    p[next] = 1.0;
    return p;
  }

 private:
  std::size_t vocab_;
  TokenId fallback_;
  std::map<TokenSeq, TokenId> rules_;
};

// Explicit distributions for chosen conditioning sequences, uniform elsewhere.
class TableModel {
 public:
  explicit TableModel(std::size_t vocab) : vocab_(vocab) {}

  void set(TokenSeq ctx, std::vector<double> dist) { table_[std::move(ctx)] = std::move(dist); }

  std::size_t vocab_size() const { return vocab_; }
  std::vector<double> next_token_dist(std::span<const TokenId> ctx) const {
    auto it = table_.find(TokenSeq(ctx.begin(), ctx.end()));
    if (it != table_.end()) return it->second;
    return std::vector<double>(vocab_, 1.0 / static_cast<double>(vocab_));
  }

 private:
  std::size_t vocab_;
  std::map<TokenSeq, std::vector<double>> table_;
};

// Emits script[i] as the i-th token after a context of length start, then
// repeats the last scripted token.
class SequenceModel {
 public:
  SequenceModel(std::size_t vocab, std::size_t start, TokenSeq script)
      : vocab_(vocab), start_(start), script_(std::move(script)) {}

  std::size_t vocab_size() const { return vocab_; }
  std::vector<double> next_token_dist(std::span<const TokenId> ctx) const {
    const std::size_t i = std::min(ctx.size() - start_, script_.size() - 1);
    std::vector<double> p(vocab_, 0.0);
    p[script_[i]] = 1.0;
    return p;
  }

 private:
  std::size_t vocab_, start_;
  TokenSeq script_;
};

// Exact distribution of sample_word outcomes by enumerating every token path
// up to the word boundary or the token budget.
template <class M>
std::map<std::string, double> exact_word_dist(const M& model, const TokenSeq& ctx, const MergeTable& table,
                                              std::size_t max_tokens) {
  std::map<std::string, double> out;
  auto walk = [&](auto&& self, TokenSeq& seq, const std::string& text, double p, std::size_t depth) -> void {
    const auto dist = model.next_token_dist(seq);
    for (TokenId t = 0; t < dist.size(); ++t) {
      if (dist[t] <= 0.0) continue;
      const std::string next = text + table.token_surface(t);
      std::string word;
      const bool closed = detail::first_word(next, word);
      if (closed || depth + 1 == max_tokens) {
        std::string w = normalize_word(closed ? word : next);
        out[w.empty() ? std::string(kEmptyWord) : w] += p * dist[t];
        continue;
      }
      seq.push_back(t);
      self(self, seq, next, p * dist[t], depth + 1);
      seq.pop_back();
    }
  };
  TokenSeq seq = ctx;
  walk(walk, seq, "", 1.0, 0);
  return out;
}

// Vocabulary over {a, b} with a few merges; at most 8 tokens.
inline MergeTable tiny_table() {
  const std::string m(kDefaultSpaceMarker);
  return MergeTable({"a", "b", m + "a", m + "b"}, {{m + "a", "b"}, {"b", "a"}, {m + "b", "a"}});
}

inline TinyLm tiny_model(std::size_t vocab, std::uint64_t seed, std::size_t d = 4, std::size_t h = 5,
                         std::size_t k = 2, double scale = 0.5) {
  TinyLmConfig cfg;
  cfg.embed_dim = d;
  cfg.hidden_dim = h;
  cfg.window = k;
  cfg.init_scale = scale;
  auto m = TinyLm::init(vocab, cfg, seed);
  Rng rng(seed + 1);
  for (auto& p : m.params()) p += uniform(rng, -0.1, 0.1);  // non-zero biases too
  return m;
}

inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i] + b[i] * b[i];
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num) / std::sqrt(den);
}

template <class F>
std::vector<double> numeric_grad(TinyLm& model, F loss, double h = 1e-5) {
  std::vector<double> g(model.num_params());
  auto p = model.params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = loss(model);
    p[i] = keep - h;
    const double down = loss(model);
    p[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

}  // namespace lmvar::mock
