#pragma once

// Word-level views of a token model: the probability of a word as the chain
// product over its canonical tokenization, and ancestral sampling of a whole
// word after a context.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lmvar/corpus.hpp"
#include "lmvar/error.hpp"
#include "lmvar/lm.hpp"
#include "lmvar/rng.hpp"
#include "lmvar/tokenizer.hpp"

namespace lmvar {

template <class M>
concept NextTokenModel = requires(const M& m, std::span<const TokenId> ctx) {
  { m.next_token_dist(ctx) } -> std::convertible_to<std::vector<double>>;
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
};

// Memoizes next_token_dist per conditioning sequence. Repeated sampling from
// one context revisits the same prefixes many times.
template <NextTokenModel M>
class CachedModel {
 public:
  explicit CachedModel(const M& model) : model_(&model) {}

  std::size_t vocab_size() const { return model_->vocab_size(); }
  const std::vector<double>& next_token_dist(std::span<const TokenId> ctx) const {
    TokenSeq key(ctx.begin(), ctx.end());
    auto it = cache_.find(key);
    if (it == cache_.end()) it = cache_.emplace(std::move(key), model_->next_token_dist(ctx)).first;
    return it->second;
  }

 private:
  const M* model_;
  mutable std::map<TokenSeq, std::vector<double>> cache_;
};

// prod_j q(t_j | context, t_1..t_{j-1})
template <NextTokenModel M>
double token_chain_prob(const M& model, std::span<const TokenId> context,
                        std::span<const TokenId> tokens) {
  TokenSeq seq(context.begin(), context.end());
  double p = 1.0;
  for (TokenId t : tokens) {
    const auto& dist = model.next_token_dist(seq);
    if (t >= dist.size()) throw Error("token id " + std::to_string(t) + " out of range");
    p *= dist[t];
    seq.push_back(t);
  }
  return p;
}

template <NextTokenModel M>
double word_prob(const M& model, std::span<const TokenId> context, std::string_view word,
                 const MergeTable& table) {
  const TokenSeq tau = table.tokenize_word(word);
  return token_chain_prob(model, context, tau);
}

struct WordSample {
  TokenSeq tokens;     // everything sampled, including the token that closed the word
  std::string word;    // normalized first word
  std::size_t boundary = 0;  // index of the token in which the word was closed
  bool truncated = false;
};

inline constexpr std::string_view kEmptyWord = "<empty>";

namespace detail {

inline bool is_word_boundary(char c) {
  static constexpr std::string_view kBoundary = " \t\n\r.,;:!?\"";
  return kBoundary.find(c) != std::string_view::npos;
}

// Finds the first word in text. Returns true once the word is closed by a
// boundary character; word receives the characters seen so far either way.
inline bool first_word(std::string_view text, std::string& word) {
  std::size_t b = 0;
  while (b < text.size() && is_word_boundary(text[b])) ++b;
  std::size_t e = b;
  while (e < text.size() && !is_word_boundary(text[e])) ++e;
  word.assign(text.substr(b, e - b));
  return e > b && e < text.size();
}

inline std::vector<double> apply_temperature(const std::vector<double>& dist, double temperature) {
  if (temperature == 1.0) return dist;
  if (!(temperature > 0.0)) throw Error("temperature must be > 0");
  std::vector<double> out(dist.size());
  double s = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    out[i] = dist[i] > 0.0 ? std::pow(dist[i], 1.0 / temperature) : 0.0;
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

}  // namespace detail

// Samples tokens until the decoded continuation holds one complete word: a
// later word-initial token begins, or whitespace/sentence punctuation follows
// non-empty content. Runs of max_tokens without a boundary are truncated and
// the whole fragment is used.
template <NextTokenModel M>
WordSample sample_word(const M& model, std::span<const TokenId> context, Rng& rng,
                       const MergeTable& table, std::size_t max_tokens = 16,
                       double temperature = 1.0) {
  if (max_tokens == 0) throw Error("max_tokens must be >= 1");
  WordSample s;
  TokenSeq seq(context.begin(), context.end());
  std::string text, word;
  for (std::size_t i = 0; i < max_tokens; ++i) {
    const auto dist = detail::apply_temperature(model.next_token_dist(seq), temperature);
    const TokenId t = sample_from(dist, rng);
    s.tokens.push_back(t);
    seq.push_back(t);
    text += table.token_surface(t);
    if (detail::first_word(text, word)) {
      s.boundary = i;
      s.word = normalize_word(word);
      if (s.word.empty()) s.word = kEmptyWord;
      return s;
    }
  }
  s.truncated = true;
  s.boundary = s.tokens.size();
  s.word = normalize_word(text);
  if (s.word.empty()) s.word = kEmptyWord;
  return s;
}

struct WordEstimate {
  Cpd cpd;
  std::vector<std::string> words;  // in sampling order
  std::size_t truncations = 0;
};

struct SamplingOptions {
  std::size_t max_tokens = 16;
  double temperature = 1.0;
};

// n ancestral word samples from one rng stream.
template <NextTokenModel M>
WordEstimate sample_words(const M& model, std::span<const TokenId> context, std::size_t n,
                          Rng& rng, const MergeTable& table, SamplingOptions opt = {}) {
  if (n == 0) throw Error("number of samples must be >= 1");
  CachedModel<M> cached(model);
  WordEstimate est;
  std::map<std::string, double> counts;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = sample_word(cached, context, rng, table, opt.max_tokens, opt.temperature);
    if (s.truncated) ++est.truncations;
    counts[s.word] += 1.0;
    est.words.push_back(std::move(s.word));
  }
  est.cpd = Cpd::from_weights(counts);
  return est;
}

}  // namespace lmvar
