#pragma once

// Synthetic ground truth: per-context word distributions drawn from a
// symmetric Dirichlet, from which "human" annotations and corpus
// continuations are sampled. Small alpha gives near point masses
// (restrictive contexts), large alpha near-uniform ones (open-ended).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvar/corpus.hpp"
#include "lmvar/error.hpp"
#include "lmvar/rng.hpp"

namespace lmvar {

struct SyntheticWorld {
  std::vector<std::string> words;        // candidate next words
  std::vector<std::string> context_ids;
  std::vector<std::string> prefixes;
  std::vector<Cpd> truth;                // per context
  double alpha = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_contexts() const { return prefixes.size(); }

  std::map<std::string, Cpd> truth_by_id() const {
    std::map<std::string, Cpd> out;
    for (std::size_t i = 0; i < context_ids.size(); ++i) out[context_ids[i]] = truth[i];
    return out;
  }
};

namespace detail {

// Pronounceable two-syllable words, distinct and independent of the seed.
inline std::vector<std::string> synthetic_words(std::size_t n) {
  static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  std::vector<std::string> syll;
  for (char c : kOnsets)
    for (char v : kVowels) syll.push_back(std::string{c, v});
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; out.size() < n; ++i) {
    const std::string w = syll[(i * 7 + 3) % syll.size()] + syll[(i * 11 + 5 + i / syll.size()) % syll.size()];
    if (i > syll.size() * syll.size()) throw Error("synthetic word vocabulary too large");
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> kFillers{
      "river", "stone", "quiet", "morning", "yellow", "window", "garden", "silver",
      "market", "winter", "paper",  "island",  "candle", "forest", "bridge", "copper",
      "letter", "harbor", "meadow", "thunder", "velvet", "marble", "lantern", "orchard"};
  return kFillers;
}

}  // namespace detail

inline constexpr std::size_t kPrefixLength = 6;
inline constexpr std::size_t kDistinctTail = 4;

// Each prefix is kPrefixLength filler words; the last kDistinctTail words are
// unique across contexts, so short-window models can tell contexts apart.
inline SyntheticWorld gen_world(std::size_t num_contexts, std::size_t vocab_size, double alpha,
                                std::uint64_t seed) {
  if (vocab_size < 2) throw Error("synthetic vocabulary needs >= 2 words");
  if (!(alpha > 0.0)) throw Error("alpha must be > 0");
  const auto& fill = detail::filler_words();
  const double tails = std::pow(static_cast<double>(fill.size()), static_cast<double>(kDistinctTail));
  if (static_cast<double>(num_contexts) > tails / 4) throw Error("too many synthetic contexts");

  SyntheticWorld w;
  w.words = detail::synthetic_words(vocab_size);
  w.alpha = alpha;
  w.seed = seed;
  Rng prefix_rng(derive_seed(seed, "prefixes"));
  std::set<std::vector<std::size_t>> used_tails;
  for (std::size_t c = 0; c < num_contexts; ++c) {
    std::vector<std::size_t> idx(kPrefixLength);
    do {
      for (auto& i : idx) i = static_cast<std::size_t>(uniform_index(prefix_rng, fill.size()));
    } while (!used_tails.insert(std::vector<std::size_t>(idx.end() - kDistinctTail, idx.end())).second);
    std::string text;
    for (std::size_t k = 0; k < idx.size(); ++k) text += (k ? " " : "") + fill[idx[k]];
    w.prefixes.push_back(std::move(text));

    std::ostringstream id;
    id << 's' << std::setw(4) << std::setfill('0') << c;
    w.context_ids.push_back(id.str());

    Rng rng(derive_seed(seed, "dirichlet", c));
    std::vector<double> logs(vocab_size);
    for (auto& l : logs) l = log_gamma_variate(rng, alpha);
    const double mx = *std::max_element(logs.begin(), logs.end());
    std::map<std::string, double> weights;
    for (std::size_t v = 0; v < vocab_size; ++v) weights[w.words[v]] = std::exp(logs[v] - mx);
    w.truth.push_back(Cpd::from_weights(weights));
  }
  return w;
}

namespace detail {
inline std::string draw_word(const Cpd& p, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  const std::string* last = nullptr;
  for (const auto& [w, x] : p.probs()) {
    cum += x;
    last = &w;
    if (u < cum) return w;
  }
  return *last;
}
}  // namespace detail

// M i.i.d. draws from a context's true distribution.
inline AnnotationMultiset sample_annotations(const SyntheticWorld& world, std::size_t context,
                                             std::size_t m, std::uint64_t seed) {
  if (m < 1) throw Error("need at least one annotation");
  if (context >= world.num_contexts()) throw Error("context index out of range");
  Rng rng(derive_seed(seed, "annotations", context));
  AnnotationMultiset out;
  for (std::size_t i = 0; i < m; ++i) out.add(detail::draw_word(world.truth[context], rng));
  return out;
}

inline constexpr std::size_t kPassageBlock = 5;

// One item per context; the corpus word is one further draw from the truth.
inline ClozeDataset to_cloze_dataset(const SyntheticWorld& world, std::size_t m_per_context,
                                     std::uint64_t seed) {
  ClozeDataset ds;
  for (std::size_t c = 0; c < world.num_contexts(); ++c) {
    ClozeItem item;
    item.id = world.context_ids[c];
    std::ostringstream pid;
    pid << 'p' << std::setw(3) << std::setfill('0') << c / kPassageBlock;
    item.passage_id = pid.str();
    item.context = world.prefixes[c];
    Rng rng(derive_seed(seed, "corpus_word", c));
    item.corpus_word = detail::draw_word(world.truth[c], rng);
    item.annotations = sample_annotations(world, c, m_per_context, seed);
    ds.items.push_back(std::move(item));
  }
  return ds;
}

// Sidecar truth file: {context_id: {word: prob}}.
inline nlohmann::ordered_json truth_json(const SyntheticWorld& world) {
  nlohmann::ordered_json j;
  for (std::size_t c = 0; c < world.num_contexts(); ++c) {
    nlohmann::ordered_json p;
    for (const auto& [w, x] : world.truth[c].probs()) p[w] = x;
    j[world.context_ids[c]] = p;
  }
  return j;
}

inline std::map<std::string, Cpd> read_truth_json(const nlohmann::json& j) {
  std::map<std::string, Cpd> out;
  try {
    for (const auto& [id, p] : j.items()) out[id] = Cpd::from_weights(p.get<std::map<std::string, double>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed truth file: ") + e.what());
  }
  return out;
}

inline std::map<std::string, Cpd> load_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open truth file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed truth file '" + path + "': " + e.what());
  }
  return read_truth_json(j);
}

}  // namespace lmvar
