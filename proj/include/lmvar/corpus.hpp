#pragma once

// Multi-reference cloze data: human annotations per context, the empirical
// distributions built from them, and the training/evaluation variants
// (majority label, label subsampling, paragraph splits, oracle halves,
// prompt-replicated instruction pairs).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvar/error.hpp"
#include "lmvar/rng.hpp"

namespace lmvar {

// Lowercase, trim whitespace, drop trailing .,;:!?"' characters.
inline std::string normalize_word(std::string_view raw) {
  auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  std::size_t b = 0, e = raw.size();
  while (b < e && is_ws(raw[b])) ++b;
  while (e > b && is_ws(raw[e - 1])) --e;
  static constexpr std::string_view kTrailing = ".,;:!?\"'";
  while (e > b && kTrailing.find(raw[e - 1]) != std::string_view::npos) --e;
  while (e > b && is_ws(raw[e - 1])) --e;
  std::string out(raw.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// A context's human next-word references as word -> count.
class AnnotationMultiset {
 public:
  AnnotationMultiset() = default;

  template <class Range>
  static AnnotationMultiset from_words(const Range& words) {
    AnnotationMultiset w;
    for (const auto& word : words) w.add(word);
    return w;
  }

  void add(const std::string& word, std::size_t count = 1) {
    if (word.empty()) throw Error("annotation words must be non-empty");
    if (count == 0) return;
    counts_[word] += count;
    total_ += count;
  }

  std::size_t total() const { return total_; }
  std::size_t count(const std::string& word) const {
    auto it = counts_.find(word);
    return it == counts_.end() ? 0 : it->second;
  }
  const std::map<std::string, std::size_t>& counts() const { return counts_; }
  std::size_t support_size() const { return counts_.size(); }
  bool empty() const { return total_ == 0; }

  // One entry per annotation instance, words in lexicographic order.
  std::vector<std::string> expand() const {
    std::vector<std::string> out;
    out.reserve(total_);
    for (const auto& [w, n] : counts_) out.insert(out.end(), n, w);
    return out;
  }

  friend bool operator==(const AnnotationMultiset& a, const AnnotationMultiset& b) {
    return a.counts_ == b.counts_;
  }

 private:
  std::map<std::string, std::size_t> counts_;
  std::size_t total_ = 0;
};

// Normalized categorical distribution over words.
class Cpd {
 public:
  Cpd() = default;

  // Normalizes non-negative weights; zero-weight words are dropped.
  static Cpd from_weights(const std::map<std::string, double>& weights) {
    double total = 0.0;
    for (const auto& [w, x] : weights) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw Error("cpd weights must be finite and >= 0");
      total += x;
    }
    if (!(total > 0.0)) throw Error("cpd needs positive total weight");
    Cpd p;
    for (const auto& [w, x] : weights) {
      if (x > 0.0) p.probs_[w] = x / total;
    }
    return p;
  }

  double prob(const std::string& word) const {
    auto it = probs_.find(word);
    return it == probs_.end() ? 0.0 : it->second;
  }
  const std::map<std::string, double>& probs() const { return probs_; }
  std::size_t support_size() const { return probs_.size(); }
  bool empty() const { return probs_.empty(); }

  friend bool operator==(const Cpd& a, const Cpd& b) { return a.probs_ == b.probs_; }

 private:
  std::map<std::string, double> probs_;
};

inline Cpd empirical_cpd(const AnnotationMultiset& w) {
  if (w.empty()) throw Error("empirical cpd of an empty annotation set");
  std::map<std::string, double> weights;
  for (const auto& [word, n] : w.counts()) weights[word] = static_cast<double>(n);
  return Cpd::from_weights(weights);
}

// Most frequent word; ties go to the lexicographically smallest.
inline std::string majority_label(const AnnotationMultiset& w) {
  if (w.empty()) throw Error("majority label of an empty annotation set");
  const std::string* best = nullptr;
  std::size_t best_n = 0;
  for (const auto& [word, n] : w.counts()) {
    if (n > best_n) {
      best = &word;
      best_n = n;
    }
  }
  return *best;
}

// Uniform sample without replacement of min(k, M) annotation instances.
inline AnnotationMultiset subsample_labels(const AnnotationMultiset& w, std::size_t k,
                                           std::uint64_t seed) {
  if (k == 0) throw Error("label subsample size must be >= 1");
  if (k >= w.total()) return w;
  auto inst = w.expand();
  Rng rng(derive_seed(seed, "subsample"));
  // Partial Fisher-Yates: the first k slots become the sample.
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(uniform_index(rng, inst.size() - i));
    std::swap(inst[i], inst[j]);
  }
  inst.resize(k);
  return AnnotationMultiset::from_words(inst);
}

// Shuffled halves of sizes ceil(M/2) and floor(M/2).
inline std::pair<AnnotationMultiset, AnnotationMultiset> oracle_split(const AnnotationMultiset& w,
                                                                      std::uint64_t seed) {
  if (w.total() < 2) throw Error("cannot split fewer than 2 annotations");
  auto inst = w.expand();
  Rng rng(derive_seed(seed, "oracle_split"));
  shuffle(inst, rng);
  const std::size_t first = (inst.size() + 1) / 2;
  AnnotationMultiset a, b;
  for (std::size_t i = 0; i < inst.size(); ++i) (i < first ? a : b).add(inst[i]);
  return {a, b};
}

struct ClozeItem {
  std::string id;  // unique within a dataset
  std::string passage_id;
  std::string context;
  std::string corpus_word;
  AnnotationMultiset annotations;
};

struct ClozeDataset {
  std::vector<ClozeItem> items;

  bool empty() const { return items.empty(); }
  std::size_t size() const { return items.size(); }

  // Passage ids in order of first appearance.
  std::vector<std::string> passage_ids() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& it : items) {
      if (seen.insert(it.passage_id).second) out.push_back(it.passage_id);
    }
    return out;
  }

  std::size_t total_annotations() const {
    std::size_t m = 0;
    for (const auto& it : items) m += it.annotations.total();
    return m;
  }
};

inline void validate_item(const ClozeItem& item) {
  if (item.passage_id.empty()) throw Error("empty passage_id");
  if (item.context.empty()) throw Error("empty context");
  if (item.corpus_word.empty()) throw Error("empty corpus_word");
  if (item.annotations.empty()) throw Error("empty annotation set");
}

// JSON Lines, one context per line:
// {"passage_id": "p01", "context": "...", "corpus_word": "the", "annotations": ["are", ...]}
// An optional "id" field names the context; otherwise "<passage_id>#<n>" is used.
inline ClozeDataset read_cloze_dataset(std::istream& in) {
  ClozeDataset ds;
  std::map<std::string, std::size_t> per_passage;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    ClozeItem item;
    try {
      const auto j = nlohmann::json::parse(line);
      item.passage_id = j.at("passage_id").get<std::string>();
      item.context = j.at("context").get<std::string>();
      item.corpus_word = normalize_word(j.at("corpus_word").get<std::string>());
      for (const auto& a : j.at("annotations")) {
        std::string w = normalize_word(a.get<std::string>());
        if (!w.empty()) item.annotations.add(w);
      }
      std::size_t n = per_passage[item.passage_id]++;
      item.id = j.contains("id") ? j["id"].get<std::string>()
                                 : item.passage_id + "#" + std::to_string(n);
    } catch (const nlohmann::json::exception& e) {
      throw Error(where + "malformed record: " + e.what());
    }
    try {
      validate_item(item);
    } catch (const Error& e) {
      throw Error(where + e.what());
    }
    if (!ids.insert(item.id).second) throw Error(where + "duplicate context id '" + item.id + "'");
    ds.items.push_back(std::move(item));
  }
  return ds;
}

inline ClozeDataset load_cloze_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  return read_cloze_dataset(in);
}

inline void write_cloze_dataset(std::ostream& out, const ClozeDataset& ds) {
  for (const auto& it : ds.items) {
    nlohmann::ordered_json j;
    j["id"] = it.id;
    j["passage_id"] = it.passage_id;
    j["context"] = it.context;
    j["corpus_word"] = it.corpus_word;
    j["annotations"] = it.annotations.expand();
    out << j.dump() << '\n';
  }
}

inline void save_cloze_dataset(const std::string& path, const ClozeDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  write_cloze_dataset(out, ds);
}

struct DatasetSplit {
  ClozeDataset train, val, test;
};

namespace detail {
inline std::size_t round_half_up(double x) {
  return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9));
}
}  // namespace detail

// Passage-level split. round(train_frac * P) passages go to training, of
// which round(val_frac_of_train * n_train) are held out for validation.
inline DatasetSplit split_by_paragraph(const ClozeDataset& ds, double train_frac,
                                       double val_frac_of_train, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0) || !(val_frac_of_train > 0.0 && val_frac_of_train < 1.0)) {
    throw Error("split fractions must lie in (0, 1)");
  }
  auto passages = ds.passage_ids();
  if (passages.size() < 3) throw Error("too few passages to split (need >= 3)");
  std::sort(passages.begin(), passages.end());
  Rng rng(derive_seed(seed, "split"));
  shuffle(passages, rng);

  const std::size_t n_train = detail::round_half_up(train_frac * static_cast<double>(passages.size()));
  const std::size_t n_val = detail::round_half_up(val_frac_of_train * static_cast<double>(n_train));
  std::map<std::string, int> where;
  for (std::size_t i = 0; i < passages.size(); ++i) {
    where[passages[i]] = i < n_val ? 1 : (i < n_train ? 0 : 2);
  }
  DatasetSplit out;
  for (const auto& it : ds.items) {
    switch (where[it.passage_id]) {
      case 0: out.train.items.push_back(it); break;
      case 1: out.val.items.push_back(it); break;
      default: out.test.items.push_back(it); break;
    }
  }
  return out;
}

class PromptTemplate {
 public:
  static constexpr std::string_view kPlaceholder = "<CONTEXT>";
  static constexpr std::string_view kDefaultText =
      "Instruction: Return one plausible next word for the following context. "
      "Context: <CONTEXT> Continuation:";

  PromptTemplate() : PromptTemplate(std::string(kDefaultText)) {}
  explicit PromptTemplate(std::string text) : text_(std::move(text)) {
    const auto first = text_.find(kPlaceholder);
    if (first == std::string::npos) throw Error("prompt template has no <CONTEXT> placeholder");
    if (text_.find(kPlaceholder, first + 1) != std::string::npos) {
      throw Error("prompt template has more than one <CONTEXT> placeholder");
    }
  }

  std::string render(std::string_view context) const {
    std::string out = text_;
    out.replace(out.find(kPlaceholder), kPlaceholder.size(), context);
    return out;
  }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

struct InstructionPair {
  std::string prompt;
  std::string response;
  std::size_t item_index;
};

// One (prompt, response) pair per annotation instance; items in dataset
// order, responses in lexicographic order within an item.
inline std::vector<InstructionPair> augment_instruction_pairs(const ClozeDataset& ds,
                                                              const PromptTemplate& tmpl) {
  std::vector<InstructionPair> out;
  out.reserve(ds.total_annotations());
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const std::string prompt = tmpl.render(ds.items[i].context);
    for (auto& w : ds.items[i].annotations.expand()) out.push_back({prompt, std::move(w), i});
  }
  return out;
}

// Text the tokenizer is trained on: every item's rendered prompt followed by
// its corpus word, plus each annotation word in mid-sentence form, so that
// contexts, prompts and all target words are encodable.
inline std::string tokenizer_training_text(const ClozeDataset& ds, const PromptTemplate& tmpl) {
  std::string text;
  for (const auto& it : ds.items) {
    text += tmpl.render(it.context);
    text += ' ';
    text += it.corpus_word;
    text += '\n';
    for (const auto& [w, n] : it.annotations.counts()) {
      for (std::size_t r = 0; r < n; ++r) {
        text += ' ';
        text += w;
      }
    }
    text += '\n';
  }
  return text;
}

}  // namespace lmvar
