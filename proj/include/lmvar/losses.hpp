#pragma once

// Training objectives over whole words and the loop that applies them.
//
//   label loss:     -log q(w* | c)
//   variation loss: -sum_w p_hat(w | c) log q(w | c),  w over the support of p_hat
//
// with q(w | c) the chain product over the word's tokens.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lmvar/corpus.hpp"
#include "lmvar/error.hpp"
#include "lmvar/lm.hpp"
#include "lmvar/rng.hpp"
#include "lmvar/tokenizer.hpp"
#include "lmvar/wordprob.hpp"

namespace lmvar {

namespace detail {

template <NextTokenModel M>
double neg_log_chain(const M& model, std::span<const TokenId> context, std::span<const TokenId> tokens) {
  TokenSeq seq(context.begin(), context.end());
  double nll = 0.0;
  for (TokenId t : tokens) {
    const auto& dist = model.next_token_dist(seq);
    if (t >= dist.size()) throw Error("token id " + std::to_string(t) + " out of range");
    if (!(dist[t] > 0.0)) throw Error("zero-probability target");
    nll -= std::log(dist[t]);
    seq.push_back(t);
  }
  return nll;
}

}  // namespace detail

template <NextTokenModel M>
double loss_label(const M& model, std::span<const TokenId> context, std::string_view target_word,
                  const MergeTable& table) {
  return detail::neg_log_chain(model, context, table.tokenize_word(target_word));
}

template <NextTokenModel M>
double loss_var(const M& model, std::span<const TokenId> context, const Cpd& p_hat,
                const MergeTable& table) {
  if (p_hat.empty()) throw Error("loss_var needs a non-empty target distribution");
  double loss = 0.0;
  for (const auto& [w, p] : p_hat.probs()) {
    loss += p * detail::neg_log_chain(model, context, table.tokenize_word(w));
  }
  return loss;
}

// A context together with weighted target words (already tokenized).
// Its loss is sum_i weight_i * -log q(word_i | context).
struct TrainingExample {
  TokenSeq context;
  std::vector<std::pair<TokenSeq, double>> targets;
  std::size_t group = 0;  // source item; pairs of one prompt share a group
};

// Tokens whose surface text starts with a word boundary (a space, other
// whitespace or sentence punctuation): emitting one closes the current word.
inline std::vector<char> word_closing_tokens(const MergeTable& table) {
  std::vector<char> mask(table.vocab_size(), 0);
  for (TokenId t = 0; t < table.vocab_size(); ++t) {
    const std::string s = table.token_surface(t);
    mask[t] = !s.empty() && detail::is_word_boundary(s.front());
  }
  return mask;
}

struct BatchLoss {
  double label = 0.0;     // sum of example losses (label / variation objective)
  double word_end = 0.0;  // sum of weighted word-end terms
};

// Loss of a set of examples with scale times its gradient added into grad.
// Targets sharing a conditioning prefix, within an example or across
// examples, are folded into one soft-target cross-entropy per prefix; this is
// exact because every factor of a word's chain product is a token-level
// softmax term.
//
// With word_end_weight > 0 each target word also contributes
//   -weight * word_end_weight * log P(next token closes the word | context, tau(w)).
// A model trained from scratch has never seen what follows a word, and
// without this term ancestral sampling runs on past the word's last token.
// When end_rng is given, end_samples word ends are drawn in proportion to
// their weights (each carrying total_weight / end_samples) instead of
// visiting all of them; the gradient stays unbiased.
inline BatchLoss examples_loss_and_grad(const TinyLm& model,
                                        std::span<const TrainingExample* const> examples,
                                        std::span<double> grad, double scale = 1.0,
                                        double word_end_weight = 0.0,
                                        std::span<const char> closing = {},
                                        Rng* end_rng = nullptr, std::size_t end_samples = 0) {
  const std::size_t V = model.vocab_size();
  const bool word_end = word_end_weight > 0.0;
  if (word_end && closing.size() != V) throw Error("closing-token mask does not match vocabulary");
  std::map<TokenSeq, std::vector<double>> soft_targets;
  std::map<TokenSeq, double> ends;
  for (const TrainingExample* ex : examples) {
    for (const auto& [tokens, weight] : ex->targets) {
      TokenSeq prefix = ex->context;
      for (TokenId t : tokens) {
        if (t >= V) throw Error("target token out of range");
        auto& tgt = soft_targets[prefix];
        if (tgt.empty()) tgt.assign(V, 0.0);
        tgt[t] += weight;
        prefix.push_back(t);
      }
      if (word_end) ends[prefix] += weight * word_end_weight;
    }
  }
  if (word_end && end_rng != nullptr && end_samples > 0 && ends.size() > end_samples) {
    std::vector<std::pair<const TokenSeq*, double>> cdf;
    double total = 0.0;
    for (const auto& [prefix, w] : ends) {
      total += w;
      cdf.emplace_back(&prefix, total);
    }
    std::map<TokenSeq, double> drawn;
    for (std::size_t k = 0; k < end_samples; ++k) {
      const double u = uniform01(*end_rng) * total;
      auto it = std::upper_bound(cdf.begin(), cdf.end(), u,
                                 [](double x, const auto& e) { return x < e.second; });
      if (it == cdf.end()) --it;
      drawn[*it->first] += total / static_cast<double>(end_samples);
    }
    ends = std::move(drawn);
  }

  BatchLoss loss;
  static const std::vector<double> kNoTarget;
  auto s = soft_targets.begin();
  auto e = ends.begin();
  // Merge-walk both prefix maps so each prefix gets exactly one pass.
  while (s != soft_targets.end() || e != ends.end()) {
    if (e == ends.end() || (s != soft_targets.end() && s->first < e->first)) {
      loss.label += model.accumulate_ce_grad(s->first, s->second, grad, scale);
      ++s;
    } else if (s == soft_targets.end() || e->first < s->first) {
      loss.word_end += model.accumulate_ce_and_closing_grad(e->first, kNoTarget, e->second, closing, grad, scale).second;
      ++e;
    } else {
      auto [ce, end] = model.accumulate_ce_and_closing_grad(s->first, s->second, e->second, closing, grad, scale);
      loss.label += ce;
      loss.word_end += end;
      ++s;
      ++e;
    }
  }
  return loss;
}

inline double example_loss_and_grad(const TinyLm& model, const TrainingExample& ex,
                                    std::span<double> grad, double scale = 1.0) {
  const TrainingExample* one[] = {&ex};
  return examples_loss_and_grad(model, one, grad, scale).label;
}

inline double example_loss(const TinyLm& model, const TrainingExample& ex) {
  double loss = 0.0;
  for (const auto& [tokens, weight] : ex.targets) {
    TokenSeq prefix = ex.context;
    for (TokenId t : tokens) {
      loss -= weight * model.log_probs(prefix)[t];
      prefix.push_back(t);
    }
  }
  return loss;
}

inline std::vector<double> loss_var_grad(const TinyLm& model, std::span<const TokenId> context,
                                         const Cpd& p_hat, const MergeTable& table) {
  TrainingExample ex{TokenSeq(context.begin(), context.end()), {}, 0};
  for (const auto& [w, p] : p_hat.probs()) ex.targets.emplace_back(table.tokenize_word(w), p);
  std::vector<double> g(model.num_params(), 0.0);
  example_loss_and_grad(model, ex, g);
  return g;
}

inline std::vector<double> loss_label_grad(const TinyLm& model, std::span<const TokenId> context,
                                           std::string_view word, const MergeTable& table) {
  TrainingExample ex{TokenSeq(context.begin(), context.end()), {{table.tokenize_word(word), 1.0}}, 0};
  std::vector<double> g(model.num_params(), 0.0);
  example_loss_and_grad(model, ex, g);
  return g;
}

enum class LossMode { orig_corpus, majority_label, multi_label, instruction_augmented };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::orig_corpus: return "orig_corpus";
    case LossMode::majority_label: return "majority_label";
    case LossMode::multi_label: return "multi_label";
    case LossMode::instruction_augmented: return "instruction_augmented";
  }
  return "?";
}

inline LossMode parse_loss_mode(std::string_view s) {
  if (s == "orig_corpus") return LossMode::orig_corpus;
  if (s == "majority_label") return LossMode::majority_label;
  if (s == "multi_label") return LossMode::multi_label;
  if (s == "instruction_augmented") return LossMode::instruction_augmented;
  throw Error("unknown loss mode '" + std::string(s) + "'");
}

struct TrainConfig {
  LossMode mode = LossMode::multi_label;
  std::size_t epochs = 150;
  double learning_rate = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 42;
  std::optional<std::size_t> label_subsample;
  double temperature = 1.0;  // used when sampling for evaluation
  // instruction_augmented only: batch whole prompts (all of a context's pairs
  // together, batch_size counted in contexts) instead of independent pairs.
  bool group_pairs = false;
  // Weight of the word-end term (see examples_loss_and_grad); 0 trains the
  // pure label / variation objectives.
  double word_end_weight = 1.0;
  // Word ends sampled per batch unit; 0 visits every word end.
  std::size_t word_end_samples = 1;
  PromptTemplate prompt;
  TinyLmConfig model;

  void validate() const {
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("learning rate must be > 0");
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (label_subsample && *label_subsample < 1) throw Error("label subsample k must be >= 1");
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
    if (!(word_end_weight >= 0.0)) throw Error("word-end weight must be >= 0");
  }
};

// Conditioning text for an item under a mode: the rendered prompt for
// instruction-tuned training, the raw prefix otherwise.
inline std::string conditioning_text(const ClozeItem& item, LossMode mode, const PromptTemplate& tmpl) {
  return mode == LossMode::instruction_augmented ? tmpl.render(item.context) : item.context;
}

// Annotations after optional subsampling; the stream depends only on the
// training seed and the context id.
inline AnnotationMultiset training_annotations(const ClozeItem& item, const TrainConfig& cfg) {
  if (!cfg.label_subsample) return item.annotations;
  return subsample_labels(item.annotations, *cfg.label_subsample,
                          derive_seed(cfg.seed, "labels", fnv1a64(item.id)));
}

inline std::vector<TrainingExample> build_examples(const ClozeDataset& ds, const TrainConfig& cfg,
                                                   const MergeTable& table) {
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < ds.items.size(); ++i) {
    const auto& item = ds.items[i];
    const TokenSeq ctx = table.encode(conditioning_text(item, cfg.mode, cfg.prompt));
    switch (cfg.mode) {
      case LossMode::orig_corpus:
        out.push_back({ctx, {{table.tokenize_word(item.corpus_word), 1.0}}, i});
        break;
      case LossMode::majority_label:
        out.push_back({ctx, {{table.tokenize_word(majority_label(training_annotations(item, cfg))), 1.0}}, i});
        break;
      case LossMode::multi_label: {
        TrainingExample ex{ctx, {}, i};
        const Cpd p_hat = empirical_cpd(training_annotations(item, cfg));
        for (const auto& [w, p] : p_hat.probs()) {
          ex.targets.emplace_back(table.tokenize_word(w), p);
        }
        out.push_back(std::move(ex));
        break;
      }
      case LossMode::instruction_augmented:
        for (const auto& w : training_annotations(item, cfg).expand()) {
          out.push_back({ctx, {{table.tokenize_word(w), 1.0}}, i});
        }
        break;
    }
  }
  return out;
}

struct TrainLogRow {
  std::size_t epoch;
  std::string split;  // "train" or "val"
  double mean_loss;   // NaN when the split is empty
  double wallclock_seconds;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
};

inline double mean_example_loss(const TinyLm& model, const std::vector<TrainingExample>& examples) {
  if (examples.empty()) return std::nan("");
  double s = 0.0;
  for (const auto& ex : examples) s += example_loss(model, ex);
  return s / static_cast<double>(examples.size());
}

// Mini-batch Adam over shuffled examples; the batch loss is the mean of
// per-example losses. Validation loss uses the training mode.
inline TrainLog train(TinyLm& model, const ClozeDataset& train_set, const ClozeDataset& val_set,
                      const TrainConfig& cfg, const MergeTable& table) {
  cfg.validate();
  if (train_set.empty()) throw Error("training set is empty");
  if (model.vocab_size() != table.vocab_size()) throw Error("model and tokenizer vocab sizes differ");

  const auto examples = build_examples(train_set, cfg, table);
  const auto val_examples = build_examples(val_set, cfg, table);

  // Units shuffled each epoch: single examples, or whole prompt groups.
  std::vector<std::vector<std::size_t>> units;
  if (cfg.mode == LossMode::instruction_augmented && cfg.group_pairs) {
    std::map<std::size_t, std::vector<std::size_t>> by_group;
    for (std::size_t i = 0; i < examples.size(); ++i) by_group[examples[i].group].push_back(i);
    for (auto& [_, idx] : by_group) units.push_back(std::move(idx));
  } else {
    for (std::size_t i = 0; i < examples.size(); ++i) units.push_back({i});
  }

  const auto closing = word_closing_tokens(table);
  AdamState adam(model.num_params(), cfg.learning_rate);
  std::vector<double> grad(model.num_params());
  TrainLog log;
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(units.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, "shuffle", epoch));
    shuffle(order, rng);

    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size, ++batch_index) {
      std::vector<const TrainingExample*> batch;
      for (std::size_t u = b; u < std::min(order.size(), b + cfg.batch_size); ++u) {
        for (std::size_t i : units[order[u]]) batch.push_back(&examples[i]);
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      const double scale = 1.0 / static_cast<double>(batch.size());
      Rng end_rng(derive_seed(cfg.seed, "word_end", epoch * 1000003ULL + batch_index));
      const std::size_t units_in_batch = std::min(order.size(), b + cfg.batch_size) - b;
      const BatchLoss bl = examples_loss_and_grad(model, batch, grad, scale, cfg.word_end_weight, closing,
                                                  &end_rng, units_in_batch * cfg.word_end_samples);
      const double batch_loss = bl.label;
      if (!std::isfinite(batch_loss) || !std::isfinite(bl.word_end)) {
        throw Error("diverged: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(batch_index));
      }
      try {
        adam_step(model.params(), adam, grad);
      } catch (const Error& e) {
        throw Error(std::string(e.what()) + " at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(batch_index));
      }
      epoch_loss += batch_loss;
    }
    log.rows.push_back({epoch, "train", epoch_loss / static_cast<double>(examples.size()), elapsed()});
    log.rows.push_back({epoch, "val", mean_example_loss(model, val_examples), elapsed()});
  }
  return log;
}

}  // namespace lmvar
