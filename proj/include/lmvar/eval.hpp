#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvar/corpus.hpp"
#include "lmvar/error.hpp"
#include "lmvar/losses.hpp"
#include "lmvar/rng.hpp"
#include "lmvar/tokenizer.hpp"
#include "lmvar/wordprob.hpp"

namespace lmvar {

// Total variation distance over the union of supports.
inline double tvd(const Cpd& p, const Cpd& q) {
  auto a = p.probs().begin(), ae = p.probs().end();
  auto b = q.probs().begin(), be = q.probs().end();
  double s = 0.0;
  while (a != ae || b != be) {
    if (b == be || (a != ae && a->first < b->first)) {
      s += a->second;
      ++a;
    } else if (a == ae || b->first < a->first) {
      s += b->second;
      ++b;
    } else {
      s += std::abs(a->second - b->second);
      ++a;
      ++b;
    }
  }
  return std::clamp(0.5 * s, 0.0, 1.0);
}

// Shannon entropy in nats.
inline double entropy(const Cpd& p) {
  double h = 0.0;
  for (const auto& [_, x] : p.probs()) h -= x * std::log(x);
  return std::max(h, 0.0);
}

inline double unique_word_coverage(const AnnotationMultiset& human,
                                   const std::set<std::string>& model_words) {
  if (human.empty()) throw Error("coverage needs at least one human annotation");
  std::size_t hit = 0;
  for (const auto& [w, _] : human.counts()) hit += model_words.count(w);
  return static_cast<double>(hit) / static_cast<double>(human.support_size());
}

inline double oracle_tvd(const AnnotationMultiset& w, std::uint64_t seed) {
  const auto [a, b] = oracle_split(w, seed);
  return tvd(empirical_cpd(a), empirical_cpd(b));
}

template <NextTokenModel M>
WordEstimate mc_estimate_model_cpd(const M& model, std::span<const TokenId> context, std::size_t n,
                                   std::uint64_t seed, const MergeTable& table,
                                   SamplingOptions opt = {}) {
  Rng rng(derive_seed(seed, "mc_estimate"));
  return sample_words(model, context, n, rng, table, opt);
}

template <NextTokenModel M>
double hit_rate(const M& model, std::span<const TokenId> context, std::string_view target_word,
                std::size_t n, std::uint64_t seed, const MergeTable& table, SamplingOptions opt = {}) {
  Rng rng(derive_seed(seed, "hit_rate"));
  const auto est = sample_words(model, context, n, rng, table, opt);
  const std::string target = normalize_word(target_word);
  std::size_t hits = 0;
  for (const auto& w : est.words) hits += (w == target);
  return static_cast<double>(hits) / static_cast<double>(n);
}

struct ContextMetrics {
  std::string context_id;
  double tvd_model_human = 0.0;
  std::optional<double> tvd_oracle;  // empty when M < 2
  double model_entropy = 0.0;
  double human_entropy = 0.0;
  double unique_word_coverage = 0.0;
  std::size_t n_model_samples = 0;
  std::size_t truncation_count = 0;
};

struct MetricSummary {
  double mean = 0.0;
  double sd = 0.0;  // sample SD across seeds; 0 for a single seed
  std::size_t n_seeds = 0;
};

struct EvalConfig {
  std::size_t n_samples = 40;
  std::vector<std::uint64_t> seeds{42, 123, 456};
  SamplingOptions sampling;
  // Wrap contexts in this prompt before conditioning (instruction-tuned models).
  std::optional<PromptTemplate> prompt;
  // Replaces the empirical human CPD as the comparison target, keyed by
  // context id (used with synthetic ground truth).
  const std::map<std::string, Cpd>* reference = nullptr;
};

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::size_t n_samples = 0;
  std::vector<std::vector<ContextMetrics>> rows;  // rows[seed_index][context]
  std::map<std::string, MetricSummary> aggregates;

  // Metric names in CSV/summary order.
  static const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"tvd_model_human", "tvd_oracle", "model_entropy",
                                                "human_entropy", "unique_word_coverage"};
    return names;
  }
};

namespace detail {

inline std::optional<double> metric_value(const ContextMetrics& m, const std::string& name) {
  if (name == "tvd_model_human") return m.tvd_model_human;
  if (name == "tvd_oracle") return m.tvd_oracle;
  if (name == "model_entropy") return m.model_entropy;
  if (name == "human_entropy") return m.human_entropy;
  if (name == "unique_word_coverage") return m.unique_word_coverage;
  throw Error("unknown metric '" + name + "'");
}

inline MetricSummary summarize(const std::vector<double>& per_seed) {
  MetricSummary s;
  s.n_seeds = per_seed.size();
  if (per_seed.empty()) {
    s.mean = s.sd = std::nan("");
    return s;
  }
  double sum = 0.0;
  for (double x : per_seed) sum += x;
  s.mean = sum / static_cast<double>(per_seed.size());
  if (per_seed.size() > 1) {
    double ss = 0.0;
    for (double x : per_seed) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(per_seed.size() - 1));
  }
  return s;
}

}  // namespace detail

// Per-seed means over contexts, then mean and SD of those across seeds.
inline void compute_aggregates(EvalReport& report) {
  report.aggregates.clear();
  for (const auto& name : EvalReport::metric_names()) {
    std::vector<double> per_seed;
    for (const auto& rows : report.rows) {
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& r : rows) {
        if (auto v = detail::metric_value(r, name)) {
          s += *v;
          ++n;
        }
      }
      if (n > 0) per_seed.push_back(s / static_cast<double>(n));
    }
    report.aggregates[name] = detail::summarize(per_seed);
  }
}

template <NextTokenModel M>
ContextMetrics evaluate_context(const M& model, const ClozeItem& item, std::uint64_t seed,
                                const MergeTable& table, const EvalConfig& cfg) {
  const std::string text = cfg.prompt ? cfg.prompt->render(item.context) : item.context;
  const TokenSeq ctx = table.encode(text);
  // Streams hang off the context id, so results do not depend on item order.
  const std::uint64_t key = fnv1a64(item.id);
  const auto est = mc_estimate_model_cpd(model, ctx, cfg.n_samples, derive_seed(seed, "sample", key),
                                         table, cfg.sampling);
  Cpd human;
  if (cfg.reference) {
    auto it = cfg.reference->find(item.id);
    if (it == cfg.reference->end()) throw Error("no reference distribution for context '" + item.id + "'");
    human = it->second;
  } else {
    human = empirical_cpd(item.annotations);
  }
  ContextMetrics m;
  m.context_id = item.id;
  m.tvd_model_human = tvd(est.cpd, human);
  if (item.annotations.total() >= 2) m.tvd_oracle = oracle_tvd(item.annotations, derive_seed(seed, "oracle", key));
  m.model_entropy = entropy(est.cpd);
  m.human_entropy = entropy(human);
  std::set<std::string> model_words(est.words.begin(), est.words.end());
  m.unique_word_coverage = unique_word_coverage(item.annotations, model_words);
  m.n_model_samples = cfg.n_samples;
  m.truncation_count = est.truncations;
  return m;
}

template <NextTokenModel M>
EvalReport evaluate(const M& model, const ClozeDataset& testset, const MergeTable& table,
                    const EvalConfig& cfg = {}) {
  if (testset.empty()) throw Error("test set is empty");
  if (cfg.seeds.empty()) throw Error("at least one evaluation seed is required");
  EvalReport report;
  report.seeds = cfg.seeds;
  report.n_samples = cfg.n_samples;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<ContextMetrics> rows;
    rows.reserve(testset.size());
    for (const auto& item : testset.items) rows.push_back(evaluate_context(model, item, seed, table, cfg));
    report.rows.push_back(std::move(rows));
  }
  compute_aggregates(report);
  return report;
}

// Evaluation of one model per seed (e.g. one training run per seed): the
// i-th model is evaluated with the i-th seed.
template <NextTokenModel M>
EvalReport evaluate_runs(const std::vector<const M*>& models, const ClozeDataset& testset,
                         const MergeTable& table, const EvalConfig& cfg) {
  if (models.size() != cfg.seeds.size()) throw Error("need one model per evaluation seed");
  EvalReport report;
  report.seeds = cfg.seeds;
  report.n_samples = cfg.n_samples;
  for (std::size_t s = 0; s < models.size(); ++s) {
    EvalConfig one = cfg;
    one.seeds = {cfg.seeds[s]};
    auto r = evaluate(*models[s], testset, table, one);
    report.rows.push_back(std::move(r.rows.front()));
  }
  compute_aggregates(report);
  return report;
}

namespace detail {

inline std::string fmt(double x) {
  if (std::isnan(x)) return "NA";
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

// Per-context mean across seeds.
inline std::map<std::string, std::pair<double, std::optional<double>>> per_context_means(const EvalReport& r) {
  std::map<std::string, std::pair<double, std::size_t>> tv;
  std::map<std::string, std::pair<double, std::size_t>> orc;
  for (const auto& rows : r.rows) {
    for (const auto& m : rows) {
      auto& t = tv[m.context_id];
      t.first += m.tvd_model_human;
      ++t.second;
      if (m.tvd_oracle) {
        auto& o = orc[m.context_id];
        o.first += *m.tvd_oracle;
        ++o.second;
      }
    }
  }
  std::map<std::string, std::pair<double, std::optional<double>>> out;
  for (const auto& [id, t] : tv) {
    std::optional<double> o;
    if (auto it = orc.find(id); it != orc.end()) o = it->second.first / static_cast<double>(it->second.second);
    out[id] = {t.first / static_cast<double>(t.second), o};
  }
  return out;
}

}  // namespace detail

struct DeltaRow {
  std::string context_id;
  double tvd_delta;  // after - before
  std::optional<double> tvd_oracle;
};

// Context order follows the first seed of `after`.
inline std::vector<DeltaRow> report_compare(const EvalReport& before, const EvalReport& after) {
  const auto b = detail::per_context_means(before);
  const auto a = detail::per_context_means(after);
  if (a.size() != b.size()) throw Error("reports cover different contexts");
  for (const auto& [id, _] : a) {
    if (!b.count(id)) throw Error("context '" + id + "' missing from the baseline report");
  }
  std::vector<DeltaRow> out;
  if (after.rows.empty()) return out;
  for (const auto& m : after.rows.front()) {
    const auto& av = a.at(m.context_id);
    out.push_back({m.context_id, av.first - b.at(m.context_id).first, av.second});
  }
  return out;
}

inline void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "seed,context_id,tvd_model_human,tvd_oracle,model_entropy,human_entropy,"
         "unique_word_coverage,n_model_samples,truncation_count\n";
  for (std::size_t s = 0; s < r.rows.size(); ++s) {
    for (const auto& m : r.rows[s]) {
      out << r.seeds[s] << ',' << m.context_id << ',' << detail::fmt(m.tvd_model_human) << ','
          << (m.tvd_oracle ? detail::fmt(*m.tvd_oracle) : "NA") << ',' << detail::fmt(m.model_entropy)
          << ',' << detail::fmt(m.human_entropy) << ',' << detail::fmt(m.unique_word_coverage) << ','
          << m.n_model_samples << ',' << m.truncation_count << '\n';
    }
  }
}

inline nlohmann::ordered_json summary_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  for (const auto& name : EvalReport::metric_names()) {
    const auto& s = r.aggregates.at(name);
    nlohmann::ordered_json e;
    e["mean"] = s.mean;
    e["sd"] = s.sd;
    e["n_seeds"] = s.n_seeds;
    j[name] = e;
  }
  return j;
}

inline void write_delta_csv(std::ostream& out, const std::vector<DeltaRow>& rows) {
  out << "context_id,tvd_delta,tvd_oracle\n";
  for (const auto& r : rows) {
    out << r.context_id << ',' << detail::fmt(r.tvd_delta) << ','
        << (r.tvd_oracle ? detail::fmt(*r.tvd_oracle) : "NA") << '\n';
  }
}

inline EvalReport read_report_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error("empty report");
  EvalReport r;
  std::map<std::uint64_t, std::size_t> seed_index;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw Error("report line " + std::to_string(line_no) + ": expected 9 fields");
    try {
      const std::uint64_t seed = std::stoull(f[0]);
      auto [it, fresh] = seed_index.emplace(seed, r.seeds.size());
      if (fresh) {
        r.seeds.push_back(seed);
        r.rows.emplace_back();
      }
      ContextMetrics m;
      m.context_id = f[1];
      m.tvd_model_human = std::stod(f[2]);
      if (f[3] != "NA") m.tvd_oracle = std::stod(f[3]);
      m.model_entropy = std::stod(f[4]);
      m.human_entropy = std::stod(f[5]);
      m.unique_word_coverage = std::stod(f[6]);
      m.n_model_samples = std::stoull(f[7]);
      m.truncation_count = std::stoull(f[8]);
      r.n_samples = m.n_model_samples;
      r.rows[it->second].push_back(std::move(m));
    } catch (const std::logic_error&) {
      throw Error("report line " + std::to_string(line_no) + ": bad number");
    }
  }
  compute_aggregates(r);
  return r;
}

}  // namespace lmvar
