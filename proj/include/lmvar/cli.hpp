#pragma once

// Batch command-line front end:
//
//   lmvar prepare | train | eval | ablate | probe-qa | synth | report
//
// Every command writes its outputs into --out and finishes by writing
// manifest.json (the only file carrying timestamps). `--config FILE` reads
// flat `key=value` lines (keys are long flag names); flags on the command
// line override the file.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lmvar/corpus.hpp"
#include "lmvar/error.hpp"
#include "lmvar/eval.hpp"
#include "lmvar/lm.hpp"
#include "lmvar/losses.hpp"
#include "lmvar/synth.hpp"
#include "lmvar/tokenizer.hpp"

namespace lmvar::cli {

inline constexpr std::string_view kVersion = "lmvar 0.1.0";

namespace fs = std::filesystem;

// Files of one command run; written via temp file + rename, then listed in
// the manifest.
class OutputDir {
 public:
  explicit OutputDir(const std::string& dir) : dir_(dir) { fs::create_directories(dir_); }

  void write(const std::string& name, const std::string& content) {
    const fs::path final_path = dir_ / name;
    const fs::path tmp = dir_ / (name + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error("cannot write '" + final_path.string() + "'");
      out << content;
      if (!out) throw Error("failed writing '" + final_path.string() + "'");
    }
    fs::rename(tmp, final_path);
    files_.push_back(name);
  }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  const std::vector<std::string>& files() const { return files_; }

  void write_manifest(nlohmann::ordered_json manifest, double wallclock) {
    manifest["outputs"] = files_;
    manifest["version"] = kVersion;
    manifest["wallclock_seconds"] = wallclock;
    const std::time_t now = std::time(nullptr);
    std::ostringstream ts;
    ts << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
    manifest["created_utc"] = ts.str();
    std::string text = manifest.dump(2) + "\n";
    files_.push_back("manifest.json");
    const fs::path tmp = dir_ / "manifest.json.tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error("cannot write manifest");
      out << text;
    }
    fs::rename(tmp, dir_ / "manifest.json");
  }

 private:
  fs::path dir_;
  std::vector<std::string> files_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline MergeTable load_tokenizer(const std::string& path) {
  try {
    return MergeTable::from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed tokenizer '" + path + "': " + e.what());
  }
}

inline std::string checkpoint_name(std::uint64_t seed) {
  return "checkpoint_" + std::to_string(seed) + ".json";
}

// `key=value` lines -> "--key=value" arguments. Blank lines and lines
// starting with '#' are skipped.
inline std::vector<std::string> read_config_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  std::vector<std::string> args;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error("config line " + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key[0] == '-') key.erase(0, 1);
    args.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

struct TrainFlags {
  std::string mode;
  std::size_t epochs = 150;
  double lr = 1e-3;
  std::size_t batch = 32;
  std::optional<std::size_t> k;
  double temperature = 1.0;
  double word_end_weight = 1.0;
  std::size_t word_end_samples = 1;
  bool group_pairs = false;
  std::size_t embed_dim = 32, hidden_dim = 128, window = 8;

  TrainConfig to_config(std::uint64_t seed) const {
    TrainConfig cfg;
    cfg.mode = parse_loss_mode(mode);
    cfg.epochs = epochs;
    cfg.learning_rate = lr;
    cfg.batch_size = batch;
    cfg.seed = seed;
    cfg.label_subsample = k;
    cfg.temperature = temperature;
    cfg.word_end_weight = word_end_weight;
    cfg.word_end_samples = word_end_samples;
    cfg.group_pairs = group_pairs;
    cfg.model.embed_dim = embed_dim;
    cfg.model.hidden_dim = hidden_dim;
    cfg.model.window = window;
    return cfg;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    j["epochs"] = epochs;
    j["lr"] = lr;
    j["batch"] = batch;
    j["k"] = k ? nlohmann::ordered_json(*k) : nlohmann::ordered_json(nullptr);
    j["temperature"] = temperature;
    j["word_end_weight"] = word_end_weight;
    j["word_end_samples"] = word_end_samples;
    j["group_pairs"] = group_pairs;
    j["embed_dim"] = embed_dim;
    j["hidden_dim"] = hidden_dim;
    j["window"] = window;
    return j;
  }
};

inline void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_k = true) {
  cmd->add_option("--epochs", f.epochs, "Training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--batch", f.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  if (with_k) cmd->add_option("--k", f.k, "Subsample k annotations per context")->check(CLI::PositiveNumber);
  cmd->add_option("--temperature", f.temperature, "Sampling temperature (evaluation)")->check(CLI::PositiveNumber);
  cmd->add_option("--word-end-weight", f.word_end_weight, "Weight of the word-end term (0 disables)");
  cmd->add_option("--word-end-samples", f.word_end_samples, "Word ends sampled per batch unit (0 = all)");
  cmd->add_flag("--group-pairs", f.group_pairs, "Batch instruction pairs by prompt");
  cmd->add_option("--embed-dim", f.embed_dim, "Embedding width")->check(CLI::PositiveNumber);
  cmd->add_option("--hidden-dim", f.hidden_dim, "Hidden width")->check(CLI::PositiveNumber);
  cmd->add_option("--window", f.window, "Conditioning window in tokens")->check(CLI::PositiveNumber);
}

inline std::string train_log_csv(const TrainLog& log, bool with_wallclock) {
  std::ostringstream out;
  out << "epoch,split,mean_loss,wallclock_seconds\n";
  for (const auto& r : log.rows) {
    out << r.epoch << ',' << r.split << ',' << detail::fmt(r.mean_loss) << ','
        << (with_wallclock ? detail::fmt(r.wallclock_seconds) : std::string("0")) << '\n';
  }
  return out.str();
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- prepare

struct PrepareArgs {
  std::string dataset, out;
  std::vector<std::uint64_t> seeds{42};
  std::size_t merges = 512;
  double train_frac = 0.8, val_frac = 0.1;
  std::vector<std::string> extra_text;
};

inline void cmd_prepare(const PrepareArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto ds = load_cloze_dataset(a.dataset);
  const std::uint64_t seed = a.seeds.at(0);
  const auto split = split_by_paragraph(ds, a.train_frac, a.val_frac, seed);
  PromptTemplate tmpl;
  std::string text = tokenizer_training_text(split.train, tmpl);
  // Held-out contexts must be encodable too; their words do not shape merges
  // beyond what one rendering adds.
  for (const auto* part : {&split.val, &split.test}) {
    for (const auto& it : part->items) text += tmpl.render(it.context) + " " + it.corpus_word + "\n";
  }
  for (const auto& f : a.extra_text) text += read_file(f) + "\n";
  const auto table = MergeTable::train(text, a.merges);

  OutputDir out(a.out);
  std::ostringstream tr, va, te;
  write_cloze_dataset(tr, split.train);
  write_cloze_dataset(va, split.val);
  write_cloze_dataset(te, split.test);
  out.write("train.jsonl", tr.str());
  out.write("val.jsonl", va.str());
  out.write("test.jsonl", te.str());
  out.write("tokenizer.json", table.to_json().dump() + "\n");

  nlohmann::ordered_json m;
  m["command"] = "prepare";
  m["config"] = {{"train_frac", a.train_frac}, {"val_frac", a.val_frac}, {"merges", a.merges}};
  m["seeds"] = {seed};
  m["inputs"] = nlohmann::ordered_json::array({a.dataset});
  for (const auto& f : a.extra_text) m["inputs"].push_back(f);
  m["tokenizer_hash"] = table.hash();
  m["counts"] = {{"train", split.train.size()}, {"val", split.val.size()}, {"test", split.test.size()}};
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string dataset, out;  // dataset: prepared directory
  std::vector<std::uint64_t> seeds{42, 123, 456};
  TrainFlags flags;
  bool log_wallclock = false;
};

inline void cmd_train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path prep(a.dataset);
  const auto table = load_tokenizer((prep / "tokenizer.json").string());
  const auto train_set = load_cloze_dataset((prep / "train.jsonl").string());
  const auto val_set = load_cloze_dataset((prep / "val.jsonl").string());
  const bool base = a.flags.mode == "base";
  if (!base) parse_loss_mode(a.flags.mode);

  OutputDir out(a.out);
  out.write("tokenizer.json", table.to_json().dump() + "\n");
  nlohmann::ordered_json timings = nlohmann::ordered_json::object();
  for (std::uint64_t seed : a.seeds) {
    TrainFlags flags = a.flags;
    if (base) flags.mode = "multi_label";  // only the model dims matter
    const TrainConfig cfg = flags.to_config(seed);
    auto model = TinyLm::init(table.vocab_size(), cfg.model, seed);
    nlohmann::json meta = {{"mode", a.flags.mode}, {"seed", seed}, {"prompt", cfg.prompt.text()}};
    if (!base) {
      const auto log = train(model, train_set, val_set, cfg, table);
      out.write("train_log_" + std::to_string(seed) + ".csv", train_log_csv(log, a.log_wallclock));
      std::vector<double> per_epoch;
      for (const auto& r : log.rows) {
        if (r.split == "val") per_epoch.push_back(r.wallclock_seconds);
      }
      timings[std::to_string(seed)] = per_epoch;
    }
    out.write(checkpoint_name(seed), checkpoint_json(model, table, meta).dump() + "\n");
  }
  nlohmann::ordered_json m;
  m["command"] = "train";
  m["config"] = a.flags.to_json();
  m["seeds"] = a.seeds;
  m["inputs"] = {(prep / "train.jsonl").string(), (prep / "val.jsonl").string(),
                 (prep / "tokenizer.json").string()};
  m["tokenizer_hash"] = table.hash();
  m["epoch_wallclock_seconds"] = timings;
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- eval

struct Checkpoints {
  std::vector<TinyLm> models;  // one per seed
  std::optional<PromptTemplate> prompt;
};

// A directory holds checkpoint_<seed>.json per seed; a file is shared by
// all seeds.
inline Checkpoints load_checkpoints(const std::string& where, const std::vector<std::uint64_t>& seeds,
                                    const MergeTable& table) {
  Checkpoints c;
  auto take = [&](const std::string& path) {
    auto loaded = load_checkpoint(path, table);
    if (loaded.meta.value("mode", std::string()) == "instruction_augmented") {
      c.prompt = PromptTemplate(loaded.meta.value("prompt", std::string(PromptTemplate::kDefaultText)));
    }
    c.models.push_back(std::move(loaded.model));
  };
  if (fs::is_directory(where)) {
    for (std::uint64_t s : seeds) take((fs::path(where) / checkpoint_name(s)).string());
  } else {
    take(where);
    while (c.models.size() < seeds.size()) c.models.push_back(c.models.front());
  }
  return c;
}

inline std::string default_tokenizer(const std::string& checkpoint) {
  const fs::path p(checkpoint);
  return ((fs::is_directory(p) ? p : p.parent_path()) / "tokenizer.json").string();
}

struct EvalArgs {
  std::string checkpoint, dataset, out, tokenizer, truth;
  std::vector<std::uint64_t> seeds{42, 123, 456};
  std::size_t n_samples = 40;
  std::size_t max_tokens = 16;
  double temperature = 1.0;
};

inline void cmd_eval(const EvalArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string tok_path = a.tokenizer.empty() ? default_tokenizer(a.checkpoint) : a.tokenizer;
  const auto table = load_tokenizer(tok_path);
  const auto test = load_cloze_dataset(a.dataset);
  const auto ck = load_checkpoints(a.checkpoint, a.seeds, table);
  std::map<std::string, Cpd> truth;
  EvalConfig cfg;
  cfg.n_samples = a.n_samples;
  cfg.seeds = a.seeds;
  cfg.sampling = {a.max_tokens, a.temperature};
  cfg.prompt = ck.prompt;
  if (!a.truth.empty()) {
    truth = load_truth(a.truth);
    cfg.reference = &truth;
  }
  std::vector<const TinyLm*> models;
  for (const auto& m : ck.models) models.push_back(&m);
  const auto report = evaluate_runs(models, test, table, cfg);

  OutputDir out(a.out);
  std::ostringstream csv;
  write_report_csv(csv, report);
  out.write("report.csv", csv.str());
  out.write("summary.json", summary_json(report).dump(2) + "\n");
  nlohmann::ordered_json m;
  m["command"] = "eval";
  m["config"] = {{"n_samples", a.n_samples}, {"max_tokens", a.max_tokens}, {"temperature", a.temperature},
                 {"reference", a.truth.empty() ? "human" : "truth"}};
  m["seeds"] = a.seeds;
  m["inputs"] = {a.checkpoint, a.dataset, tok_path};
  if (!a.truth.empty()) m["inputs"].push_back(a.truth);
  m["tokenizer_hash"] = table.hash();
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string dataset, out, truth;
  std::vector<std::size_t> ks{1, 2, 4, 16, 32};
  std::vector<std::uint64_t> seeds{42, 123, 456};
  std::size_t n_samples = 40;
  TrainFlags flags;
};

struct AblationRow {
  std::size_t k;
  std::uint64_t seed;
  double mean_tvd;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "k,seed,mean_tvd,sd_tvd\n";
  std::map<std::size_t, std::vector<double>> by_k;
  std::vector<std::size_t> order;
  for (const auto& r : rows) {
    out << r.k << ',' << r.seed << ',' << detail::fmt(r.mean_tvd) << ",NA\n";
    if (!by_k.count(r.k)) order.push_back(r.k);
    by_k[r.k].push_back(r.mean_tvd);
  }
  for (std::size_t k : order) {
    const auto s = detail::summarize(by_k[k]);
    out << k << ",all," << detail::fmt(s.mean) << ',' << detail::fmt(s.sd) << '\n';
  }
  return out.str();
}

inline void cmd_ablate(const AblateArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path prep(a.dataset);
  const auto table = load_tokenizer((prep / "tokenizer.json").string());
  const auto train_set = load_cloze_dataset((prep / "train.jsonl").string());
  const auto val_set = load_cloze_dataset((prep / "val.jsonl").string());
  const auto test = load_cloze_dataset((prep / "test.jsonl").string());
  std::map<std::string, Cpd> truth;
  if (!a.truth.empty()) truth = load_truth(a.truth);

  TrainFlags flags = a.flags;
  flags.mode = "multi_label";
  std::vector<AblationRow> rows;
  for (std::size_t k : a.ks) {
    flags.k = k;
    for (std::uint64_t seed : a.seeds) {
      const TrainConfig cfg = flags.to_config(seed);
      auto model = TinyLm::init(table.vocab_size(), cfg.model, seed);
      train(model, train_set, val_set, cfg, table);
      EvalConfig ec;
      ec.n_samples = a.n_samples;
      ec.seeds = {seed};
      ec.sampling.temperature = cfg.temperature;
      if (!a.truth.empty()) ec.reference = &truth;
      const auto r = evaluate(model, test, table, ec);
      rows.push_back({k, seed, r.aggregates.at("tvd_model_human").mean});
    }
  }
  OutputDir out(a.out);
  out.write("ablation.csv", ablation_csv(rows));
  nlohmann::ordered_json m;
  m["command"] = "ablate";
  m["config"] = flags.to_json();
  m["config"]["k_list"] = a.ks;
  m["config"]["n_samples"] = a.n_samples;
  m["seeds"] = a.seeds;
  m["inputs"] = {a.dataset};
  if (!a.truth.empty()) m["inputs"].push_back(a.truth);
  m["tokenizer_hash"] = table.hash();
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- probe-qa

struct QaItem {
  std::string id, context, target;
};

// JSON Lines: {"context": "...", "target": "..."} with an optional "id".
inline std::vector<QaItem> load_qa(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open QA file '" + path + "'");
  std::vector<QaItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QaItem q;
      q.context = j.at("context").get<std::string>();
      q.target = j.at("target").get<std::string>();
      q.id = j.contains("id") ? j["id"].get<std::string>() : "q" + std::to_string(items.size());
      if (q.context.empty() || normalize_word(q.target).empty()) throw Error("empty context or target");
      items.push_back(std::move(q));
    } catch (const std::exception& e) {
      throw Error("QA line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (items.empty()) throw Error("QA file has no items");
  return items;
}

struct ProbeArgs {
  std::string checkpoint, qa, out, tokenizer, baseline;
  std::vector<std::uint64_t> seeds{42, 123, 456};
  std::size_t n_samples = 40;
};

// rates[seed_index][item]
inline std::vector<std::vector<double>> probe_hit_rates(const Checkpoints& ck, const std::vector<QaItem>& items,
                                                        const std::vector<std::uint64_t>& seeds,
                                                        std::size_t n, const MergeTable& table) {
  std::vector<std::vector<double>> rates;
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    std::vector<double> row;
    for (const auto& q : items) {
      const std::string text = ck.prompt ? ck.prompt->render(q.context) : q.context;
      row.push_back(hit_rate(ck.models[s], table.encode(text), q.target, n,
                             derive_seed(seeds[s], "probe", fnv1a64(q.id)), table));
    }
    rates.push_back(std::move(row));
  }
  return rates;
}

inline void cmd_probe_qa(const ProbeArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string tok_path = a.tokenizer.empty() ? default_tokenizer(a.checkpoint) : a.tokenizer;
  const auto table = load_tokenizer(tok_path);
  const auto items = load_qa(a.qa);
  const auto after = probe_hit_rates(load_checkpoints(a.checkpoint, a.seeds, table), items, a.seeds,
                                     a.n_samples, table);
  OutputDir out(a.out);
  std::ostringstream csv;
  csv << "seed,item_id,target,hit_rate\n";
  std::vector<double> per_seed;
  for (std::size_t s = 0; s < a.seeds.size(); ++s) {
    double sum = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      csv << a.seeds[s] << ',' << items[i].id << ',' << normalize_word(items[i].target) << ','
          << detail::fmt(after[s][i]) << '\n';
      sum += after[s][i];
    }
    per_seed.push_back(sum / static_cast<double>(items.size()));
  }
  out.write("hit_rate.csv", csv.str());
  const auto summary = detail::summarize(per_seed);
  nlohmann::ordered_json sj;
  sj["hit_rate"] = {{"mean", summary.mean}, {"sd", summary.sd}, {"n_seeds", summary.n_seeds}};

  if (!a.baseline.empty()) {
    const auto before = probe_hit_rates(load_checkpoints(a.baseline, a.seeds, table), items, a.seeds,
                                        a.n_samples, table);
    std::ostringstream cmp;
    cmp << "item_id,hit_before,hit_after,delta\n";
    std::vector<double> before_seed(a.seeds.size(), 0.0);
    for (std::size_t i = 0; i < items.size(); ++i) {
      double b = 0.0, f = 0.0;
      for (std::size_t s = 0; s < a.seeds.size(); ++s) {
        b += before[s][i];
        f += after[s][i];
        before_seed[s] += before[s][i] / static_cast<double>(items.size());
      }
      b /= static_cast<double>(a.seeds.size());
      f /= static_cast<double>(a.seeds.size());
      cmp << items[i].id << ',' << detail::fmt(b) << ',' << detail::fmt(f) << ',' << detail::fmt(f - b) << '\n';
    }
    out.write("compare.csv", cmp.str());
    const auto bs = detail::summarize(before_seed);
    sj["baseline_hit_rate"] = {{"mean", bs.mean}, {"sd", bs.sd}, {"n_seeds", bs.n_seeds}};
  }
  out.write("summary.json", sj.dump(2) + "\n");
  nlohmann::ordered_json m;
  m["command"] = "probe-qa";
  m["config"] = {{"n_samples", a.n_samples}};
  m["seeds"] = a.seeds;
  m["inputs"] = {a.checkpoint, a.qa, tok_path};
  if (!a.baseline.empty()) m["inputs"].push_back(a.baseline);
  m["tokenizer_hash"] = table.hash();
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string out;
  double alpha = 1.0;
  std::size_t contexts = 200, vocab = 32, m = 40;
  std::vector<std::uint64_t> seeds{42};
};

inline void cmd_synth(const SynthArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t seed = a.seeds.at(0);
  const auto world = gen_world(a.contexts, a.vocab, a.alpha, seed);
  const auto ds = to_cloze_dataset(world, a.m, seed);
  OutputDir out(a.out);
  std::ostringstream jl;
  write_cloze_dataset(jl, ds);
  out.write("world.jsonl", jl.str());
  out.write("truth.json", truth_json(world).dump() + "\n");
  nlohmann::ordered_json m;
  m["command"] = "synth";
  m["config"] = {{"alpha", a.alpha}, {"contexts", a.contexts}, {"vocab", a.vocab}, {"m", a.m}};
  m["seeds"] = {seed};
  m["inputs"] = nlohmann::ordered_json::array();
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- report

struct ReportArgs {
  std::string before, after, out;
};

inline std::string report_path(const std::string& p) {
  return fs::is_directory(p) ? (fs::path(p) / "report.csv").string() : p;
}

inline void cmd_report(const ReportArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  std::istringstream bin(read_file(report_path(a.before))), ain(read_file(report_path(a.after)));
  const auto before = read_report_csv(bin);
  const auto after = read_report_csv(ain);
  const auto rows = report_compare(before, after);
  OutputDir out(a.out);
  std::ostringstream csv;
  write_delta_csv(csv, rows);
  out.write("delta.csv", csv.str());
  nlohmann::ordered_json m;
  m["command"] = "report";
  m["config"] = nlohmann::ordered_json::object();
  m["seeds"] = after.seeds;
  m["inputs"] = {report_path(a.before), report_path(a.after)};
  out.write_manifest(m, seconds_since(t0));
}

// ---------------------------------------------------------------- entry

// Parses and runs one command. Returns the process exit status; errors go to err.
inline int run(std::vector<std::string> args, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-label next-word training and variability evaluation", "lmvar"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_unused;
  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", config_unused, "Flat key=value config file (flags override it)");
  };
  auto add_seeds = [](CLI::App* c, std::vector<std::uint64_t>& seeds) {
    c->add_option("--seeds", seeds, "Comma-separated seeds")->delimiter(',');
  };

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "Split a cloze dataset by passage and train the tokenizer");
  p->add_option("--dataset", prep.dataset, "Cloze JSON Lines file")->required();
  p->add_option("--out", prep.out, "Output directory")->required();
  add_seeds(p, prep.seeds);
  p->add_option("--merges", prep.merges, "BPE merges");
  p->add_option("--train-frac", prep.train_frac, "Fraction of passages for training");
  p->add_option("--val-frac", prep.val_frac, "Fraction of training passages for validation");
  p->add_option("--extra-text", prep.extra_text, "Extra text files the tokenizer must cover")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  add_config(p);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one model per seed");
  t->add_option("--dataset", tr.dataset, "Prepared directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--mode", tr.flags.mode,
                "orig_corpus | majority_label | multi_label | instruction_augmented | base")
      ->required()
      ->check(CLI::IsMember({"orig_corpus", "majority_label", "multi_label", "instruction_augmented", "base"}));
  add_seeds(t, tr.seeds);
  add_train_flags(t, tr.flags);
  t->add_flag("--log-wallclock", tr.log_wallclock, "Write timings into the train log");
  add_config(t);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Estimate model CPDs and compare them with human CPDs");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file or training output directory")->required();
  e->add_option("--dataset", ev.dataset, "Test cloze JSON Lines file")->required();
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--tokenizer", ev.tokenizer, "Tokenizer JSON (default: next to the checkpoint)");
  e->add_option("--truth", ev.truth, "Reference CPDs by context id (synthetic truth)");
  add_seeds(e, ev.seeds);
  e->add_option("--n-samples", ev.n_samples, "Model samples per context")->check(CLI::PositiveNumber);
  e->add_option("--max-tokens", ev.max_tokens, "Token budget per sampled word")->check(CLI::PositiveNumber);
  e->add_option("--temperature", ev.temperature, "Sampling temperature")->check(CLI::PositiveNumber);
  add_config(e);

  AblateArgs ab;
  ab.flags.mode = "multi_label";
  auto* b = app.add_subcommand("ablate", "Mean TVD as a function of labels per context");
  b->add_option("--dataset", ab.dataset, "Prepared directory")->required();
  b->add_option("--out", ab.out, "Output directory")->required();
  b->add_option("--truth", ab.truth, "Reference CPDs by context id");
  b->add_option("--k", ab.ks, "Comma-separated label counts")->delimiter(',');
  add_seeds(b, ab.seeds);
  b->add_option("--n-samples", ab.n_samples, "Model samples per context")->check(CLI::PositiveNumber);
  add_train_flags(b, ab.flags, false);
  add_config(b);

  ProbeArgs pr;
  auto* q = app.add_subcommand("probe-qa", "Hit rate on single-answer items");
  q->add_option("--checkpoint", pr.checkpoint, "Checkpoint file or training output directory")->required();
  q->add_option("--qa", pr.qa, "QA JSON Lines file")->required();
  q->add_option("--out", pr.out, "Output directory")->required();
  q->add_option("--tokenizer", pr.tokenizer, "Tokenizer JSON (default: next to the checkpoint)");
  q->add_option("--baseline", pr.baseline, "Checkpoint to compare against");
  add_seeds(q, pr.seeds);
  q->add_option("--n-samples", pr.n_samples, "Samples per item")->check(CLI::PositiveNumber);
  add_config(q);

  SynthArgs sy;
  auto* s = app.add_subcommand("synth", "Generate a synthetic world with known CPDs");
  s->add_option("--out", sy.out, "Output directory")->required();
  s->add_option("--alpha", sy.alpha, "Dirichlet concentration")->check(CLI::PositiveNumber);
  s->add_option("--contexts", sy.contexts, "Number of contexts")->check(CLI::PositiveNumber);
  s->add_option("--vocab", sy.vocab, "Number of candidate words");
  s->add_option("--m", sy.m, "Annotations per context")->check(CLI::PositiveNumber);
  add_seeds(s, sy.seeds);
  add_config(s);

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "Per-context TVD deltas between two evaluations");
  r->add_option("--before", rp.before, "Baseline eval directory or report.csv")->required();
  r->add_option("--after", rp.after, "Second eval directory or report.csv")->required();
  r->add_option("--out", rp.out, "Output directory")->required();
  add_config(r);

  // Config-file values are added only for flags absent from the command line.
  try {
    std::string config_path;
    std::set<std::string> given;
    for (std::size_t i = 0; i < args.size(); ++i) {
      const std::string& arg = args[i];
      if (arg.rfind("--", 0) != 0) continue;
      const std::string name = arg.substr(0, arg.find('='));
      given.insert(name);
      if (name == "--config") {
        if (arg.size() > name.size()) config_path = arg.substr(name.size() + 1);
        else if (i + 1 < args.size()) config_path = args[i + 1];
      }
    }
    if (!config_path.empty() && !args.empty()) {
      std::vector<std::string> extra;
      for (auto& kv : read_config_args(config_path)) {
        if (!given.count(kv.substr(0, kv.find('=')))) extra.push_back(std::move(kv));
      }
      args.insert(args.begin() + 1, extra.begin(), extra.end());
    }
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    std::ostringstream o;
    const int code = app.exit(ex, o, err);
    if (code == 0) std::cout << o.str();
    return code;
  }

  try {
    if (*p) cmd_prepare(prep);
    else if (*t) cmd_train(tr);
    else if (*e) cmd_eval(ev);
    else if (*b) cmd_ablate(ab);
    else if (*q) cmd_probe_qa(pr);
    else if (*s) cmd_synth(sy);
    else if (*r) cmd_report(rp);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace lmvar::cli
