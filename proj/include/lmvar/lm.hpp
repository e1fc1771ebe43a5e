#pragma once

// Fixed-window neural language model:
//
//   x      = concat(embedding[t_{n-K+1}], ..., embedding[t_n])   (K*d)
//   hidden = tanh(x * W_h + b_h)                                 (h)
//   logits = hidden * W_out + b_out                              (V)
//   q      = softmax(logits)
//
// Contexts shorter than K are left-padded with pad_id() == V, which has its
// own embedding row but is never predicted. All parameters live in one flat
// buffer so the optimizer, finite-difference checks and checkpoints can treat
// them uniformly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvar/error.hpp"
#include "lmvar/rng.hpp"
#include "lmvar/tokenizer.hpp"

namespace lmvar {

struct TinyLmConfig {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 128;
  std::size_t window = 8;
  double init_scale = 0.08;

  friend bool operator==(const TinyLmConfig&, const TinyLmConfig&) = default;
};

class TinyLm {
 public:
  TinyLm(std::size_t vocab_size, TinyLmConfig cfg) : vocab_(vocab_size), cfg_(cfg) {
    if (vocab_ == 0 || cfg_.embed_dim == 0 || cfg_.hidden_dim == 0 || cfg_.window == 0) {
      throw Error("model dimensions must be >= 1");
    }
    emb_off_ = 0;
    wh_off_ = emb_off_ + (vocab_ + 1) * cfg_.embed_dim;
    bh_off_ = wh_off_ + input_dim() * cfg_.hidden_dim;
    wo_off_ = bh_off_ + cfg_.hidden_dim;
    bo_off_ = wo_off_ + cfg_.hidden_dim * vocab_;
    params_.assign(bo_off_ + vocab_, 0.0);
  }

  // Weights ~ U(-init_scale, init_scale), biases zero.
  static TinyLm init(std::size_t vocab_size, TinyLmConfig cfg, std::uint64_t seed) {
    TinyLm m(vocab_size, cfg);
    Rng rng(derive_seed(seed, "init"));
    const double s = cfg.init_scale;
    for (std::size_t i = m.emb_off_; i < m.bh_off_; ++i) m.params_[i] = uniform(rng, -s, s);
    for (std::size_t i = m.wo_off_; i < m.bo_off_; ++i) m.params_[i] = uniform(rng, -s, s);
    return m;
  }

  std::size_t vocab_size() const { return vocab_; }
  TokenId pad_id() const { return static_cast<TokenId>(vocab_); }
  const TinyLmConfig& config() const { return cfg_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<const double> embedding() const { return view(emb_off_, wh_off_); }
  std::span<const double> hidden_weights() const { return view(wh_off_, bh_off_); }
  std::span<const double> hidden_bias() const { return view(bh_off_, wo_off_); }
  std::span<const double> output_weights() const { return view(wo_off_, bo_off_); }
  std::span<const double> output_bias() const { return view(bo_off_, params_.size()); }
  std::span<double> embedding_row(TokenId t) {
    return std::span<double>(params_).subspan(emb_off_ + t * cfg_.embed_dim, cfg_.embed_dim);
  }

  std::vector<double> logits(std::span<const TokenId> context) const {
    Activations a = forward(context);
    return std::move(a.logits);
  }

  // Natural-log probabilities, computed stably from the logits.
  std::vector<double> log_probs(std::span<const TokenId> context) const {
    auto z = logits(context);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : z) v -= lse;
    return z;
  }

  std::vector<double> next_token_dist(std::span<const TokenId> context,
                                      double temperature = 1.0) const {
    if (!(temperature > 0.0)) throw Error("temperature must be > 0");
    auto z = logits(context);
    return softmax(z, temperature);
  }

  // Adds scale * d/dparams of  -sum_t target[t] * log q(t | context)  into
  // grad and returns the unscaled loss. target need not be normalized.
  double accumulate_ce_grad(std::span<const TokenId> context, std::span<const double> target,
                            std::span<double> grad, double scale = 1.0) const {
    if (target.size() != vocab_) throw Error("target length does not match vocabulary");
    return accumulate(context, target, 0.0, {}, grad, scale).first;
  }

  // As accumulate_ce_grad, plus  -end_weight * log sum_{b in closing} q(b | context).
  // Returns the two loss parts. Either part may be empty/zero.
  std::pair<double, double> accumulate_ce_and_closing_grad(std::span<const TokenId> context,
                                                           std::span<const double> target,
                                                           double end_weight,
                                                           std::span<const char> closing,
                                                           std::span<double> grad,
                                                           double scale = 1.0) const {
    if (!target.empty() && target.size() != vocab_) throw Error("target length does not match vocabulary");
    if (closing.size() != vocab_) throw Error("closing mask length does not match vocabulary");
    return accumulate(context, target, end_weight, closing, grad, scale);
  }

  // Gradient of the cross-entropy against a target distribution.
  std::vector<double> ce_grad(std::span<const TokenId> context,
                              std::span<const double> target) const {
    std::vector<double> g(params_.size(), 0.0);
    accumulate_ce_grad(context, target, g);
    return g;
  }

  friend bool operator==(const TinyLm& a, const TinyLm& b) {
    return a.vocab_ == b.vocab_ && a.cfg_ == b.cfg_ && a.params_ == b.params_;
  }

  static std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0) {
    std::vector<double> out(logits.size());
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      out[i] = std::exp((logits[i] - mx) / temperature);
      s += out[i];
    }
    for (double& v : out) v /= s;
    return out;
  }

 private:
  struct Activations {
    std::vector<TokenId> window;
    std::vector<double> input;
    std::vector<double> hidden;
    std::vector<double> logits;
  };

  std::pair<double, double> accumulate(std::span<const TokenId> context, std::span<const double> target,
                                       double end_weight, std::span<const char> closing,
                                       std::span<double> grad, double scale) const {
    if (grad.size() != params_.size()) throw Error("gradient buffer has the wrong size");
    Activations a = forward(context);
    const std::size_t d = cfg_.embed_dim, h = cfg_.hidden_dim, V = vocab_;

    const double mx = *std::max_element(a.logits.begin(), a.logits.end());
    double s = 0.0;
    for (double v : a.logits) s += std::exp(v - mx);
    const double lse = mx + std::log(s);

    // d/dz_v of the cross-entropy part is  mass * q_v - target_v; of the
    // closing part  w * (q_v - [v closing] q_v / Q).
    double mass = 0.0;
    for (double t : target) mass += t;
    double closed = 0.0;
    if (end_weight > 0.0) {
      for (std::size_t v = 0; v < V; ++v) {
        if (closing[v]) closed += std::exp(a.logits[v] - lse);
      }
      if (!(closed > 0.0)) throw Error("zero probability of closing a word");
    }
    double ce = 0.0;
    std::vector<double> dlogit(V);
    for (std::size_t v = 0; v < V; ++v) {
      const double lp = a.logits[v] - lse;
      const double q = std::exp(lp);
      const double t = target.empty() ? 0.0 : target[v];
      if (t != 0.0) ce -= t * lp;
      double g = mass * q - t;
      if (end_weight > 0.0) g += end_weight * (q - (closing[v] ? q / closed : 0.0));
      dlogit[v] = scale * g;
    }
    const double end_loss = end_weight > 0.0 ? -end_weight * std::log(closed) : 0.0;

    double* g = grad.data();
    const double* p = params_.data();
    std::vector<double> dhidden(h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      const double hi = a.hidden[i];
      double* gw = g + wo_off_ + i * V;
      const double* w = p + wo_off_ + i * V;
      double acc = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        gw[v] += hi * dlogit[v];
        acc += w[v] * dlogit[v];
      }
      dhidden[i] = acc * (1.0 - hi * hi);
    }
    for (std::size_t v = 0; v < V; ++v) g[bo_off_ + v] += dlogit[v];
    for (std::size_t i = 0; i < h; ++i) g[bh_off_ + i] += dhidden[i];
    for (std::size_t j = 0; j < a.input.size(); ++j) {
      const double xj = a.input[j];
      double* gw = g + wh_off_ + j * h;
      const double* w = p + wh_off_ + j * h;
      double acc = 0.0;
      for (std::size_t i = 0; i < h; ++i) {
        gw[i] += xj * dhidden[i];
        acc += w[i] * dhidden[i];
      }
      const std::size_t slot = j / d;
      g[emb_off_ + a.window[slot] * d + (j % d)] += acc;
    }
    return {ce, end_loss};
  }

  std::size_t input_dim() const { return cfg_.window * cfg_.embed_dim; }

  std::span<const double> view(std::size_t b, std::size_t e) const {
    return std::span<const double>(params_).subspan(b, e - b);
  }

  Activations forward(std::span<const TokenId> context) const {
    const std::size_t K = cfg_.window, d = cfg_.embed_dim, h = cfg_.hidden_dim, V = vocab_;
    Activations a;
    a.window.assign(K, pad_id());
    const std::size_t take = std::min(K, context.size());
    for (std::size_t i = 0; i < take; ++i) {
      const TokenId t = context[context.size() - take + i];
      if (t >= V) throw Error("token id " + std::to_string(t) + " out of range for the model");
      a.window[K - take + i] = t;
    }
    a.input.resize(K * d);
    for (std::size_t k = 0; k < K; ++k) {
      std::copy_n(params_.data() + emb_off_ + a.window[k] * d, d, a.input.data() + k * d);
    }
    a.hidden.assign(params_.begin() + bh_off_, params_.begin() + bh_off_ + h);
    for (std::size_t j = 0; j < K * d; ++j) {
      const double xj = a.input[j];
      if (xj == 0.0) continue;
      const double* w = params_.data() + wh_off_ + j * h;
      for (std::size_t i = 0; i < h; ++i) a.hidden[i] += xj * w[i];
    }
    for (double& v : a.hidden) v = std::tanh(v);
    a.logits.assign(params_.begin() + bo_off_, params_.begin() + bo_off_ + V);
    for (std::size_t i = 0; i < h; ++i) {
      const double hi = a.hidden[i];
      if (hi == 0.0) continue;
      const double* w = params_.data() + wo_off_ + i * V;
      for (std::size_t v = 0; v < V; ++v) a.logits[v] += hi * w[v];
    }
    return a;
  }

  std::size_t vocab_;
  TinyLmConfig cfg_;
  std::size_t emb_off_ = 0, wh_off_ = 0, bh_off_ = 0, wo_off_ = 0, bo_off_ = 0;
  std::vector<double> params_;
};

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<double> m, v;

  explicit AdamState(std::size_t n = 0, double lr = 1e-3) : learning_rate(lr), m(n, 0.0), v(n, 0.0) {}
};

// Adam with bias correction. Throws "diverged" on a non-finite gradient and
// leaves params and state untouched in that case.
inline void adam_step(std::span<double> params, AdamState& st, std::span<const double> grad) {
  if (params.size() != grad.size() || st.m.size() != params.size() || st.v.size() != params.size()) {
    throw Error("adam: parameter, gradient and state sizes differ");
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw Error("diverged: non-finite gradient");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= st.learning_rate * mhat / (std::sqrt(vhat) + st.epsilon);
  }
}

// Inverse-CDF draw; u is uniform on [0, 1).
inline TokenId sample_from(std::span<const double> dist, Rng& rng) {
  const double u = uniform01(rng);
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    last_positive = i;
    cum += dist[i];
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_positive);
}

inline TokenId sample_next_token(const TinyLm& model, std::span<const TokenId> context, Rng& rng,
                                 double temperature = 1.0) {
  const auto dist = model.next_token_dist(context, temperature);
  return sample_from(dist, rng);
}

// Checkpoint: a JSON document with the model config, the tokenizer hash and
// every parameter. Doubles are written with round-trip precision.
inline nlohmann::json checkpoint_json(const TinyLm& model, const MergeTable& table,
                                      const nlohmann::json& meta = nlohmann::json::object()) {
  if (table.vocab_size() != model.vocab_size()) throw Error("model and tokenizer vocab sizes differ");
  nlohmann::ordered_json j;
  j["format"] = "lmvar-tinylm-1";
  j["vocab_size"] = model.vocab_size();
  j["vocab_hash"] = table.hash();
  j["embed_dim"] = model.config().embed_dim;
  j["hidden_dim"] = model.config().hidden_dim;
  j["window"] = model.config().window;
  j["init_scale"] = model.config().init_scale;
  j["meta"] = meta;
  j["params"] = std::vector<double>(model.params().begin(), model.params().end());
  return nlohmann::json(j);
}

inline void save_checkpoint(const std::string& path, const TinyLm& model, const MergeTable& table,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(model, table, meta).dump() << '\n';
}

struct LoadedCheckpoint {
  TinyLm model;
  nlohmann::json meta;
};

inline LoadedCheckpoint checkpoint_from_json(const nlohmann::json& j, const MergeTable& table) {
  try {
    if (j.at("format").get<std::string>() != "lmvar-tinylm-1") throw Error("unknown checkpoint format");
    if (j.at("vocab_hash").get<std::uint64_t>() != table.hash()) {
      throw Error("checkpoint vocabulary hash does not match the tokenizer");
    }
    TinyLmConfig cfg;
    cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
    cfg.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    cfg.window = j.at("window").get<std::size_t>();
    cfg.init_scale = j.at("init_scale").get<double>();
    TinyLm model(j.at("vocab_size").get<std::size_t>(), cfg);
    const auto& p = j.at("params");
    if (p.size() != model.num_params()) throw Error("checkpoint parameter count mismatch");
    auto dst = model.params();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i] = p[i].get<double>();
      if (!std::isfinite(dst[i])) throw Error("checkpoint contains non-finite parameters");
    }
    return {std::move(model), j.value("meta", nlohmann::json::object())};
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed checkpoint: ") + e.what());
  }
}

inline LoadedCheckpoint load_checkpoint(const std::string& path, const MergeTable& table) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed checkpoint '" + path + "': " + e.what());
  }
  return checkpoint_from_json(j, table);
}

}  // namespace lmvar
