#pragma once

// Byte-pair-encoding tokenizer over UTF-8 code points.
//
// Text is pre-split into pieces: a piece is either a run of non-whitespace
// characters (optionally introduced by exactly one space) or a single
// whitespace character that does not introduce such a run. The space that
// introduces a run is folded into the run's first symbol as a marker prefix,
// so " cat" starts with the symbol "<marker>c". Merges never cross pieces.

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lmvar/error.hpp"
#include "lmvar/rng.hpp"

namespace lmvar {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr std::string_view kDefaultSpaceMarker = "\xC4\xA0";  // U+0120, GPT-2 style

namespace detail {

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;  // stray continuation byte: treated as its own character
}

inline std::vector<std::string_view> split_chars(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t n = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
    out.push_back(text.substr(i, n));
    i += n;
  }
  return out;
}

inline bool is_space_char(std::string_view ch) {
  return ch == " " || ch == "\t" || ch == "\n" || ch == "\r";
}

// Pieces as lists of base symbols.
inline std::vector<std::vector<std::string>> pretokenize(std::string_view text,
                                                         std::string_view marker) {
  if (!marker.empty() && text.find(marker) != std::string_view::npos) {
    throw Error("text contains the reserved space marker '" + std::string(marker) + "'");
  }
  const auto chars = split_chars(text);
  std::vector<std::vector<std::string>> pieces;
  bool in_run = false;
  for (std::size_t i = 0; i < chars.size(); ++i) {
    const auto ch = chars[i];
    if (is_space_char(ch)) {
      in_run = false;
      if (ch == " " && i + 1 < chars.size() && !is_space_char(chars[i + 1])) {
        pieces.push_back({std::string(marker) + std::string(chars[i + 1])});
        ++i;
        in_run = true;
      } else {
        pieces.push_back({std::string(ch)});
      }
      continue;
    }
    if (!in_run) {
      pieces.emplace_back();
      in_run = true;
    }
    pieces.back().emplace_back(ch);
  }
  return pieces;
}

}  // namespace detail

class MergeTable {
 public:
  using Merge = std::pair<std::string, std::string>;

  MergeTable(std::vector<std::string> alphabet, std::vector<Merge> merges,
             std::string space_marker = std::string(kDefaultSpaceMarker))
      : merges_(std::move(merges)), marker_(std::move(space_marker)) {
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
    alphabet_ = std::move(alphabet);
    for (const auto& a : alphabet_) {
      if (a.empty()) throw Error("empty alphabet symbol");
      add_token(a);
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [l, rr] = merges_[r];
      auto li = index_.find(l);
      auto ri = index_.find(rr);
      if (li == index_.end() || ri == index_.end()) {
        throw Error("merge " + std::to_string(r) + " refers to an unknown token");
      }
      const TokenId merged = static_cast<TokenId>(vocab_.size());
      if (!add_token(l + rr)) {
        throw Error("merge " + std::to_string(r) + " duplicates token '" + l + rr + "'");
      }
      ranks_[key(li->second, ri->second)] = {r, merged};
    }
  }

  // Greedy BPE training: each round merges the most frequent adjacent pair,
  // ties going to the lexicographically smallest merged string (then the
  // smallest left part). Stops early once no pair occurs at least twice.
  static MergeTable train(std::string_view corpus_text, std::size_t num_merges,
                          std::string space_marker = std::string(kDefaultSpaceMarker)) {
    if (corpus_text.empty()) throw Error("empty training text");
    std::map<std::vector<std::string>, std::size_t> piece_counts;
    for (auto& p : detail::pretokenize(corpus_text, space_marker)) ++piece_counts[std::move(p)];

    std::vector<std::string> alphabet;
    std::vector<std::pair<std::vector<std::string>, std::size_t>> pieces(piece_counts.begin(),
                                                                         piece_counts.end());
    // Every observed character enters the alphabet both bare and
    // space-marked, so any text over those characters is encodable.
    for (const auto& [syms, _] : pieces) {
      for (const auto& sym : syms) {
        std::string bare = sym.rfind(space_marker, 0) == 0 && sym.size() > space_marker.size()
                               ? sym.substr(space_marker.size())
                               : sym;
        if (!detail::is_space_char(bare)) alphabet.push_back(space_marker + bare);
        alphabet.push_back(std::move(bare));
      }
    }
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());

    std::unordered_map<std::string, bool> known(alphabet.size() * 2);
    for (const auto& a : alphabet) known[a] = true;

    std::vector<Merge> merges;
    while (merges.size() < num_merges) {
      std::map<Merge, std::size_t> pair_counts;
      for (const auto& [syms, n] : pieces) {
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_counts[{syms[i], syms[i + 1]}] += n;
      }
      const Merge* best = nullptr;
      std::size_t best_n = 0;
      std::string best_str;
      for (const auto& [pr, n] : pair_counts) {
        if (n < 2) continue;
        std::string merged = pr.first + pr.second;
        if (known.count(merged)) continue;  // would duplicate an existing token
        if (n > best_n || (n == best_n && merged < best_str)) {
          best = &pr;
          best_n = n;
          best_str = std::move(merged);
        }
      }
      if (best == nullptr) break;
      const Merge m = *best;
      merges.push_back(m);
      known[best_str] = true;
      for (auto& [syms, _] : pieces) {
        std::vector<std::string> out;
        out.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size(); ++i) {
          if (i + 1 < syms.size() && syms[i] == m.first && syms[i + 1] == m.second) {
            out.push_back(best_str);
            ++i;
          } else {
            out.push_back(std::move(syms[i]));
          }
        }
        syms = std::move(out);
      }
    }
    return MergeTable(std::move(alphabet), std::move(merges), std::move(space_marker));
  }

  TokenSeq encode(std::string_view text) const {
    TokenSeq out;
    for (const auto& piece : detail::pretokenize(text, marker_)) {
      TokenSeq ids;
      ids.reserve(piece.size());
      for (const auto& sym : piece) {
        auto it = index_.find(sym);
        if (it == index_.end() || it->second >= alphabet_.size()) {
          std::string shown = sym;
          if (shown.rfind(marker_, 0) == 0) shown = shown.substr(marker_.size());
          throw Error("character '" + shown + "' is not in the tokenizer alphabet");
        }
        ids.push_back(it->second);
      }
      apply_merges(ids);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) out += token_surface(t);
    return out;
  }

  // tau(w): the word as it appears mid-sentence, after one space.
  TokenSeq tokenize_word(std::string_view word) const {
    if (word.empty()) throw Error("cannot tokenize an empty word");
    return encode(" " + std::string(word));
  }

  std::size_t vocab_size() const { return vocab_.size(); }
  const std::string& token_text(TokenId t) const {
    check_id(t);
    return vocab_[t];
  }
  // Token text with the marker rendered as a space.
  std::string token_surface(TokenId t) const {
    const std::string& s = token_text(t);
    if (!marker_.empty() && s.rfind(marker_, 0) == 0) return " " + s.substr(marker_.size());
    return s;
  }
  bool starts_word(TokenId t) const {
    return !marker_.empty() && token_text(t).rfind(marker_, 0) == 0;
  }

  const std::vector<std::string>& alphabet() const { return alphabet_; }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& space_marker() const { return marker_; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["alphabet"] = alphabet_;
    j["merges"] = nlohmann::json::array();
    for (const auto& [l, r] : merges_) j["merges"].push_back({l, r});
    j["space_marker"] = marker_;
    return j;
  }

  static MergeTable from_json(const nlohmann::json& j) {
    try {
      std::vector<Merge> merges;
      for (const auto& m : j.at("merges")) {
        if (!m.is_array() || m.size() != 2) throw Error("merge entries must be [left, right]");
        merges.emplace_back(m[0].get<std::string>(), m[1].get<std::string>());
      }
      return MergeTable(j.at("alphabet").get<std::vector<std::string>>(), std::move(merges),
                        j.at("space_marker").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("malformed merge table: ") + e.what());
    }
  }

  // Identifies the vocabulary; stored in model checkpoints.
  std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

 private:
  static std::uint64_t key(TokenId l, TokenId r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
  }

  bool add_token(const std::string& text) {
    if (!index_.emplace(text, static_cast<TokenId>(vocab_.size())).second) return false;
    vocab_.push_back(text);
    return true;
  }

  void check_id(TokenId t) const {
    if (t >= vocab_.size()) throw Error("token id " + std::to_string(t) + " out of range");
  }

  // Lowest-rank pair first, all of its occurrences left to right.
  void apply_merges(TokenSeq& ids) const {
    while (ids.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      TokenId best_l = 0, best_r = 0, best_new = 0;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        auto it = ranks_.find(key(ids[i], ids[i + 1]));
        if (it != ranks_.end() && it->second.first < best_rank) {
          best_rank = it->second.first;
          best_l = ids[i];
          best_r = ids[i + 1];
          best_new = it->second.second;
        }
      }
      if (best_rank == SIZE_MAX) return;
      TokenSeq out;
      out.reserve(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i + 1 < ids.size() && ids[i] == best_l && ids[i + 1] == best_r) {
          out.push_back(best_new);
          ++i;
        } else {
          out.push_back(ids[i]);
        }
      }
      ids = std::move(out);
    }
  }

  std::vector<std::string> alphabet_;
  std::vector<Merge> merges_;
  std::string marker_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> ranks_;
};

}  // namespace lmvar
