// Copyright 2026 The desklm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef DESKLM_NGRAM_HPP
#define DESKLM_NGRAM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/util.hpp"

namespace desklm {

// ----- packed n-gram keys -----
//
// An n-gram key is its ids packed 3 bytes each, little-endian, into a
// std::string. A 5-gram key is 15 bytes and stays within the small-string
// buffer of common standard libraries. Supports vocabularies up to 2^24.

namespace keys {

using Key = std::string;

inline void append_id(Key& k, WordId id) {
  if (id >= (1u << 24)) throw DataError("n-gram key: id exceeds 2^24");
  k.push_back(static_cast<char>(id & 0xff));
  k.push_back(static_cast<char>((id >> 8) & 0xff));
  k.push_back(static_cast<char>((id >> 16) & 0xff));
}

inline Key pack(std::span<const WordId> ids) {
  Key k;
  k.reserve(ids.size() * 3);
  for (WordId id : ids) append_id(k, id);
  return k;
}

inline std::size_t length(const Key& k) { return k.size() / 3; }

inline WordId id_at(const Key& k, std::size_t i) {
  const auto* p = reinterpret_cast<const unsigned char*>(k.data()) + 3 * i;
  return static_cast<WordId>(p[0]) | (static_cast<WordId>(p[1]) << 8) |
         (static_cast<WordId>(p[2]) << 16);
}

inline WordId last(const Key& k) { return id_at(k, length(k) - 1); }
inline Key prefix(const Key& k) { return k.substr(0, k.size() - 3); }
inline Key suffix(const Key& k) { return k.substr(3); }

inline std::vector<WordId> unpack(const Key& k) {
  std::vector<WordId> ids(length(k));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = id_at(k, i);
  return ids;
}

}  // namespace keys

using keys::Key;

// ----- counting -----

struct CountTable {
  int order = 0;
  // levels[k-1]: k-gram -> occurrence count
  std::vector<std::unordered_map<Key, std::uint64_t>> levels;
  // raw (false) vs continuation-adjusted (true), per level
  std::vector<bool> adjusted;

  std::uint64_t count(const Key& k) const {
    const auto& level = levels.at(keys::length(k) - 1);
    auto it = level.find(k);
    return it == level.end() ? 0 : it->second;
  }
};

// Counts all 1..order-grams. Windows never cross a sentence boundary: a bos
// id starts a new sentence, and every window lies within [bos, w1..wn, eos].
// Unigram totals therefore equal the stream's token count.
inline CountTable count_ngrams(const IdStream& stream, int order,
                               WordId bos_id = Vocabulary::kBosId) {
  if (order < 1) throw std::invalid_argument("count_ngrams: order must be >= 1");
  CountTable table;
  table.order = order;
  table.levels.resize(order);
  table.adjusted.assign(order, false);
  const auto& ids = stream.ids;
  std::size_t sent_start = 0;
  Key window;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == bos_id) sent_start = i;
    const std::size_t max_k =
        std::min<std::size_t>(order, i - sent_start + 1);
    window.clear();
    // build the longest window ending at i, then count its suffixes
    for (std::size_t j = i + 1 - max_k; j <= i; ++j)
      keys::append_id(window, ids[j]);
    for (std::size_t k = max_k; k >= 1; --k) {
      ++table.levels[k - 1][window];
      if (k > 1) window = keys::suffix(window);
    }
  }
  return table;
}

// ----- the estimated model -----

struct ProbEntry {
  double logp10 = 0.0;           // log10 probability
  double bow10 = 0.0;            // log10 backoff weight
  bool has_bow = false;
};

constexpr double kLog10BosProb = -99.0;  // conventional "never predict" mass

// Backoff n-gram model. Probabilities and backoff weights are stored in
// log10 (the textual serialization's native base); queries return natural
// logs. The unigram level is dense over the whole vocabulary.
class NGramModel {
 public:
  NGramModel() = default;
  NGramModel(int order, Vocabulary vocab)
      : order_(order), vocab_(std::move(vocab)) {
    if (order < 1) throw std::invalid_argument("NGramModel: order must be >= 1");
    levels_.resize(order_);
  }

  int order() const { return order_; }
  const Vocabulary& vocab() const { return vocab_; }
  std::vector<std::unordered_map<Key, ProbEntry>>& levels() { return levels_; }
  const std::vector<std::unordered_map<Key, ProbEntry>>& levels() const {
    return levels_;
  }

  const ProbEntry* find(const Key& k) const {
    const std::size_t len = keys::length(k);
    if (len == 0 || len > static_cast<std::size_t>(order_)) return nullptr;
    const auto& level = levels_[len - 1];
    auto it = level.find(k);
    return it == level.end() ? nullptr : &it->second;
  }

  // Builds the query indexes (successor lists, unigram ranking). Must be
  // called after the levels are populated and before shortlist queries; the
  // model is immutable afterwards.
  void finalize() {
    successors_.assign(std::max(0, order_ - 1), {});
    for (int k = 2; k <= order_; ++k) {
      auto& succ = successors_[k - 2];
      for (const auto& [key, entry] : levels_[k - 1])
        succ[keys::prefix(key)].push_back(keys::last(key));
      for (auto& [ctx, words] : succ) std::sort(words.begin(), words.end());
    }
    unigram_desc_.resize(vocab_.size());
    for (WordId w = 0; w < vocab_.size(); ++w) unigram_desc_[w] = w;
    std::vector<double> up(vocab_.size(), -std::numeric_limits<double>::infinity());
    Key k;
    for (WordId w = 0; w < vocab_.size(); ++w) {
      k.clear();
      keys::append_id(k, w);
      if (const ProbEntry* e = find(k)) up[w] = e->logp10;
    }
    std::stable_sort(unigram_desc_.begin(), unigram_desc_.end(),
                     [&](WordId a, WordId b) {
                       if (up[a] != up[b]) return up[a] > up[b];
                       return a < b;
                     });
  }

  // Natural-log probability of `word` after `context` via the backoff chain.
  // Context longer than order-1 is truncated from the left.
  double logprob(std::span<const WordId> context, WordId word) const {
    if (word >= vocab_.size())
      throw DataError("ngram logprob: word id out of range");
    const std::size_t clen =
        std::min<std::size_t>(context.size(), order_ - 1);
    std::span<const WordId> h = context.subspan(context.size() - clen);
    double bow_sum10 = 0.0;
    for (std::size_t use = clen; ; --use) {
      Key k = keys::pack(h.subspan(h.size() - use));
      keys::append_id(k, word);
      if (const ProbEntry* e = find(k))
        return (e->logp10 + bow_sum10) * kLn10;
      if (use == 0) {
        // dense unigram level: every vocab id is stored
        throw DataError("ngram logprob: missing unigram entry");
      }
      Key ctx = keys::pack(h.subspan(h.size() - use));
      if (const ProbEntry* c = find(ctx); c && c->has_bow)
        bow_sum10 += c->bow10;
    }
  }

  double prob(std::span<const WordId> context, WordId word) const {
    return std::exp(logprob(context, word));
  }

  // The k highest-probability words for this context, ties broken by id.
  // Exact: candidates are the stored successors of every context suffix
  // plus the best unigram-ranked non-successor words.
  std::vector<WordId> shortlist(std::span<const WordId> context,
                                std::size_t k) const {
    if (k < 1) throw std::invalid_argument("shortlist: k must be >= 1");
    if (unigram_desc_.empty())
      throw DataError("shortlist: model not finalized");
    const std::size_t clen =
        std::min<std::size_t>(context.size(), order_ - 1);
    std::span<const WordId> h = context.subspan(context.size() - clen);
    std::vector<WordId> cands;
    for (std::size_t use = clen; use >= 1; --use) {
      const auto& succ = successors_[use - 1];
      auto it = succ.find(keys::pack(h.subspan(h.size() - use)));
      if (it != succ.end())
        cands.insert(cands.end(), it->second.begin(), it->second.end());
    }
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    // top-k non-successor words in unigram order dominate the rest
    std::vector<WordId> pool = cands;
    std::size_t taken = 0;
    for (WordId w : unigram_desc_) {
      if (taken >= k) break;
      if (!std::binary_search(cands.begin(), cands.end(), w)) {
        pool.push_back(w);
        ++taken;
      }
    }
    std::vector<std::pair<double, WordId>> scored;
    scored.reserve(pool.size());
    for (WordId w : pool) scored.emplace_back(-logprob(h, w), w);
    const std::size_t kk = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + kk, scored.end());
    std::vector<WordId> out(kk);
    for (std::size_t i = 0; i < kk; ++i) out[i] = scored[i].second;
    return out;
  }

 private:
  static constexpr double kLn10 = 2.302585092994045684;
  int order_ = 0;
  Vocabulary vocab_;
  std::vector<std::unordered_map<Key, ProbEntry>> levels_;
  // successors_[len-1]: context of length len -> sorted successor ids
  std::vector<std::unordered_map<Key, std::vector<WordId>>> successors_;
  std::vector<WordId> unigram_desc_;
};

// ----- interpolated modified Kneser-Ney estimation -----

namespace detail {

struct Discounts {
  double d1 = 0.75, d2 = 0.75, d3 = 0.75;  // for counts 1, 2, >=3
  double of(std::uint64_t c) const {
    if (c == 0) return 0.0;
    if (c == 1) return d1;
    if (c == 2) return d2;
    return d3;
  }
};

// Discounts from count-of-counts (Y = n1/(n1+2 n2); D_r = r - (r+1) Y
// n_{r+1}/n_r). Degenerate statistics fall back to a fixed 0.75.
inline Discounts estimate_discounts(const std::uint64_t n[5], int level,
                                    std::vector<std::string>* warnings) {
  Discounts d;
  const auto degenerate = [&](const char* why) {
    if (warnings)
      warnings->push_back("level " + std::to_string(level) +
                          ": degenerate count-of-counts (" + why +
                          "); using fixed discount 0.75");
    return Discounts{};
  };
  if (n[1] == 0 || n[2] == 0 || n[3] == 0 || n[4] == 0)
    return degenerate("a count-of-count is zero");
  const double y = static_cast<double>(n[1]) / (n[1] + 2.0 * n[2]);
  d.d1 = 1.0 - 2.0 * y * n[2] / n[1];
  d.d2 = 2.0 - 3.0 * y * n[3] / n[2];
  d.d3 = 3.0 - 4.0 * y * n[4] / n[3];
  if (!(d.d1 > 0.0 && d.d1 <= 1.0) || !(d.d2 > 0.0 && d.d2 <= 2.0) ||
      !(d.d3 > 0.0 && d.d3 <= 3.0))
    return degenerate("discount out of range");
  return d;
}

}  // namespace detail

// Computes continuation-adjusted counts: the top level keeps raw counts; a
// lower-level k-gram's adjusted count is the number of distinct left
// extensions observed at level k+1, except bos-initial k-grams, which keep
// their raw counts (they cannot be extended to the left).
inline CountTable adjust_counts(const CountTable& raw,
                                WordId bos_id = Vocabulary::kBosId) {
  CountTable adj;
  adj.order = raw.order;
  adj.levels.resize(raw.order);
  adj.adjusted.assign(raw.order, true);
  adj.levels[raw.order - 1] = raw.levels[raw.order - 1];
  adj.adjusted[raw.order - 1] = false;
  for (int k = raw.order - 1; k >= 1; --k) {
    auto& out = adj.levels[k - 1];
    for (const auto& [key, c] : adj.levels[k])
      ++out[keys::suffix(key)];
    for (const auto& [key, c] : raw.levels[k - 1])
      if (keys::id_at(key, 0) == bos_id) out[key] = c;
  }
  return adj;
}

// Interpolated modified Kneser-Ney. The unigram distribution covers every
// vocabulary id except bos (which gets the conventional -99 log10 mass) and
// interpolates with the uniform distribution over those V-1 words; higher
// levels interpolate with the next level down. Backoff weights equal the
// interpolation weights, so the serialized backoff model reproduces the
// interpolated probabilities exactly.
inline NGramModel estimate_kn(const CountTable& raw_counts,
                              const Vocabulary& vocab,
                              std::vector<std::string>* warnings = nullptr) {
  const int order = raw_counts.order;
  if (order < 1) throw std::invalid_argument("estimate_kn: empty count table");
  if (raw_counts.levels[0].empty())
    throw DataError("estimate_kn: no unigram counts");
  const WordId bos = vocab.bos_id();
  const std::size_t v_pred = vocab.size() - 1;  // predictable words
  NGramModel model(order, vocab);
  const CountTable adj = adjust_counts(raw_counts, bos);

  // per-level discounts from that level's count-of-counts
  std::vector<detail::Discounts> disc(order + 1);
  for (int k = 1; k <= order; ++k) {
    std::uint64_t n[5] = {0, 0, 0, 0, 0};
    for (const auto& [key, c] : adj.levels[k - 1]) {
      if (k == 1 && keys::id_at(key, 0) == bos) continue;
      if (c >= 1 && c <= 4) ++n[c];
    }
    disc[k] = detail::estimate_discounts(n, k, warnings);
  }

  // unigram level: p(w) = (a(w) - D(a(w)))/A + gamma * 1/(V-1) over w != bos
  std::vector<double> p_uni(vocab.size(), 0.0);
  {
    double total = 0.0, discounted = 0.0;
    Key k;
    std::vector<std::uint64_t> a(vocab.size(), 0);
    for (const auto& [key, c] : adj.levels[0]) {
      const WordId w = keys::id_at(key, 0);
      if (w == bos) continue;
      a[w] = c;
      total += static_cast<double>(c);
      discounted += disc[1].of(c);
    }
    if (total <= 0.0) throw DataError("estimate_kn: no predictable unigrams");
    const double gamma = discounted / total;
    for (WordId w = 0; w < vocab.size(); ++w) {
      if (w == bos) continue;
      const double c = static_cast<double>(a[w]);
      p_uni[w] = std::max(c - disc[1].of(a[w]), 0.0) / total +
                 gamma / static_cast<double>(v_pred);
    }
    auto& level = model.levels()[0];
    for (WordId w = 0; w < vocab.size(); ++w) {
      ProbEntry e;
      e.logp10 = (w == bos) ? kLog10BosProb : std::log10(p_uni[w]);
      level.emplace(keys::pack(std::span<const WordId>(&w, 1)), e);
    }
  }

  // higher levels, bottom-up; lower-level interpolated p looked up by key
  std::vector<std::unordered_map<Key, double>> p_level(order);
  for (WordId w = 0; w < vocab.size(); ++w)
    p_level[0].emplace(keys::pack(std::span<const WordId>(&w, 1)), p_uni[w]);

  for (int k = 2; k <= order; ++k) {
    struct CtxStat {
      double total = 0.0;
      double discounted = 0.0;
    };
    std::unordered_map<Key, CtxStat> ctx;
    for (const auto& [key, c] : adj.levels[k - 1]) {
      auto& s = ctx[keys::prefix(key)];
      s.total += static_cast<double>(c);
      s.discounted += disc[k].of(c);
    }
    auto& level = model.levels()[k - 1];
    for (const auto& [key, c] : adj.levels[k - 1]) {
      const Key h = keys::prefix(key);
      const auto& s = ctx.at(h);
      const double gamma = s.discounted / s.total;
      const double p_low = p_level[k - 2].at(keys::suffix(key));
      const double p =
          std::max(static_cast<double>(c) - disc[k].of(c), 0.0) / s.total +
          gamma * p_low;
      p_level[k - 1].emplace(key, p);
      ProbEntry e;
      e.logp10 = std::log10(p);
      level.emplace(key, e);
    }
    // interpolation weights become the contexts' backoff weights
    for (const auto& [h, s] : ctx) {
      auto& e = model.levels()[k - 2].at(h);
      e.bow10 = std::log10(s.discounted / s.total);
      e.has_bow = true;
    }
    p_level[k - 2].clear();
  }
  model.finalize();
  return model;
}

// ----- perplexity -----

struct PerplexityResult {
  double perplexity = 0.0;
  double total_logprob = 0.0;  // natural log
  std::size_t predicted = 0;   // tokens scored (eos yes, bos no)
};

// Accumulates ln p over the stream with the context reset at each bos; bos
// is never a predicted target, eos always is.
template <class ScoreFn>
PerplexityResult stream_perplexity(const IdStream& stream, WordId bos_id,
                                   int max_context, ScoreFn&& score) {
  PerplexityResult r;
  std::vector<WordId> ctx;
  for (WordId id : stream.ids) {
    if (id == bos_id) {
      ctx.assign(1, id);
      continue;
    }
    r.total_logprob += score(std::span<const WordId>(ctx), id);
    ++r.predicted;
    ctx.push_back(id);
    if (max_context >= 0 &&
        ctx.size() > static_cast<std::size_t>(max_context))
      ctx.erase(ctx.begin(), ctx.end() - max_context);
  }
  if (r.predicted == 0)
    throw std::invalid_argument("perplexity: no predicted tokens");
  r.perplexity =
      std::exp(-r.total_logprob / static_cast<double>(r.predicted));
  return r;
}

inline PerplexityResult ngram_perplexity_full(const NGramModel& model,
                                              const IdStream& stream) {
  return stream_perplexity(
      stream, model.vocab().bos_id(), model.order() - 1,
      [&](std::span<const WordId> ctx, WordId w) {
        return model.logprob(ctx, w);
      });
}

inline double ngram_perplexity(const NGramModel& model,
                               const IdStream& stream) {
  return ngram_perplexity_full(model, stream).perplexity;
}

// ----- pruning -----

namespace detail {

// Recomputes a context's backoff weight after its stored probability mass
// changed: bow = (1 - sum stored p) / (1 - sum lower-model p of the same
// words). A vanishing denominator clamps to weight 1.
inline void recompute_bows(NGramModel& model) {
  for (int k = 2; k <= model.order(); ++k) {
    std::unordered_map<Key, std::pair<double, double>> sums;  // ctx -> (hi, lo)
    for (const auto& [key, e] : model.levels()[k - 1]) {
      const Key h = keys::prefix(key);
      const WordId w = keys::last(key);
      const std::vector<WordId> tail = keys::unpack(keys::suffix(h));
      auto& s = sums[h];
      s.first += std::pow(10.0, e.logp10);
      s.second += std::exp(model.logprob(tail, w));
    }
    for (auto& [h, e] : model.levels()[k - 2]) {
      auto it = sums.find(h);
      if (it == sums.end()) {
        e.has_bow = false;
        e.bow10 = 0.0;
        continue;
      }
      const double num = 1.0 - it->second.first;
      const double den = 1.0 - it->second.second;
      e.has_bow = true;
      e.bow10 = (den < 1e-12 || num <= 0.0) ? 0.0 : std::log10(num / den);
    }
  }
}

}  // namespace detail

enum class PruneMode { kMinCount, kMinLogp10 };

// Removes n-grams (never unigrams) below the threshold: raw count <
// threshold in kMinCount mode (requires the raw counts), or stored log10
// probability < threshold in kMinLogp10 mode. A gram survives regardless of
// its own score while it has surviving extensions, so every stored context
// remains reachable. Backoff weights are recomputed so that every context
// still sums to one.
inline NGramModel prune(const NGramModel& model, PruneMode mode,
                        double threshold,
                        const CountTable* raw_counts = nullptr) {
  if (mode == PruneMode::kMinCount && raw_counts == nullptr)
    throw std::invalid_argument("prune: count mode requires the count table");
  NGramModel out(model.order(), model.vocab());
  out.levels()[0] = model.levels()[0];
  // top-down so each level knows which grams must survive as contexts of
  // the (already pruned) level above
  std::vector<std::unordered_map<Key, ProbEntry>> kept(model.order());
  std::unordered_set<Key> needed_ctx;
  std::size_t removed = 0;
  for (int k = model.order(); k >= 2; --k) {
    for (const auto& [key, e] : model.levels()[k - 1]) {
      const bool below =
          mode == PruneMode::kMinCount
              ? static_cast<double>(raw_counts->count(key)) < threshold
              : e.logp10 < threshold;
      if (!below || needed_ctx.count(key) != 0)
        kept[k - 1].emplace(key, e);
      else
        ++removed;
    }
    needed_ctx.clear();
    for (const auto& [key, e] : kept[k - 1])
      needed_ctx.insert(keys::prefix(key));
  }
  for (int k = 2; k <= model.order(); ++k)
    out.levels()[k - 1] = std::move(kept[k - 1]);
  if (removed > 0) detail::recompute_bows(out);
  out.finalize();
  return out;
}

}  // namespace desklm

#endif  // DESKLM_NGRAM_HPP
