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

#ifndef DESKLM_EVAL_HPP
#define DESKLM_EVAL_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/mat.hpp"
#include "desklm/ngram.hpp"
#include "desklm/rnn.hpp"
#include "desklm/util.hpp"

namespace desklm {

namespace detail {

// States are scored in banks of this many columns so the output matrix is
// streamed once per bank rather than once per state.
constexpr std::int64_t kScoreBank = 64;

// log-sum-exp of column c of a (V x B) transposed score matrix, in double.
template <class Real>
inline double lse_column(const Mat<Real>& st, std::int64_t c) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t w = 0; w < st.rows; ++w)
    mx = std::max(mx, static_cast<double>(st.at(w, c)));
  double z = 0.0;
  for (std::int64_t w = 0; w < st.rows; ++w)
    z += std::exp(static_cast<double>(st.at(w, c)) - mx);
  return mx + std::log(z);
}

template <class Real>
inline Mat<Real> trim_rows(const Mat<Real>& m, std::int64_t rows) {
  Mat<Real> out(rows, m.cols);
  std::memcpy(out.a.data(), m.a.data(),
              static_cast<std::size_t>(rows * m.cols) * sizeof(Real));
  return out;
}

inline double parse_double(const std::string& tok, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || tok.empty())
    throw ParseError("expected a number, got '" + tok + "'", line);
  return v;
}

}  // namespace detail

// ----- exact-softmax perplexity of a recurrent model -----

// Single-pass perplexity: the hidden state starts at act(0), persists across
// sentence boundaries, and is reset only at the start of the stream. Every
// token is consumed as input; bos is never a predicted target. States are
// banked and scored with the transposed kernel, which leaves the numbers
// identical to scoring one state at a time.
template <class Adapter>
PerplexityResult rnn_perplexity(const Adapter& model, const IdStream& stream,
                                WordId bos_id = Vocabulary::kBosId,
                                int threads = 1) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  const auto& ids = stream.ids;
  if (ids.size() < 2)
    throw std::invalid_argument("rnn perplexity: stream too short");
  const std::int64_t H = model.hidden(), V = model.vocab();
  const Real a0 = activate(model.activation(), Real(0));
  Mat<Real> h(1, H), pre(1, H);
  h.fill(a0);
  Mat<Real> bank(detail::kScoreBank, H);
  std::vector<WordId> bank_tgt(detail::kScoreBank);
  Mat<Real> scores_t(V, detail::kScoreBank);
  std::int64_t used = 0;
  PerplexityResult r;

  auto flush = [&] {
    if (used == 0) return;
    const bool full = used == detail::kScoreBank;
    const Mat<Real> trimmed =
        full ? Mat<Real>() : detail::trim_rows(bank, used);
    const Mat<Real>& states = full ? bank : trimmed;
    Mat<Real> st_part;
    if (!full) st_part = Mat<Real>(V, used);
    Mat<Real>& st = full ? scores_t : st_part;
    typename Adapter::OutCtx octx{};
    model.out_begin(states, octx, threads);
    model.softmax_scores_t(octx, states, st, threads);
    for (std::int64_t c = 0; c < used; ++c) {
      const double lse = detail::lse_column(st, c);
      r.total_logprob += static_cast<double>(st.at(bank_tgt[c], c)) - lse;
      ++r.predicted;
    }
    used = 0;
  };

  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    if (ids[i] >= static_cast<WordId>(V) ||
        ids[i + 1] >= static_cast<WordId>(V))
      throw DataError("rnn perplexity: id out of vocabulary range");
    matmul_nt<Acc>(h, model.w_rec(), pre, false, threads);
    model.input_forward(std::span<const WordId>(&ids[i], 1), pre, threads);
    Real* hh = h.row(0);
    const Real* pp = pre.row(0);
    for (std::int64_t j = 0; j < H; ++j)
      hh[j] = activate(model.activation(), pp[j]);
    const WordId y = ids[i + 1];
    if (y == bos_id) continue;
    std::memcpy(bank.row(used), h.row(0),
                static_cast<std::size_t>(H) * sizeof(Real));
    bank_tgt[static_cast<std::size_t>(used)] = y;
    if (++used == detail::kScoreBank) flush();
  }
  flush();
  if (r.predicted == 0)
    throw std::invalid_argument("rnn perplexity: no predicted tokens");
  r.perplexity = std::exp(-r.total_logprob / static_cast<double>(r.predicted));
  return r;
}

// Sharded variant: the stream is cut into `shards` nearly equal slices
// evaluated in lockstep as one batch, with the hidden state reset at each
// slice boundary. Slightly different from the single-pass number (each slice
// restarts cold) but far faster; intended for per-epoch validation.
template <class Adapter>
PerplexityResult sharded_perplexity(const Adapter& model,
                                    const IdStream& stream, int shards,
                                    WordId bos_id = Vocabulary::kBosId,
                                    int threads = 1) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  const auto& ids = stream.ids;
  if (ids.size() < 2)
    throw std::invalid_argument("sharded perplexity: stream too short");
  if (shards < 1)
    throw std::invalid_argument("sharded perplexity: shards must be >= 1");
  const std::int64_t n = static_cast<std::int64_t>(ids.size());
  const std::int64_t S = std::min<std::int64_t>(shards, n / 2);
  std::vector<std::int64_t> begin(S + 1);
  for (std::int64_t s = 0; s <= S; ++s) begin[s] = s * n / S;
  std::int64_t max_len = 0;
  for (std::int64_t s = 0; s < S; ++s)
    max_len = std::max(max_len, begin[s + 1] - begin[s]);

  const std::int64_t H = model.hidden(), V = model.vocab();
  const Real a0 = activate(model.activation(), Real(0));
  Mat<Real> h(S, H), pre(S, H), scores_t(V, S);
  h.fill(a0);
  std::vector<WordId> in(S, 0);
  std::vector<std::int64_t> tgt(S, -1);
  PerplexityResult r;
  for (std::int64_t j = 0; j + 1 < max_len; ++j) {
    bool any = false;
    for (std::int64_t s = 0; s < S; ++s) {
      const std::int64_t len = begin[s + 1] - begin[s];
      if (j + 1 < len) {
        const WordId x = ids[static_cast<std::size_t>(begin[s] + j)];
        const WordId y = ids[static_cast<std::size_t>(begin[s] + j + 1)];
        if (x >= static_cast<WordId>(V) || y >= static_cast<WordId>(V))
          throw DataError("sharded perplexity: id out of vocabulary range");
        in[static_cast<std::size_t>(s)] = x;
        tgt[static_cast<std::size_t>(s)] =
            y == bos_id ? std::int64_t{-1} : static_cast<std::int64_t>(y);
      } else {
        in[static_cast<std::size_t>(s)] = 0;
        tgt[static_cast<std::size_t>(s)] = -1;
      }
      any = any || tgt[static_cast<std::size_t>(s)] >= 0;
    }
    matmul_nt<Acc>(h, model.w_rec(), pre, false, threads);
    model.input_forward(in, pre, threads);
    for (std::int64_t s = 0; s < S; ++s) {
      Real* hh = h.row(s);
      const Real* pp = pre.row(s);
      for (std::int64_t i = 0; i < H; ++i)
        hh[i] = activate(model.activation(), pp[i]);
    }
    if (!any) continue;
    typename Adapter::OutCtx octx{};
    model.out_begin(h, octx, threads);
    model.softmax_scores_t(octx, h, scores_t, threads);
    for (std::int64_t s = 0; s < S; ++s) {
      if (tgt[static_cast<std::size_t>(s)] < 0) continue;
      const double lse = detail::lse_column(scores_t, s);
      r.total_logprob +=
          static_cast<double>(
              scores_t.at(tgt[static_cast<std::size_t>(s)], s)) -
          lse;
      ++r.predicted;
    }
  }
  if (r.predicted == 0)
    throw std::invalid_argument("sharded perplexity: no predicted tokens");
  r.perplexity = std::exp(-r.total_logprob / static_cast<double>(r.predicted));
  return r;
}

// ----- interpolation of a recurrent model with a backoff n-gram model -----

// Word-level correspondence between a recurrent model's vocabulary and the
// (super)vocabulary of an n-gram model. Every recurrent-model word must be
// present in the n-gram vocabulary. The recurrent model's unk entry stands
// for everything it cannot name, so for prediction the unk word itself is
// treated as outside the mapped set and shares the redistributed unk mass.
struct VocabMap {
  std::vector<std::int64_t> full_to_rnn;  // n-gram id -> rnn id, or -1
  std::vector<WordId> rnn_to_full;        // rnn id -> n-gram id
  std::vector<WordId> oor_ids;  // n-gram ids outside the mapped set (+ unk)
  WordId rnn_unk = 0;
};

inline VocabMap make_vocab_map(const Vocabulary& rnn_vocab,
                               const Vocabulary& full_vocab) {
  VocabMap m;
  m.rnn_unk = rnn_vocab.unk_id();
  m.full_to_rnn.assign(full_vocab.size(), -1);
  m.rnn_to_full.resize(rnn_vocab.size());
  for (WordId r = 0; r < rnn_vocab.size(); ++r) {
    const std::string& w = rnn_vocab.words()[r];
    if (!full_vocab.contains(w))
      throw DataError("vocabulary map: word '" + w +
                      "' missing from the n-gram vocabulary");
    const WordId f = full_vocab.id_or_unk(w);
    m.rnn_to_full[r] = f;
    m.full_to_rnn[f] = static_cast<std::int64_t>(r);
  }
  for (WordId f = 0; f < full_vocab.size(); ++f)
    if (m.full_to_rnn[f] < 0 || f == full_vocab.unk_id())
      m.oor_ids.push_back(f);
  return m;
}

// Mixes one full-vocabulary distribution from per-model distributions:
//   mapped w (not unk):  lambda * p_rnn(w') + (1-lambda) * p_ngram(w)
//   everything else:     lambda * p_rnn(unk) * p_ngram(w)/Z + (1-lambda) * p_ngram(w)
// with Z the n-gram mass of the unmapped words, so the result sums to one
// whenever the inputs do.
inline std::vector<double> interpolate_distribution(
    std::span<const double> p_rnn, std::span<const double> p_ngram,
    const VocabMap& map, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("interpolate: lambda must be in [0, 1]");
  if (p_rnn.size() != map.rnn_to_full.size() ||
      p_ngram.size() != map.full_to_rnn.size())
    throw std::invalid_argument("interpolate: distribution size mismatch");
  double z_out = 0.0;
  for (WordId f : map.oor_ids) z_out += p_ngram[f];
  const double unk_mass = p_rnn[map.rnn_unk];
  std::vector<double> out(p_ngram.size());
  for (std::size_t f = 0; f < p_ngram.size(); ++f) {
    const std::int64_t r = map.full_to_rnn[f];
    if (r >= 0 && static_cast<WordId>(r) != map.rnn_unk)
      out[f] = lambda * p_rnn[static_cast<std::size_t>(r)] +
               (1.0 - lambda) * p_ngram[f];
    else
      out[f] = lambda * unk_mass * (z_out > 0.0 ? p_ngram[f] / z_out : 0.0) +
               (1.0 - lambda) * p_ngram[f];
  }
  return out;
}

// One scored position, cached so that different lambdas can be evaluated
// without rerunning either model: p(lambda) = lambda*a + (1-lambda)*b.
struct InterpTerm {
  double a = 0.0;
  double b = 0.0;
};

// Runs both models over the stream (encoded under the n-gram vocabulary)
// once and caches the two mixture components per predicted position.
template <class Adapter>
std::vector<InterpTerm> interpolation_terms(const Adapter& rnn,
                                            const VocabMap& map,
                                            const NGramModel& ngram,
                                            const IdStream& stream,
                                            int threads = 1) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  const auto& ids = stream.ids;
  if (ids.size() < 2)
    throw std::invalid_argument("interpolation: stream too short");
  if (map.full_to_rnn.size() != ngram.vocab().size())
    throw std::invalid_argument("interpolation: map/vocabulary mismatch");
  if (static_cast<std::int64_t>(map.rnn_to_full.size()) != rnn.vocab())
    throw std::invalid_argument("interpolation: map/model mismatch");
  const WordId bos = ngram.vocab().bos_id();
  const std::int64_t H = rnn.hidden(), V = rnn.vocab();
  const Real a0 = activate(rnn.activation(), Real(0));
  Mat<Real> h(1, H), pre(1, H);
  h.fill(a0);

  struct Pending {
    std::int64_t rnn_target;  // -1: redistribute via unk
    double pn_target;
    double z_out;
  };
  Mat<Real> bank(detail::kScoreBank, H);
  std::vector<Pending> bank_info(detail::kScoreBank);
  Mat<Real> scores_t(V, detail::kScoreBank);
  std::int64_t used = 0;
  std::vector<InterpTerm> terms;
  terms.reserve(ids.size());

  auto flush = [&] {
    if (used == 0) return;
    const bool full = used == detail::kScoreBank;
    const Mat<Real> trimmed =
        full ? Mat<Real>() : detail::trim_rows(bank, used);
    const Mat<Real>& states = full ? bank : trimmed;
    Mat<Real> st_part;
    if (!full) st_part = Mat<Real>(V, used);
    Mat<Real>& st = full ? scores_t : st_part;
    typename Adapter::OutCtx octx{};
    rnn.out_begin(states, octx, threads);
    rnn.softmax_scores_t(octx, states, st, threads);
    for (std::int64_t c = 0; c < used; ++c) {
      const Pending& pd = bank_info[static_cast<std::size_t>(c)];
      const double lse = detail::lse_column(st, c);
      InterpTerm t;
      t.b = pd.pn_target;
      if (pd.rnn_target >= 0) {
        t.a = std::exp(static_cast<double>(st.at(pd.rnn_target, c)) - lse);
      } else {
        const double p_unk =
            std::exp(static_cast<double>(st.at(map.rnn_unk, c)) - lse);
        t.a = pd.z_out > 0.0 ? p_unk * pd.pn_target / pd.z_out : 0.0;
      }
      terms.push_back(t);
    }
    used = 0;
  };

  std::vector<WordId> ctx;
  const std::size_t max_ctx = static_cast<std::size_t>(ngram.order() - 1);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const WordId x = ids[i];
    if (x >= ngram.vocab().size())
      throw DataError("interpolation: id out of vocabulary range");
    // advance the recurrent model with the mapped input (unk when unmapped)
    const std::int64_t xr = map.full_to_rnn[x];
    const WordId x_rnn =
        xr >= 0 ? static_cast<WordId>(xr) : map.rnn_unk;
    matmul_nt<Acc>(h, rnn.w_rec(), pre, false, threads);
    rnn.input_forward(std::span<const WordId>(&x_rnn, 1), pre, threads);
    Real* hh = h.row(0);
    const Real* pp = pre.row(0);
    for (std::int64_t j = 0; j < H; ++j)
      hh[j] = activate(rnn.activation(), pp[j]);
    // advance the n-gram context
    if (x == bos)
      ctx.assign(1, x);
    else {
      ctx.push_back(x);
      if (ctx.size() > max_ctx && max_ctx > 0)
        ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(max_ctx));
    }
    const WordId y = ids[i + 1];
    if (y == bos) continue;
    Pending pd;
    pd.pn_target = std::exp(ngram.logprob(ctx, y));
    const std::int64_t yr = map.full_to_rnn[y];
    if (yr >= 0 && static_cast<WordId>(yr) != map.rnn_unk) {
      pd.rnn_target = yr;
      pd.z_out = 0.0;
    } else {
      pd.rnn_target = -1;
      pd.z_out = 0.0;
      for (WordId f : map.oor_ids) pd.z_out += std::exp(ngram.logprob(ctx, f));
    }
    std::memcpy(bank.row(used), h.row(0),
                static_cast<std::size_t>(H) * sizeof(Real));
    bank_info[static_cast<std::size_t>(used)] = pd;
    if (++used == detail::kScoreBank) flush();
  }
  flush();
  if (terms.empty())
    throw std::invalid_argument("interpolation: no predicted tokens");
  return terms;
}

inline PerplexityResult interp_perplexity_at(std::span<const InterpTerm> terms,
                                             double lambda) {
  if (terms.empty())
    throw std::invalid_argument("interpolation: no cached terms");
  PerplexityResult r;
  for (const InterpTerm& t : terms) {
    const double p = lambda * t.a + (1.0 - lambda) * t.b;
    if (!(p > 0.0)) throw DataError("interpolation: non-positive mixture");
    r.total_logprob += std::log(p);
  }
  r.predicted = terms.size();
  r.perplexity = std::exp(-r.total_logprob / static_cast<double>(r.predicted));
  return r;
}

// Golden-section minimization of perplexity over lambda in [0, 1]. The
// log-likelihood is concave in lambda, so the minimum is unique.
inline double tune_lambda(std::span<const InterpTerm> terms,
                          double* best_ppl = nullptr) {
  const double inv_phi = 0.6180339887498949;
  double lo = 0.0, hi = 1.0;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double f1 = interp_perplexity_at(terms, x1).perplexity;
  double f2 = interp_perplexity_at(terms, x2).perplexity;
  for (int it = 0; it < 120 && hi - lo > 1e-10; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = interp_perplexity_at(terms, x1).perplexity;
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = interp_perplexity_at(terms, x2).perplexity;
    }
  }
  const double lambda = 0.5 * (lo + hi);
  if (best_ppl != nullptr)
    *best_ppl = interp_perplexity_at(terms, lambda).perplexity;
  return lambda;
}

template <class Adapter>
PerplexityResult interpolated_perplexity(const Adapter& rnn,
                                         const VocabMap& map,
                                         const NGramModel& ngram,
                                         const IdStream& stream, double lambda,
                                         int threads = 1) {
  return interp_perplexity_at(interpolation_terms(rnn, map, ngram, stream, threads),
                              lambda);
}

// ----- shortlist hit rate -----

struct HitRateResult {
  std::size_t positions = 0;
  std::size_t hits = 0;
  double rate() const {
    return positions == 0 ? 0.0
                          : static_cast<double>(hits) /
                                static_cast<double>(positions);
  }
};

// Scores shortlist candidates with a recurrent model's raw (unnormalized)
// output scores. The stream must be encoded under the model's vocabulary.
template <class Adapter>
class RnnHitScorer {
 public:
  explicit RnnHitScorer(const Adapter& model, int threads = 1)
      : model_(model),
        threads_(threads),
        h_(1, model.hidden()),
        pre_(1, model.hidden()) {
    h_.fill(activate(model.activation(), typename Adapter::RealT(0)));
  }

  void advance(WordId w) {
    using Acc = typename Adapter::AccT;
    matmul_nt<Acc>(h_, model_.w_rec(), pre_, false, threads_);
    model_.input_forward(std::span<const WordId>(&w, 1), pre_, threads_);
    auto* hh = h_.row(0);
    const auto* pp = pre_.row(0);
    for (std::int64_t j = 0; j < model_.hidden(); ++j)
      hh[j] = activate(model_.activation(), pp[j]);
  }

  void score(std::span<const WordId> cands, std::span<double> out) {
    typename Adapter::OutCtx octx{};
    model_.out_begin(h_, octx, threads_);
    for (std::size_t i = 0; i < cands.size(); ++i)
      out[i] = static_cast<double>(model_.score(octx, h_, 0, cands[i]));
  }

 private:
  const Adapter& model_;
  int threads_;
  Mat<typename Adapter::RealT> h_;
  Mat<typename Adapter::RealT> pre_;
};

// Scores shortlist candidates with a backoff n-gram model's log probability.
class NgramHitScorer {
 public:
  explicit NgramHitScorer(const NGramModel& model,
                          WordId bos_id = Vocabulary::kBosId)
      : model_(model), bos_(bos_id) {}

  void advance(WordId w) {
    if (w == bos_)
      ctx_.assign(1, w);
    else {
      ctx_.push_back(w);
      const auto cap = static_cast<std::size_t>(model_.order() - 1);
      if (cap > 0 && ctx_.size() > cap)
        ctx_.erase(ctx_.begin(), ctx_.end() - static_cast<std::ptrdiff_t>(cap));
    }
  }

  void score(std::span<const WordId> cands, std::span<double> out) {
    for (std::size_t i = 0; i < cands.size(); ++i)
      out[i] = model_.logprob(ctx_, cands[i]);
  }

 private:
  const NGramModel& model_;
  WordId bos_;
  std::vector<WordId> ctx_;
};

// Fraction of predicted positions whose target lands in the top `top_k` of
// the shortlist (size `shortlist_k`, drawn from the given backoff model)
// after reranking by the scorer. A target missing from the shortlist counts
// as a miss. Ranking ties break toward the smaller id.
template <class Scorer>
HitRateResult hit_rate(const IdStream& stream,
                       const NGramModel& shortlist_model,
                       std::size_t shortlist_k, std::size_t top_k,
                       Scorer& scorer, WordId bos_id = Vocabulary::kBosId) {
  if (top_k < 1 || shortlist_k < top_k)
    throw std::invalid_argument("hit rate: need 1 <= top_k <= shortlist_k");
  const auto& ids = stream.ids;
  if (ids.size() < 2)
    throw std::invalid_argument("hit rate: stream too short");
  HitRateResult r;
  std::vector<WordId> ctx;
  const auto cap = static_cast<std::size_t>(shortlist_model.order() - 1);
  std::vector<double> scores;
  std::vector<std::pair<double, WordId>> ranked;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
    const WordId x = ids[i];
    scorer.advance(x);
    if (x == bos_id)
      ctx.assign(1, x);
    else {
      ctx.push_back(x);
      if (cap > 0 && ctx.size() > cap)
        ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(cap));
    }
    const WordId y = ids[i + 1];
    if (y == bos_id) continue;
    ++r.positions;
    const std::vector<WordId> sl = shortlist_model.shortlist(ctx, shortlist_k);
    if (std::find(sl.begin(), sl.end(), y) == sl.end()) continue;
    scores.resize(sl.size());
    scorer.score(sl, scores);
    ranked.clear();
    for (std::size_t j = 0; j < sl.size(); ++j)
      ranked.emplace_back(-scores[j], sl[j]);
    const std::size_t kk = std::min(top_k, ranked.size());
    std::partial_sort(ranked.begin(),
                      ranked.begin() + static_cast<std::ptrdiff_t>(kk),
                      ranked.end());
    for (std::size_t j = 0; j < kk; ++j)
      if (ranked[j].second == y) {
        ++r.hits;
        break;
      }
  }
  if (r.positions == 0)
    throw std::invalid_argument("hit rate: no predicted tokens");
  return r;
}

// ----- n-best rescoring -----

struct NBestHyp {
  double acoustic = 0.0;
  double old_lm = 0.0;
  std::vector<std::string> words;
  double new_lm = 0.0;
  double new_total = 0.0;
  std::size_t rank = 0;
};

struct NBestUtt {
  std::string id;
  std::vector<NBestHyp> hyps;
};

// Reads `utt-id<TAB>acoustic<TAB>old-lm<TAB>w1 w2 ...` lines; consecutive
// lines with the same utt-id form one utterance. Blank lines are skipped.
inline std::vector<NBestUtt> read_nbest(std::istream& is) {
  std::vector<NBestUtt> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == '\t') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    // 3 fields: empty hypothesis; 4: with words; 7: a previously rescored
    // file whose new-lm/new-total/rank annotations are discarded on read.
    if (fields.size() != 3 && fields.size() != 4 && fields.size() != 7)
      throw ParseError("expected 3, 4, or 7 tab-separated fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    if (fields[0].empty()) throw ParseError("empty utterance id", line_no);
    NBestHyp h;
    h.acoustic = detail::parse_double(fields[1], line_no);
    h.old_lm = detail::parse_double(fields[2], line_no);
    if (fields.size() >= 4) {
      std::string w;
      for (char ch : fields[3]) {
        if (ch == ' ') {
          if (!w.empty()) h.words.push_back(std::move(w));
          w.clear();
        } else {
          w.push_back(ch);
        }
      }
      if (!w.empty()) h.words.push_back(std::move(w));
    }
    if (utts.empty() || utts.back().id != fields[0]) {
      utts.push_back(NBestUtt{fields[0], {}});
    }
    utts.back().hyps.push_back(std::move(h));
  }
  return utts;
}

// Writes hypotheses in their current order with the rescoring columns
// appended: `utt-id acoustic old-lm words new-lm new-total rank` (tabs).
inline void write_nbest(std::ostream& os, const std::vector<NBestUtt>& utts) {
  char buf[64];
  const auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return std::string(buf);
  };
  for (const NBestUtt& u : utts) {
    for (const NBestHyp& h : u.hyps) {
      os << u.id << '\t' << num(h.acoustic) << '\t' << num(h.old_lm) << '\t';
      for (std::size_t i = 0; i < h.words.size(); ++i) {
        if (i > 0) os << ' ';
        os << h.words[i];
      }
      os << '\t' << num(h.new_lm) << '\t' << num(h.new_total) << '\t'
         << h.rank << '\n';
    }
  }
}

struct RescoreConfig {
  double lambda = 0.5;    // mixture weight on the recurrent model
  double lm_scale = 1.0;  // weight of the language-model score
  double wip = 0.0;       // per-word insertion bonus
  bool fast = false;      // raw scores as if normalized (skips the softmax)
  int threads = 1;
};

// Rescores hypotheses with the recurrent model, optionally interpolated
// with a backoff n-gram model, and sorts each utterance by
//   new_total = acoustic + lm_scale * ln p(sentence) + wip * |words|.
// The hidden state restarts for every hypothesis. In fast mode the
// recurrent probability is exp(raw score), trusting the training-time
// normalization instead of computing the softmax.
template <class Adapter>
void rescore_nbest(std::vector<NBestUtt>& utts, const Adapter& rnn,
                   const Vocabulary& rnn_vocab, const NGramModel* ngram,
                   const RescoreConfig& cfg) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  if (static_cast<std::int64_t>(rnn_vocab.size()) != rnn.vocab())
    throw std::invalid_argument("rescore: vocabulary/model size mismatch");
  if (cfg.lambda < 0.0 || cfg.lambda > 1.0)
    throw std::invalid_argument("rescore: lambda must be in [0, 1]");
  const Vocabulary& enc_vocab = ngram != nullptr ? ngram->vocab() : rnn_vocab;
  VocabMap map;
  if (ngram != nullptr) map = make_vocab_map(rnn_vocab, ngram->vocab());
  const std::int64_t H = rnn.hidden(), V = rnn.vocab();
  const Real a0 = activate(rnn.activation(), Real(0));
  Mat<Real> h(1, H), pre(1, H), scores_t(V, 1);

  for (NBestUtt& u : utts) {
    for (NBestHyp& hyp : u.hyps) {
      std::vector<WordId> ids;
      ids.reserve(hyp.words.size() + 2);
      ids.push_back(enc_vocab.bos_id());
      for (const std::string& w : hyp.words)
        ids.push_back(enc_vocab.id_or_unk(w));
      ids.push_back(enc_vocab.eos_id());

      h.fill(a0);
      std::vector<WordId> ctx;
      double lp = 0.0;
      for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        const WordId x = ids[i];
        const WordId y = ids[i + 1];
        WordId x_rnn = x;
        if (ngram != nullptr) {
          const std::int64_t xr = map.full_to_rnn[x];
          x_rnn = xr >= 0 ? static_cast<WordId>(xr) : map.rnn_unk;
        }
        matmul_nt<Acc>(h, rnn.w_rec(), pre, false, cfg.threads);
        rnn.input_forward(std::span<const WordId>(&x_rnn, 1), pre,
                          cfg.threads);
        Real* hh = h.row(0);
        const Real* pp = pre.row(0);
        for (std::int64_t j = 0; j < H; ++j)
          hh[j] = activate(rnn.activation(), pp[j]);

        typename Adapter::OutCtx octx{};
        rnn.out_begin(h, octx, cfg.threads);
        double lse = 0.0;
        if (!cfg.fast) {
          rnn.softmax_scores_t(octx, h, scores_t, cfg.threads);
          lse = detail::lse_column(scores_t, 0);
        }
        const auto p_rnn_of = [&](WordId w_rnn) {
          const double s =
              cfg.fast
                  ? static_cast<double>(rnn.score(octx, h, 0, w_rnn))
                  : static_cast<double>(scores_t.at(w_rnn, 0));
          return std::exp(s - lse);
        };
        if (ngram == nullptr) {
          lp += std::log(p_rnn_of(y));
          continue;
        }
        if (x == enc_vocab.bos_id())
          ctx.assign(1, x);
        else {
          ctx.push_back(x);
          const auto cap = static_cast<std::size_t>(ngram->order() - 1);
          if (cap > 0 && ctx.size() > cap)
            ctx.erase(ctx.begin(),
                      ctx.end() - static_cast<std::ptrdiff_t>(cap));
        }
        const double pn = std::exp(ngram->logprob(ctx, y));
        const std::int64_t yr = map.full_to_rnn[y];
        double a;
        if (yr >= 0 && static_cast<WordId>(yr) != map.rnn_unk) {
          a = p_rnn_of(static_cast<WordId>(yr));
        } else {
          double z_out = 0.0;
          for (WordId f : map.oor_ids)
            z_out += std::exp(ngram->logprob(ctx, f));
          a = z_out > 0.0 ? p_rnn_of(map.rnn_unk) * pn / z_out : 0.0;
        }
        const double p = cfg.lambda * a + (1.0 - cfg.lambda) * pn;
        if (!(p > 0.0)) throw DataError("rescore: non-positive probability");
        lp += std::log(p);
      }
      hyp.new_lm = lp;
      hyp.new_total = hyp.acoustic + cfg.lm_scale * lp +
                      cfg.wip * static_cast<double>(hyp.words.size());
    }
    std::stable_sort(u.hyps.begin(), u.hyps.end(),
                     [](const NBestHyp& a, const NBestHyp& b) {
                       return a.new_total > b.new_total;
                     });
    for (std::size_t i = 0; i < u.hyps.size(); ++i) u.hyps[i].rank = i + 1;
  }
}

// ----- softmax normalization drift -----

struct DriftStats {
  double mean = 0.0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double iqr = 0.0;
  std::size_t contexts = 0;
};

// ln Z at up to `count` hidden states sampled at a fixed stride from a
// single pass over the stream (state persists across sentences).
template <class Adapter>
std::vector<double> ln_z_samples(const Adapter& model, const IdStream& stream,
                                 std::size_t count,
                                 WordId /*bos_id*/ = Vocabulary::kBosId,
                                 int threads = 1) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  const auto& ids = stream.ids;
  if (ids.empty() || count == 0)
    throw std::invalid_argument("ln Z samples: empty stream or zero count");
  const std::size_t stride = std::max<std::size_t>(1, ids.size() / count);
  const std::int64_t H = model.hidden(), V = model.vocab();
  const Real a0 = activate(model.activation(), Real(0));
  Mat<Real> h(1, H), pre(1, H);
  h.fill(a0);
  Mat<Real> bank(detail::kScoreBank, H);
  Mat<Real> scores_t(V, detail::kScoreBank);
  std::int64_t used = 0;
  std::vector<double> out;
  out.reserve(count);
  auto flush = [&] {
    if (used == 0) return;
    const bool full = used == detail::kScoreBank;
    const Mat<Real> trimmed =
        full ? Mat<Real>() : detail::trim_rows(bank, used);
    const Mat<Real>& states = full ? bank : trimmed;
    Mat<Real> st_part;
    if (!full) st_part = Mat<Real>(V, used);
    Mat<Real>& st = full ? scores_t : st_part;
    typename Adapter::OutCtx octx{};
    model.out_begin(states, octx, threads);
    model.softmax_scores_t(octx, states, st, threads);
    for (std::int64_t c = 0; c < used; ++c)
      out.push_back(detail::lse_column(st, c));
    used = 0;
  };
  for (std::size_t i = 0; i < ids.size() && out.size() + static_cast<std::size_t>(used) < count; ++i) {
    if (ids[i] >= static_cast<WordId>(V))
      throw DataError("ln Z samples: id out of vocabulary range");
    matmul_nt<Acc>(h, model.w_rec(), pre, false, threads);
    model.input_forward(std::span<const WordId>(&ids[i], 1), pre, threads);
    Real* hh = h.row(0);
    const Real* pp = pre.row(0);
    for (std::int64_t j = 0; j < H; ++j)
      hh[j] = activate(model.activation(), pp[j]);
    if (i % stride != 0) continue;
    std::memcpy(bank.row(used), h.row(0),
                static_cast<std::size_t>(H) * sizeof(Real));
    if (++used == detail::kScoreBank) flush();
  }
  flush();
  return out;
}

inline DriftStats drift_stats(std::span<const double> ln_z) {
  if (ln_z.size() < 100)
    throw std::invalid_argument("drift stats: need at least 100 contexts");
  DriftStats s;
  s.contexts = ln_z.size();
  std::vector<double> v(ln_z.begin(), ln_z.end());
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  const auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= v.size()) return v.back();
    return v[lo] * (1.0 - frac) + v[lo + 1] * frac;
  };
  s.median = quantile(0.5);
  s.q25 = quantile(0.25);
  s.q75 = quantile(0.75);
  s.iqr = s.q75 - s.q25;
  return s;
}

// ----- scaling-curve fit -----

struct ScalingPoint {
  double words = 0.0;
  double ppl = 0.0;
};

// ppl(words) = a * exp(b * words^-c): exponential decay toward the
// asymptote a on a power-law schedule. Fit in log space, where (ln a, b)
// are linear and c is found by grid search plus golden-section refinement.
struct ScalingFit {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double rms = 0.0;  // root-mean-square residual in perplexity points
};

inline double scaling_predict(const ScalingFit& f, double words) {
  if (words <= 0.0)
    throw std::invalid_argument("scaling predict: words must be positive");
  return f.a * std::exp(f.b * std::pow(words, -f.c));
}

// Relative perplexity improvement the fit predicts when the corpus grows
// from w1 to w2 words.
inline double scaling_drop(const ScalingFit& f, double w1, double w2) {
  const double p1 = scaling_predict(f, w1);
  return (p1 - scaling_predict(f, w2)) / p1;
}

namespace detail {

inline double scaling_sse(std::span<const ScalingPoint> pts, double c,
                          double* alpha, double* beta) {
  const double n = static_cast<double>(pts.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (const ScalingPoint& p : pts) {
    const double x = std::pow(p.words, -c);
    const double y = std::log(p.ppl);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double det = n * sxx - sx * sx;
  if (std::abs(det) < 1e-300) return std::numeric_limits<double>::infinity();
  const double b = (n * sxy - sx * sy) / det;
  const double a = (sy - b * sx) / n;
  double sse = 0.0;
  for (const ScalingPoint& p : pts) {
    const double r = a + b * std::pow(p.words, -c) - std::log(p.ppl);
    sse += r * r;
  }
  *alpha = a;
  *beta = b;
  return sse;
}

}  // namespace detail

inline ScalingFit fit_scaling_curve(std::span<const ScalingPoint> pts) {
  if (pts.size() < 4)
    throw std::invalid_argument("scaling fit: need at least 4 points");
  std::vector<double> ws;
  for (const ScalingPoint& p : pts) {
    if (!(p.words > 0.0) || !(p.ppl > 0.0))
      throw std::invalid_argument("scaling fit: points must be positive");
    ws.push_back(p.words);
  }
  std::sort(ws.begin(), ws.end());
  if (std::adjacent_find(ws.begin(), ws.end()) != ws.end())
    throw std::invalid_argument("scaling fit: duplicate word counts");

  const double c_lo = 1e-3, c_hi = 1.5;
  const int grid = 1500;
  double best_c = c_lo, best_sse = std::numeric_limits<double>::infinity();
  double alpha = 0.0, beta = 0.0;
  for (int i = 0; i <= grid; ++i) {
    const double c = c_lo + (c_hi - c_lo) * i / grid;
    double a, b;
    const double sse = detail::scaling_sse(pts, c, &a, &b);
    if (sse < best_sse) {
      best_sse = sse;
      best_c = c;
    }
  }
  const double step = (c_hi - c_lo) / grid;
  double lo = std::max(c_lo, best_c - step), hi = std::min(c_hi, best_c + step);
  const double inv_phi = 0.6180339887498949;
  double x1 = hi - inv_phi * (hi - lo), x2 = lo + inv_phi * (hi - lo);
  double a1, b1, a2, b2;
  double f1 = detail::scaling_sse(pts, x1, &a1, &b1);
  double f2 = detail::scaling_sse(pts, x2, &a2, &b2);
  for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = detail::scaling_sse(pts, x1, &a1, &b1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = detail::scaling_sse(pts, x2, &a2, &b2);
    }
  }
  ScalingFit fit;
  fit.c = 0.5 * (lo + hi);
  detail::scaling_sse(pts, fit.c, &alpha, &beta);
  fit.a = std::exp(alpha);
  fit.b = beta;
  double sq = 0.0;
  for (const ScalingPoint& p : pts) {
    const double r = scaling_predict(fit, p.words) - p.ppl;
    sq += r * r;
  }
  fit.rms = std::sqrt(sq / static_cast<double>(pts.size()));
  return fit;
}

}  // namespace desklm

#endif  // DESKLM_EVAL_HPP
