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

#ifndef DESKLM_FILTER_HPP
#define DESKLM_FILTER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/ngram.hpp"

namespace desklm {

// Cross-entropy-difference data selection: text is scored by an in-domain
// model and a general model sharing one vocabulary, and stretches that the
// in-domain model finds comparatively easy (low H_in - H_general, in nats
// per word) are kept.

struct SentenceScore {
  double lp_in = 0.0;         // ln p under the in-domain model
  double lp_general = 0.0;    // ln p under the general model
  std::size_t predicted = 0;  // scored tokens (words plus eos)
};

inline std::vector<SentenceScore> score_sentences(
    const NGramModel& in_domain, const NGramModel& general,
    const SentenceCorpus& corpus) {
  if (in_domain.vocab().words() != general.vocab().words())
    throw std::invalid_argument(
        "selection: the two models must share a vocabulary");
  std::vector<SentenceScore> out;
  out.reserve(corpus.sentences.size());
  const Vocabulary& vocab = in_domain.vocab();
  IdStream s;
  for (const auto& sent : corpus.sentences) {
    s.ids.clear();
    s.ids.push_back(vocab.bos_id());
    for (const auto& w : sent) s.ids.push_back(vocab.id_or_unk(w));
    s.ids.push_back(vocab.eos_id());
    const PerplexityResult a = ngram_perplexity_full(in_domain, s);
    const PerplexityResult b = ngram_perplexity_full(general, s);
    out.push_back({a.total_logprob, b.total_logprob, a.predicted});
  }
  return out;
}

// Per-window cross-entropy difference over sliding windows of `buffer`
// sentences advancing one sentence at a time. A corpus shorter than one
// window is a single window. Window i covers sentences [i, i+buffer).
inline std::vector<double> window_scores(std::span<const SentenceScore> s,
                                         std::size_t buffer) {
  if (buffer < 1)
    throw std::invalid_argument("selection: buffer must be >= 1");
  if (s.empty()) throw std::invalid_argument("selection: empty corpus");
  const std::size_t n = s.size();
  const std::size_t w = std::min(buffer, n);
  std::vector<double> pin(n + 1, 0.0), pgen(n + 1, 0.0);
  std::vector<std::size_t> pred(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    pin[i + 1] = pin[i] + s[i].lp_in;
    pgen[i + 1] = pgen[i] + s[i].lp_general;
    pred[i + 1] = pred[i] + s[i].predicted;
  }
  std::vector<double> out;
  out.reserve(n - w + 1);
  for (std::size_t i = 0; i + w <= n; ++i) {
    const auto tokens = static_cast<double>(pred[i + w] - pred[i]);
    // H_in - H_general = (sum lp_general - sum lp_in) / tokens
    out.push_back((pgen[i + w] - pgen[i] - (pin[i + w] - pin[i])) / tokens);
  }
  return out;
}

struct FilterResult {
  std::vector<std::uint8_t> keep;  // per sentence
  std::size_t kept = 0;
  double fraction = 0.0;
};

// Keeps every sentence that appears in at least one window scoring strictly
// below the threshold.
inline FilterResult entropy_filter(std::span<const SentenceScore> s,
                                   std::size_t buffer, double threshold) {
  const std::vector<double> ws = window_scores(s, buffer);
  const std::size_t n = s.size();
  const std::size_t w = std::min(buffer, n);
  FilterResult r;
  r.keep.assign(n, 0);
  std::vector<std::int32_t> diff(n + 1, 0);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    if (ws[i] < threshold) {
      ++diff[i];
      --diff[i + w];
    }
  }
  std::int32_t open = 0;
  for (std::size_t i = 0; i < n; ++i) {
    open += diff[i];
    if (open > 0) {
      r.keep[i] = 1;
      ++r.kept;
    }
  }
  r.fraction = static_cast<double>(r.kept) / static_cast<double>(n);
  return r;
}

inline SentenceCorpus apply_filter(const SentenceCorpus& corpus,
                                   std::span<const std::uint8_t> keep) {
  if (keep.size() != corpus.sentences.size())
    throw std::invalid_argument("selection: keep mask size mismatch");
  SentenceCorpus out;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) out.sentences.push_back(corpus.sentences[i]);
  return out;
}

struct ThresholdResult {
  double threshold = 0.0;
  double fraction = 0.0;    // achieved kept fraction at that threshold
  bool within_tol = true;   // achieved fraction within tolerance of target
};

// Kept fraction against threshold at every distinct window score (a step
// curve; the last entry keeps everything). Suitable for a threshold sweep.
inline std::vector<ThresholdResult> threshold_sweep(
    std::span<const SentenceScore> s, std::size_t buffer) {
  std::vector<double> ws = window_scores(s, buffer);
  std::sort(ws.begin(), ws.end());
  ws.erase(std::unique(ws.begin(), ws.end()), ws.end());
  ws.push_back(ws.back() + 1.0);  // above every score: keep all
  std::vector<ThresholdResult> out;
  out.reserve(ws.size());
  for (double t : ws)
    out.push_back({t, entropy_filter(s, buffer, t).fraction});
  return out;
}

// Finds the threshold whose kept fraction is closest to the target,
// preferring any within +/- tol. The fraction is monotone in the threshold,
// so a binary search over the distinct window scores suffices; only step
// positions are reachable, and the closest achievable one is returned.
inline ThresholdResult threshold_for_fraction(std::span<const SentenceScore> s,
                                              std::size_t buffer,
                                              double target,
                                              double tol = 0.02) {
  if (!(target >= 0.0 && target <= 1.0))
    throw std::invalid_argument("selection: target fraction must be in [0, 1]");
  if (!(tol >= 0.0))
    throw std::invalid_argument("selection: tolerance must be >= 0");
  std::vector<double> ws = window_scores(s, buffer);
  std::sort(ws.begin(), ws.end());
  ws.erase(std::unique(ws.begin(), ws.end()), ws.end());
  ws.push_back(ws.back() + 1.0);
  const auto fraction_at = [&](std::size_t idx) {
    return entropy_filter(s, buffer, ws[idx]).fraction;
  };
  // smallest candidate whose fraction reaches the target
  std::size_t lo = 0, hi = ws.size() - 1;
  if (fraction_at(hi) < target) {
    ThresholdResult r{ws[hi], fraction_at(hi), false};
    r.within_tol = std::abs(r.fraction - target) <= tol;
    return r;
  }
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    if (fraction_at(mid) >= target)
      hi = mid;
    else
      lo = mid + 1;
  }
  ThresholdResult best{ws[lo], fraction_at(lo), true};
  if (lo > 0) {
    const ThresholdResult below{ws[lo - 1], fraction_at(lo - 1), true};
    if (std::abs(below.fraction - target) < std::abs(best.fraction - target))
      best = below;
  }
  best.within_tol = std::abs(best.fraction - target) <= tol;
  return best;
}

}  // namespace desklm

#endif  // DESKLM_FILTER_HPP
