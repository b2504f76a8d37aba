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

#ifndef DESKLM_NCE_HPP
#define DESKLM_NCE_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/rng.hpp"

namespace desklm {

// ln(1 + e^x) without overflow.
inline double softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Noise distribution for NCE plus its alias sampler: the training-corpus
// unigram with a probability floor so q > 0 everywhere. The model's log
// normalizer is pinned at ln Z = 0, which is what drives self-normalization.
class NoiseModel {
 public:
  NoiseModel(std::vector<double> unigram_counts, int k, double floor = 1e-8)
      : k_(k) {
    if (k < 1) throw std::invalid_argument("NoiseModel: k must be >= 1");
    if (unigram_counts.empty())
      throw std::invalid_argument("NoiseModel: empty distribution");
    double total = 0.0;
    for (double c : unigram_counts) {
      if (c < 0.0) throw std::invalid_argument("NoiseModel: negative count");
      total += c;
    }
    if (total <= 0.0) throw std::invalid_argument("NoiseModel: zero total");
    q_.resize(unigram_counts.size());
    double qsum = 0.0;
    for (std::size_t w = 0; w < q_.size(); ++w) {
      q_[w] = std::max(unigram_counts[w] / total, floor);
      qsum += q_[w];
    }
    ln_kq_.resize(q_.size());
    for (std::size_t w = 0; w < q_.size(); ++w) {
      q_[w] /= qsum;
      ln_kq_[w] = std::log(static_cast<double>(k_) * q_[w]);
    }
    sampler_ = AliasSampler(q_);
  }

  // Counts every non-bos token in the stream (bos is never a target).
  static NoiseModel from_stream(const IdStream& stream, std::size_t vocab_size,
                                int k, WordId bos_id = Vocabulary::kBosId,
                                double floor = 1e-8) {
    std::vector<double> counts(vocab_size, 0.0);
    for (WordId id : stream.ids)
      if (id != bos_id) counts.at(id) += 1.0;
    return NoiseModel(std::move(counts), k, floor);
  }

  int k() const { return k_; }
  std::size_t vocab() const { return q_.size(); }
  double q(WordId w) const { return q_[w]; }
  double ln_kq(WordId w) const { return ln_kq_[w]; }
  WordId sample(std::mt19937_64& rng) const {
    return static_cast<WordId>(sampler_.sample(rng));
  }

 private:
  int k_ = 1;
  std::vector<double> q_;
  std::vector<double> ln_kq_;
  AliasSampler sampler_;
};

struct NceLossResult {
  double loss = 0.0;
  // P(data | word) for the target then each noise sample, in order
  std::vector<double> posteriors;
  // dloss/dscore for the target then each noise sample
  std::vector<double> score_grads;
};

// NCE loss for one prediction: with unnormalized model probability
// ptilde(w) = exp(s_w - ln Z), ln Z = 0:
//   loss = -ln(ptilde(t) / (ptilde(t) + k q(t)))
//          - sum_j ln(k q(n_j) / (ptilde(n_j) + k q(n_j))).
// Evaluated through a = s_w - ln(k q(w)): the data posterior is sigmoid(a),
// so loss = softplus(-a_t) + sum_j softplus(a_j), which never overflows.
inline NceLossResult nce_loss(double target_score, WordId target,
                              std::span<const double> noise_scores,
                              std::span<const WordId> noise_samples,
                              const NoiseModel& noise) {
  if (noise_scores.size() != noise_samples.size())
    throw std::invalid_argument("nce_loss: score/sample count mismatch");
  if (noise_samples.size() != static_cast<std::size_t>(noise.k()))
    throw std::invalid_argument("nce_loss: need exactly k noise samples");
  NceLossResult r;
  r.posteriors.reserve(noise_samples.size() + 1);
  r.score_grads.reserve(noise_samples.size() + 1);
  const double a_t = target_score - noise.ln_kq(target);
  r.loss = softplus(-a_t);
  r.posteriors.push_back(sigmoid(a_t));
  r.score_grads.push_back(-sigmoid(-a_t));
  for (std::size_t j = 0; j < noise_samples.size(); ++j) {
    const double a = noise_scores[j] - noise.ln_kq(noise_samples[j]);
    r.loss += softplus(a);
    r.posteriors.push_back(sigmoid(a));
    r.score_grads.push_back(sigmoid(a));
  }
  return r;
}

}  // namespace desklm

#endif  // DESKLM_NCE_HPP
