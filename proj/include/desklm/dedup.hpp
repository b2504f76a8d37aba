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

#ifndef DESKLM_DEDUP_HPP
#define DESKLM_DEDUP_HPP

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/rng.hpp"
#include "desklm/util.hpp"

namespace desklm {

struct DedupConfig {
  std::size_t min_buffer_chars = 140;
  std::size_t num_hashes = 4;
  std::size_t filter_bits = 1 << 20;

  void validate() const {
    if (min_buffer_chars < 1)
      throw std::invalid_argument("dedup: min_buffer_chars must be >= 1");
    if (num_hashes < 1)
      throw std::invalid_argument("dedup: num_hashes must be >= 1");
    if (filter_bits < 8)
      throw std::invalid_argument("dedup: filter_bits must be >= 8");
  }
};

// Smallest bit-array size keeping the analytic false-positive rate
// (1 - e^(-k n / m))^k at or below `target_fp` for n expected buffers.
inline std::size_t recommended_filter_bits(std::size_t expected_buffers,
                                           std::size_t num_hashes = 4,
                                           double target_fp = 1e-3) {
  if (target_fp <= 0.0 || target_fp >= 1.0)
    throw std::invalid_argument("recommended_filter_bits: target_fp in (0,1)");
  const double k = static_cast<double>(num_hashes);
  const double n = static_cast<double>(expected_buffers);
  // (1 - e^(-k n / m))^k <= p  <=>  m >= -k n / ln(1 - p^(1/k))
  const double q = std::pow(target_fp, 1.0 / k);
  const double m = -k * n / std::log1p(-q);
  return std::max<std::size_t>(8, static_cast<std::size_t>(std::ceil(m)));
}

// Shared bit array addressed by double hashing (h1 + i*h2 mod m).
class BloomFilter {
 public:
  BloomFilter(std::size_t bits, std::size_t num_hashes)
      : bits_(bits), num_hashes_(num_hashes), words_((bits + 63) / 64, 0) {}

  // Returns true if every bit for `data` was already set (a hit), and sets
  // all of them either way.
  bool test_and_set(const std::string& data) {
    const std::uint64_t h1 = fnv1a64(data);
    const std::uint64_t h2 = splitmix64(h1) | 1;
    bool all_set = true;
    std::uint64_t h = h1;
    for (std::size_t i = 0; i < num_hashes_; ++i, h += h2) {
      const std::uint64_t bit = h % bits_;
      std::uint64_t& word = words_[bit >> 6];
      const std::uint64_t mask = std::uint64_t{1} << (bit & 63);
      if (!(word & mask)) {
        all_set = false;
        word |= mask;
      }
    }
    return all_set;
  }

  std::size_t bits() const { return bits_; }
  std::size_t popcount() const {
    std::size_t n = 0;
    for (std::uint64_t w : words_) n += static_cast<std::size_t>(__builtin_popcountll(w));
    return n;
  }

 private:
  std::size_t bits_;
  std::size_t num_hashes_;
  std::vector<std::uint64_t> words_;
};

struct DedupResult {
  SentenceCorpus corpus;
  std::size_t buffers_total = 0;
  std::size_t buffers_dropped = 0;
  std::size_t sentences_dropped = 0;
};

// Tiles the corpus into disjoint buffers of consecutive sentences, each
// closed as soon as its joined text reaches min_buffer_chars characters
// (the final buffer may be shorter). A buffer whose Bloom bits are all
// already set is judged a duplicate and its sentences are dropped.
// Buffer text is the single-space join of the buffer's tokens, which makes
// equality whitespace-insensitive.
inline DedupResult dedup_corpus_stats(const SentenceCorpus& corpus,
                                      const DedupConfig& cfg) {
  cfg.validate();
  DedupResult out;
  BloomFilter filter(cfg.filter_bits, cfg.num_hashes);

  std::string buffer_text;
  std::vector<const std::vector<std::string>*> buffer_sentences;

  auto flush = [&] {
    if (buffer_sentences.empty()) return;
    ++out.buffers_total;
    if (filter.test_and_set(buffer_text)) {
      ++out.buffers_dropped;
      out.sentences_dropped += buffer_sentences.size();
    } else {
      for (const auto* s : buffer_sentences) out.corpus.sentences.push_back(*s);
    }
    buffer_text.clear();
    buffer_sentences.clear();
  };

  for (const auto& sent : corpus.sentences) {
    for (const auto& tok : sent) {
      if (!buffer_text.empty()) buffer_text.push_back(' ');
      buffer_text.append(tok);
    }
    buffer_sentences.push_back(&sent);
    if (buffer_text.size() >= cfg.min_buffer_chars) flush();
  }
  flush();
  return out;
}

inline SentenceCorpus dedup_corpus(const SentenceCorpus& corpus,
                                   const DedupConfig& cfg) {
  return dedup_corpus_stats(corpus, cfg).corpus;
}

}  // namespace desklm

#endif  // DESKLM_DEDUP_HPP
