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

#ifndef DESKLM_CORPUSGEN_HPP
#define DESKLM_CORPUSGEN_HPP

#include <cmath>
#include <cstdint>
#include <iterator>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/rng.hpp"

namespace desklm {

// ----- synthetic corpus generator -----
//
// Emits raw text (capitalized, punctuated, digits as digit strings, ~1%
// planted duplicate blocks) with the statistical structure the rest of the
// toolkit is built to exploit:
//   - documents follow a sticky Markov chain over topics, each with its own
//     Zipf-distributed pseudo-word vocabulary, so useful predictive state
//     spans many sentences;
//   - subjects and verbs agree in number across intervening modifiers and
//     relative clauses, placing the governing noun outside a 4-token window
//     often enough to separate finite-order and recurrent models;
//   - per-topic collocations give local models recurring exact n-grams.
// Everything is derived from the seed; two generators built with the same
// config and seed produce identical text.

struct GenConfig {
  int topics = 24;
  int nouns_per_topic = 120;
  int verbs_per_topic = 60;
  int adjs_per_topic = 60;
  int shared_nouns = 60;
  int shared_verbs = 30;
  int shared_adjs = 40;
  int collocations_per_topic = 12;
  double zipf_exponent = 1.05;
  double topic_stay = 0.9;      // per-sentence probability of keeping the topic
  double shared_p = 0.13;       // content word drawn from the shared pool
  double other_topic_p = 0.05;  // content word drawn from a random other topic
  double plural_p = 0.35;
  double adj_p = 0.4;
  double subj_pp_p = 0.35;  // prepositional modifier after the subject
  double rel_clause_p = 0.15;
  double adv_p = 0.25;
  double obj_p = 0.6;
  double tail_pp_p = 0.3;
  double colloc_p = 0.3;  // an object NP uses a topic collocation
  double copula_p = 0.2;
  double question_p = 0.05;
  double digit_p = 0.02;
  double intro_p = 0.12;
  double dup_p = 0.01;  // per closed buffer, re-emit it once
  std::size_t dup_buffer_chars = 140;
  int doc_min_sentences = 8;
  int doc_max_sentences = 30;

  void validate() const {
    if (topics < 1) throw std::invalid_argument("gen: topics must be >= 1");
    if (nouns_per_topic < 4 || verbs_per_topic < 2 || adjs_per_topic < 2)
      throw std::invalid_argument("gen: word lists too small");
    if (doc_min_sentences < 1 || doc_max_sentences < doc_min_sentences)
      throw std::invalid_argument("gen: bad document length range");
    if (!(zipf_exponent > 0.0))
      throw std::invalid_argument("gen: zipf_exponent must be positive");
    if (dup_buffer_chars < 1)
      throw std::invalid_argument("gen: dup_buffer_chars must be >= 1");
    for (double p : {topic_stay, shared_p, other_topic_p, plural_p, adj_p,
                     subj_pp_p, rel_clause_p, adv_p, obj_p, tail_pp_p,
                     colloc_p, copula_p, question_p, digit_p, intro_p, dup_p})
      if (!(p >= 0.0 && p <= 1.0))
        throw std::invalid_argument("gen: probabilities must lie in [0,1]");
  }
};

namespace detail {

// Cumulative-weight table for Zipf(s) ranks; sampled by binary search so the
// result depends only on our portable uniform draws.
struct ZipfTable {
  std::vector<double> cum;

  void build(std::size_t n, double s) {
    cum.resize(n);
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      t += 1.0 / std::pow(static_cast<double>(i + 1), s);
      cum[i] = t;
    }
  }

  std::size_t sample(std::mt19937_64& rng) const {
    const double u = uniform01(rng) * cum.back();
    std::size_t lo = 0, hi = cum.size() - 1;
    while (lo < hi) {
      const std::size_t mid = (lo + hi) / 2;
      if (cum[mid] < u)
        lo = mid + 1;
      else
        hi = mid;
    }
    return lo;
  }
};

}  // namespace detail

class TextGenerator {
 public:
  TextGenerator(const GenConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(splitmix64(seed ^ 0x9e3779b97f4a7c15ull));
    std::unordered_set<std::string> used;
    for (const char* w : kFunctionWords) used.insert(w);
    for (char d = '0'; d <= '9'; ++d) used.insert(detail::digit_word(d));

    auto make_list = [&](int n) {
      std::vector<std::string> out;
      out.reserve(n);
      while (static_cast<int>(out.size()) < n) {
        const std::string w = make_word(rng);
        // Bases end in a vowel, so the "s" forms can never collide with
        // another base; only base-vs-base and function-word clashes matter.
        if (used.insert(w).second) out.push_back(w);
      }
      return out;
    };

    topics_.resize(cfg_.topics);
    for (auto& t : topics_) {
      t.nouns = make_list(cfg_.nouns_per_topic);
      t.verbs = make_list(cfg_.verbs_per_topic);
      t.adjs = make_list(cfg_.adjs_per_topic);
      for (int c = 0; c < cfg_.collocations_per_topic; ++c) {
        const auto a = uniform_index(rng, t.adjs.size() / 2 + 1);
        const auto n = uniform_index(rng, t.nouns.size() / 2 + 1);
        t.collocs.emplace_back(t.adjs[a], t.nouns[n]);
      }
    }
    shared_.nouns = make_list(cfg_.shared_nouns);
    shared_.verbs = make_list(cfg_.shared_verbs);
    shared_.adjs = make_list(cfg_.shared_adjs);

    zn_.build(cfg_.nouns_per_topic, cfg_.zipf_exponent);
    zv_.build(cfg_.verbs_per_topic, cfg_.zipf_exponent);
    za_.build(cfg_.adjs_per_topic, cfg_.zipf_exponent);
    zsn_.build(cfg_.shared_nouns, cfg_.zipf_exponent);
    zsv_.build(cfg_.shared_verbs, cfg_.zipf_exponent);
    zsa_.build(cfg_.shared_adjs, cfg_.zipf_exponent);
  }

  int topics() const { return cfg_.topics; }

  // Raw mixed-topic text with roughly `target_tokens` normalized word
  // tokens, one sentence per line. Planted duplicates re-emit exactly the
  // sentence run a 140-char rolling buffer would hash, so a downstream
  // dedup pass can remove them.
  std::string generate(std::int64_t target_tokens,
                       std::uint64_t stream_seed) const {
    return run(target_tokens, stream_seed, -1, /*plant_dups=*/true);
  }

  // Single-topic text (no topic drift, no planted duplicates); used as
  // in-domain material for selection experiments.
  std::string generate_topic(std::int64_t target_tokens,
                             std::uint64_t stream_seed, int topic) const {
    if (topic < 0 || topic >= cfg_.topics)
      throw std::invalid_argument("gen: topic out of range");
    return run(target_tokens, stream_seed, topic, /*plant_dups=*/false);
  }

 private:
  enum class Role { kNoun, kVerb, kAdj };

  struct TopicWords {
    std::vector<std::string> nouns, verbs, adjs;
    std::vector<std::pair<std::string, std::string>> collocs;
  };

  static constexpr const char* kFunctionWords[] = {
      "the",     "a",       "this",    "each",    "one",      "every",
      "these",   "some",    "those",   "many",    "most",     "all",
      "of",      "in",      "on",      "at",      "with",     "from",
      "near",    "over",    "about",   "under",   "often",    "never",
      "really",  "still",   "also",    "quite",   "soon",     "rarely",
      "however", "meanwhile", "moreover", "instead", "finally", "later",
      "yesterday", "today", "recently", "sometimes", "is",     "are",
      "was",     "were",    "did",     "will",    "can",      "should",
      "must",    "that",    "and",     "or",      "but",      "not",
      "to",      "for",     "as",      "by",      "total",    "order",
      "arrived", "days",    "items",   "room"};

  std::string make_word(std::mt19937_64& rng) const {
    static constexpr const char* kCons[] = {"b", "d", "f", "g", "k", "l",
                                            "m", "n", "p", "r", "s", "t",
                                            "v", "z", "ch", "st", "br", "tr"};
    static constexpr const char* kVow[] = {"a", "e", "i", "o", "u", "ai", "ou"};
    const double u = uniform01(rng);
    const int syllables = u < 0.45 ? 2 : (u < 0.85 ? 3 : 4);
    std::string w;
    for (int s = 0; s < syllables; ++s) {
      w += kCons[uniform_index(rng, std::size(kCons))];
      w += kVow[uniform_index(rng, std::size(kVow))];
    }
    return w;
  }

  const std::string& pick_content(std::mt19937_64& rng, int topic,
                                  Role role) const {
    const double u = uniform01(rng);
    const TopicWords* src = &topics_[topic];
    const detail::ZipfTable* zn = &zn_;
    const detail::ZipfTable* zv = &zv_;
    const detail::ZipfTable* za = &za_;
    if (u < cfg_.shared_p) {
      src = &shared_;
      zn = &zsn_;
      zv = &zsv_;
      za = &zsa_;
    } else if (u < cfg_.shared_p + cfg_.other_topic_p && cfg_.topics > 1) {
      int other = static_cast<int>(uniform_index(rng, cfg_.topics - 1));
      if (other >= topic) ++other;
      src = &topics_[other];
    }
    switch (role) {
      case Role::kNoun: return src->nouns[zn->sample(rng)];
      case Role::kVerb: return src->verbs[zv->sample(rng)];
      default: return src->adjs[za->sample(rng)];
    }
  }

  template <std::size_t N>
  const char* pick(std::mt19937_64& rng, const char* const (&xs)[N]) const {
    return xs[uniform_index(rng, N)];
  }

  // Appends a noun phrase; returns true when it is plural.
  bool append_np(std::mt19937_64& rng, int topic, std::vector<std::string>& t,
                 bool allow_colloc) const {
    static constexpr const char* kSgDet[] = {"a", "this", "each", "one",
                                             "every"};
    static constexpr const char* kPlDet[] = {"these", "some", "those", "many",
                                             "most", "all"};
    if (allow_colloc && !topics_[topic].collocs.empty() &&
        uniform01(rng) < cfg_.colloc_p) {
      const auto& [adj, noun] = topics_[topic].collocs[uniform_index(
          rng, topics_[topic].collocs.size())];
      t.push_back("the");
      t.push_back(adj);
      t.push_back(noun);
      return false;
    }
    const bool plural = uniform01(rng) < cfg_.plural_p;
    if (uniform01(rng) < 0.6)
      t.push_back("the");
    else
      t.push_back(plural ? pick(rng, kPlDet) : pick(rng, kSgDet));
    if (uniform01(rng) < cfg_.adj_p)
      t.push_back(pick_content(rng, topic, Role::kAdj));
    std::string noun = pick_content(rng, topic, Role::kNoun);
    if (plural) noun += 's';
    t.push_back(std::move(noun));
    return plural;
  }

  void append_pp(std::mt19937_64& rng, int topic,
                 std::vector<std::string>& t) const {
    static constexpr const char* kPrep[] = {"of",   "in",   "on",    "at",
                                            "with", "from", "near",  "over",
                                            "about", "under"};
    t.push_back(pick(rng, kPrep));
    append_np(rng, topic, t, false);
  }

  std::string verb_form(std::mt19937_64& rng, int topic, bool plural) const {
    std::string v = pick_content(rng, topic, Role::kVerb);
    if (!plural) v += 's';
    return v;
  }

  // One raw sentence (tokens before casing/punctuation are applied).
  std::vector<std::string> make_sentence(std::mt19937_64& rng,
                                         int topic) const {
    static constexpr const char* kAdv[] = {"often",  "never", "really",
                                           "still",  "also",  "quite",
                                           "soon",   "rarely"};
    static constexpr const char* kIntro[] = {"however",  "meanwhile",
                                             "moreover", "instead",
                                             "finally",  "later",
                                             "yesterday", "today",
                                             "recently", "sometimes"};
    static constexpr const char* kAux[] = {"did", "will", "can", "should",
                                           "must"};
    std::vector<std::string> t;
    const double kind = uniform01(rng);
    if (kind < cfg_.digit_p) {
      // e.g. "The total was 4 7 2." / "Order 9 5 arrived in 1 2 days."
      if (uniform01(rng) < 0.5) {
        t = {"the", "total", "was"};
        const int n = 2 + static_cast<int>(uniform_index(rng, 3));
        for (int i = 0; i < n; ++i)
          t.push_back(std::string(1, static_cast<char>('0' + uniform_index(rng, 10))));
      } else {
        t = {"order"};
        for (int i = 0; i < 2; ++i)
          t.push_back(std::string(1, static_cast<char>('0' + uniform_index(rng, 10))));
        t.push_back("arrived");
        t.push_back("in");
        for (int i = 0; i < 2; ++i)
          t.push_back(std::string(1, static_cast<char>('0' + uniform_index(rng, 10))));
        t.push_back("days");
      }
      return t;
    }
    if (uniform01(rng) < cfg_.intro_p) {
      t.push_back(pick(rng, kIntro));
      t.push_back(",");  // placeholder; attached to the intro word in raw form
    }
    if (kind < cfg_.digit_p + cfg_.question_p) {
      t.push_back(pick(rng, kAux));
      append_np(rng, topic, t, false);
      t.push_back(pick_content(rng, topic, Role::kVerb));  // bare after aux
      if (uniform01(rng) < cfg_.obj_p) append_np(rng, topic, t, true);
      t.push_back("?");
      return t;
    }
    const bool plural = append_np(rng, topic, t, false);
    if (uniform01(rng) < cfg_.rel_clause_p) {
      t.push_back("that");
      const bool pl2 = append_np(rng, topic, t, false);
      t.push_back(verb_form(rng, topic, pl2));
    } else if (uniform01(rng) < cfg_.subj_pp_p) {
      append_pp(rng, topic, t);
    }
    if (kind < cfg_.digit_p + cfg_.question_p + cfg_.copula_p) {
      const bool past = uniform01(rng) < 0.4;
      t.push_back(past ? (plural ? "were" : "was") : (plural ? "are" : "is"));
      if (uniform01(rng) < cfg_.adv_p) t.push_back(pick(rng, kAdv));
      t.push_back(pick_content(rng, topic, Role::kAdj));
    } else {
      if (uniform01(rng) < cfg_.adv_p) t.push_back(pick(rng, kAdv));
      t.push_back(verb_form(rng, topic, plural));
      if (uniform01(rng) < cfg_.obj_p) append_np(rng, topic, t, true);
      if (uniform01(rng) < cfg_.tail_pp_p) append_pp(rng, topic, t);
    }
    t.push_back(".");
    return t;
  }

  // Renders tokens to a raw line: capitalized first word, "," attached to
  // the preceding word, terminal punctuation attached to the last word.
  static std::string render_raw(const std::vector<std::string>& toks) {
    std::string line;
    for (const auto& tok : toks) {
      if (tok == "," || tok == "." || tok == "?") {
        line += tok;
        continue;
      }
      if (!line.empty()) line += ' ';
      line += tok;
    }
    if (!line.empty() && line[0] >= 'a' && line[0] <= 'z')
      line[0] = static_cast<char>(line[0] - 'a' + 'A');
    return line;
  }

  std::string run(std::int64_t target_tokens, std::uint64_t stream_seed,
                  int fixed_topic, bool plant_dups) const {
    if (target_tokens < 1)
      throw std::invalid_argument("gen: target_tokens must be >= 1");
    std::mt19937_64 rng(splitmix64(stream_seed ^ 0x517cc1b727220a95ull));
    std::string out;
    out.reserve(static_cast<std::size_t>(target_tokens) * 7);
    std::int64_t tokens = 0;

    // Mirror the dedup rolling buffer (joined normalized chars) so planted
    // duplicates land exactly on buffer boundaries.
    std::size_t buf_chars = 0;
    std::vector<std::string> buf_lines;
    bool just_planted = false;

    int topic = fixed_topic >= 0
                    ? fixed_topic
                    : static_cast<int>(uniform_index(rng, cfg_.topics));
    int doc_left = 0;
    while (tokens < target_tokens) {
      if (doc_left == 0) {
        doc_left = cfg_.doc_min_sentences +
                   static_cast<int>(uniform_index(
                       rng, cfg_.doc_max_sentences - cfg_.doc_min_sentences + 1));
        if (fixed_topic < 0)
          topic = static_cast<int>(uniform_index(rng, cfg_.topics));
      } else if (fixed_topic < 0 && uniform01(rng) > cfg_.topic_stay) {
        topic = static_cast<int>(uniform_index(rng, cfg_.topics));
      }
      --doc_left;

      const auto toks = make_sentence(rng, topic);
      const std::string raw = render_raw(toks);
      const SentenceCorpus norm = normalize_text(raw);
      std::int64_t ntok = 0;
      for (const auto& s : norm.sentences)
        for (const auto& w : s) {
          if (buf_chars > 0) ++buf_chars;
          buf_chars += w.size();
          ++ntok;
        }
      out += raw;
      out += '\n';
      tokens += ntok;
      buf_lines.push_back(raw);

      if (buf_chars >= cfg_.dup_buffer_chars) {
        if (plant_dups && !just_planted && uniform01(rng) < cfg_.dup_p) {
          for (const auto& l : buf_lines) {
            out += l;
            out += '\n';
          }
          just_planted = true;
        } else {
          just_planted = false;
        }
        buf_chars = 0;
        buf_lines.clear();
      }
    }
    return out;
  }

  GenConfig cfg_;
  std::vector<TopicWords> topics_;
  TopicWords shared_;
  detail::ZipfTable zn_, zv_, za_, zsn_, zsv_, zsa_;
};

}  // namespace desklm

#endif  // DESKLM_CORPUSGEN_HPP
