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

#ifndef DESKLM_ARPA_HPP
#define DESKLM_ARPA_HPP

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "desklm/ngram.hpp"
#include "desklm/util.hpp"

namespace desklm {

namespace detail {

inline std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(std::move(tok));
  return out;
}

inline double parse_number(const std::string& tok, std::size_t line_no,
                           const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size())
    throw ParseError(std::string("arpa: bad ") + what + " '" + tok + "'",
                     line_no);
  return v;
}

}  // namespace detail

// Standard text layout: a \data\ header with per-order entry counts, one
// \k-grams: section per order with lines `logp w1..wk [bow]` (log10, six
// decimals), then \end\. Sections list entries in id order.
inline void write_arpa(std::ostream& os, const NGramModel& model) {
  os << "\\data\\\n";
  for (int k = 1; k <= model.order(); ++k)
    os << "ngram " << k << '=' << model.levels()[k - 1].size() << '\n';
  for (int k = 1; k <= model.order(); ++k) {
    os << "\n\\" << k << "-grams:\n";
    const auto& level = model.levels()[k - 1];
    std::vector<const Key*> sorted;
    sorted.reserve(level.size());
    for (const auto& [key, e] : level) sorted.push_back(&key);
    std::sort(sorted.begin(), sorted.end(), [k](const Key* a, const Key* b) {
      for (int i = 0; i < k; ++i) {
        const WordId x = keys::id_at(*a, i), y = keys::id_at(*b, i);
        if (x != y) return x < y;
      }
      return false;
    });
    for (const Key* key : sorted) {
      const ProbEntry& e = level.at(*key);
      os << detail::fmt6(e.logp10);
      for (int i = 0; i < k; ++i)
        os << (i == 0 ? '\t' : ' ') << model.vocab().word(keys::id_at(*key, i));
      if (e.has_bow) os << '\t' << detail::fmt6(e.bow10);
      os << '\n';
    }
  }
  os << "\n\\end\\\n";
}

// Reads the layout written above. The vocabulary is reconstructed from the
// unigram section (specials first; any missing special is appended with
// log10 probability -99). Malformed headers, counts that disagree with the
// body, or words without unigram entries raise ParseError with the line.
inline NGramModel read_arpa(std::istream& is) {
  std::vector<std::string> lines;
  std::string raw;
  while (std::getline(is, raw)) {
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    lines.push_back(raw);
  }
  std::size_t i = 0;
  auto skip_blank = [&] {
    while (i < lines.size() && detail::split_ws(lines[i]).empty()) ++i;
  };
  auto strip = [](const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };

  skip_blank();
  while (i < lines.size() && strip(lines[i]) != "\\data\\") ++i;
  if (i >= lines.size()) throw ParseError("arpa: missing \\data\\ header", 1);
  ++i;

  std::vector<std::size_t> declared;
  while (i < lines.size()) {
    const std::string s = strip(lines[i]);
    if (s.empty()) break;
    auto toks = detail::split_ws(s);
    if (toks.size() != 2 || toks[0] != "ngram")
      throw ParseError("arpa: bad count line '" + s + "'", i + 1);
    const auto eq = toks[1].find('=');
    if (eq == std::string::npos)
      throw ParseError("arpa: bad count line '" + s + "'", i + 1);
    const int k = std::atoi(toks[1].substr(0, eq).c_str());
    if (k != static_cast<int>(declared.size()) + 1)
      throw ParseError("arpa: non-consecutive ngram orders", i + 1);
    declared.push_back(
        static_cast<std::size_t>(std::atoll(toks[1].substr(eq + 1).c_str())));
    ++i;
  }
  if (declared.empty()) throw ParseError("arpa: no ngram counts", i + 1);
  const int order = static_cast<int>(declared.size());

  // collect raw entries per level; words resolved to ids after the unigram
  // section fixes the vocabulary
  struct RawEntry {
    double logp10;
    std::vector<std::string> words;
    double bow10;
    bool has_bow;
    std::size_t line_no;
  };
  std::vector<std::vector<RawEntry>> sections(order);
  for (int k = 1; k <= order; ++k) {
    skip_blank();
    const std::string header = "\\" + std::to_string(k) + "-grams:";
    if (declared[k - 1] == 0 &&
        (i >= lines.size() || strip(lines[i]) != header))
      continue;  // empty sections may be omitted
    if (i >= lines.size() || strip(lines[i]) != header)
      throw ParseError("arpa: expected section header " + header, i + 1);
    ++i;
    auto& sec = sections[k - 1];
    while (i < lines.size()) {
      const std::string s = strip(lines[i]);
      if (s.empty() || s[0] == '\\') break;
      auto toks = detail::split_ws(s);
      if (toks.size() != static_cast<std::size_t>(k) + 1 &&
          toks.size() != static_cast<std::size_t>(k) + 2)
        throw ParseError("arpa: wrong field count for " + std::to_string(k) +
                             "-gram",
                         i + 1);
      RawEntry e;
      e.line_no = i + 1;
      e.logp10 = detail::parse_number(toks[0], i + 1, "log probability");
      e.words.assign(toks.begin() + 1, toks.begin() + 1 + k);
      e.has_bow = toks.size() == static_cast<std::size_t>(k) + 2;
      e.bow10 = e.has_bow
                    ? detail::parse_number(toks.back(), i + 1, "backoff weight")
                    : 0.0;
      sec.push_back(std::move(e));
      ++i;
    }
    if (sec.size() != declared[k - 1])
      throw ParseError("arpa: " + std::to_string(k) + "-gram count mismatch: "
                           "header says " + std::to_string(declared[k - 1]) +
                           ", body has " + std::to_string(sec.size()),
                       i + 1);
  }
  skip_blank();
  if (i >= lines.size() || strip(lines[i]) != "\\end\\")
    throw ParseError("arpa: missing \\end\\", i + 1);

  // vocabulary: specials first, then unigram words in order of appearance
  std::vector<std::string> words = {kUnkWord, kBosWord, kEosWord};
  std::unordered_set<std::string> seen(words.begin(), words.end());
  for (const auto& e : sections[0]) {
    if (seen.insert(e.words[0]).second) words.push_back(e.words[0]);
  }
  Vocabulary vocab(std::move(words));

  NGramModel model(order, vocab);
  // dense unigram level; absent words (at most the specials) get -99
  for (WordId w = 0; w < vocab.size(); ++w) {
    ProbEntry e;
    e.logp10 = kLog10BosProb;
    model.levels()[0].emplace(keys::pack(std::span<const WordId>(&w, 1)), e);
  }
  for (int k = 1; k <= order; ++k) {
    for (const auto& raw_e : sections[k - 1]) {
      Key key;
      for (const auto& w : raw_e.words) {
        if (!vocab.contains(w))
          throw ParseError("arpa: word '" + w + "' has no unigram entry",
                           raw_e.line_no);
        keys::append_id(key, vocab.id_or_unk(w));
      }
      ProbEntry e;
      e.logp10 = raw_e.logp10;
      e.bow10 = raw_e.bow10;
      e.has_bow = raw_e.has_bow;
      model.levels()[k - 1][key] = e;
    }
  }
  model.finalize();
  return model;
}

}  // namespace desklm

#endif  // DESKLM_ARPA_HPP
