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

#ifndef DESKLM_CORPUS_HPP
#define DESKLM_CORPUS_HPP

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "desklm/util.hpp"

namespace desklm {

using WordId = std::uint32_t;

// One sentence per entry, tokens lowercased and whitespace-free. Sentence
// markers are not stored; they are added at encode time.
struct SentenceCorpus {
  std::vector<std::vector<std::string>> sentences;

  std::size_t num_sentences() const { return sentences.size(); }
  std::size_t num_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

// Flat id sequence; each sentence rendered as bos, w1..wn, eos.
struct IdStream {
  std::vector<WordId> ids;
};

constexpr const char* kUnkWord = "<unk>";
constexpr const char* kBosWord = "<s>";
constexpr const char* kEosWord = "</s>";

// Dense word<->id map. Ids 0..2 are the specials; the rest are ordered by
// descending training frequency with lexicographic tie-break.
class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i)
      index_[words_[i]] = static_cast<WordId>(i);
    if (words_.size() < 3 || words_[kUnkId] != kUnkWord ||
        words_[kBosId] != kBosWord || words_[kEosId] != kEosWord)
      throw DataError("vocabulary must start with <unk>, <s>, </s>");
  }

  static constexpr WordId kUnkId = 0;
  static constexpr WordId kBosId = 1;
  static constexpr WordId kEosId = 2;

  WordId unk_id() const { return kUnkId; }
  WordId bos_id() const { return kBosId; }
  WordId eos_id() const { return kEosId; }
  std::size_t size() const { return words_.size(); }

  const std::string& word(WordId id) const { return words_.at(id); }
  const std::vector<std::string>& words() const { return words_; }

  // Returns unk for out-of-vocabulary tokens.
  WordId id_or_unk(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  void write(std::ostream& os) const {
    for (const auto& w : words_) os << w << '\n';
  }

  static Vocabulary read(std::istream& is) {
    std::vector<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      words.push_back(line);
    }
    return Vocabulary(std::move(words));
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, WordId> index_;
};

namespace detail {

inline const char* digit_word(char d) {
  static const char* kWords[10] = {"zero", "one", "two",   "three", "four",
                                   "five", "six", "seven", "eight", "nine"};
  return kWords[d - '0'];
}

inline bool is_terminal_punct(char c) { return c == '.' || c == '!' || c == '?'; }

// Strips punctuation except intra-word apostrophes and hyphens, then appends
// the surviving token(s) to the sentence. Digits expand to their English
// words as separate tokens.
inline void flush_token(std::string& tok, std::vector<std::string>& sentence) {
  if (tok.empty()) return;
  // drop leading/trailing apostrophes and hyphens
  std::size_t b = 0, e = tok.size();
  while (b < e && (tok[b] == '\'' || tok[b] == '-')) ++b;
  while (e > b && (tok[e - 1] == '\'' || tok[e - 1] == '-')) --e;
  if (e > b) sentence.push_back(tok.substr(b, e - b));
  tok.clear();
}

}  // namespace detail

// Lowercases, expands digits to words, strips punctuation except intra-word
// apostrophes and hyphens, and splits sentences on . ! ? and newlines.
// Empty input yields an empty corpus.
inline SentenceCorpus normalize_text(std::string_view raw) {
  SentenceCorpus out;
  std::vector<std::string> sentence;
  std::string tok;
  auto end_sentence = [&] {
    detail::flush_token(tok, sentence);
    if (!sentence.empty()) {
      out.sentences.push_back(std::move(sentence));
      sentence.clear();
    }
  };
  for (char raw_c : raw) {
    const unsigned char uc = static_cast<unsigned char>(raw_c);
    char c = raw_c;
    if (uc < 0x80 && std::isupper(uc)) c = static_cast<char>(std::tolower(uc));
    if (c == '\n') {
      end_sentence();
    } else if (uc < 0x80 && std::isspace(uc)) {
      detail::flush_token(tok, sentence);
    } else if (detail::is_terminal_punct(c)) {
      end_sentence();
    } else if (c >= '0' && c <= '9') {
      detail::flush_token(tok, sentence);
      sentence.push_back(detail::digit_word(c));
    } else if (uc >= 0x80 || std::isalpha(uc) || c == '\'' || c == '-') {
      tok.push_back(c);
    } else {
      // other punctuation: token separator
      detail::flush_token(tok, sentence);
    }
  }
  end_sentence();
  return out;
}

// Builds a vocabulary of `size` entries: the three specials plus the size-3
// most frequent tokens (lexicographic tie-break). If the corpus has fewer
// distinct tokens, the vocabulary is smaller.
inline Vocabulary build_vocab(const SentenceCorpus& corpus, std::size_t size) {
  if (size < 4)
    throw std::invalid_argument("build_vocab: size must be at least 4");
  std::unordered_map<std::string, std::uint64_t> freq;
  for (const auto& s : corpus.sentences)
    for (const auto& w : s) ++freq[w];
  std::vector<std::pair<std::string, std::uint64_t>> items(freq.begin(),
                                                           freq.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> words = {kUnkWord, kBosWord, kEosWord};
  for (const auto& [w, c] : items) {
    if (words.size() >= size) break;
    words.push_back(w);
  }
  return Vocabulary(std::move(words));
}

// Renders each sentence as bos, w1..wn, eos; OOV tokens map to unk.
inline IdStream encode(const SentenceCorpus& corpus, const Vocabulary& vocab) {
  IdStream out;
  out.ids.reserve(corpus.num_tokens() + 2 * corpus.num_sentences());
  for (const auto& s : corpus.sentences) {
    out.ids.push_back(vocab.bos_id());
    for (const auto& w : s) out.ids.push_back(vocab.id_or_unk(w));
    out.ids.push_back(vocab.eos_id());
  }
  return out;
}

// Inverse of encode up to unk substitution: sentence markers delimit
// sentences and are not emitted as tokens.
inline SentenceCorpus decode(const IdStream& stream, const Vocabulary& vocab) {
  SentenceCorpus out;
  std::vector<std::string> sentence;
  for (WordId id : stream.ids) {
    if (id >= vocab.size()) throw DataError("decode: id out of range");
    if (id == vocab.bos_id()) {
      sentence.clear();
    } else if (id == vocab.eos_id()) {
      out.sentences.push_back(sentence);
      sentence.clear();
    } else {
      sentence.push_back(vocab.word(id));
    }
  }
  return out;
}

// ----- the one-sentence-per-line text format -----

inline void write_corpus(std::ostream& os, const SentenceCorpus& corpus) {
  for (const auto& s : corpus.sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) os << ' ';
      os << s[i];
    }
    os << '\n';
  }
}

inline SentenceCorpus read_corpus(std::istream& is) {
  SentenceCorpus out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::vector<std::string> sentence;
    std::string w;
    while (ls >> w) sentence.push_back(w);
    if (!sentence.empty()) out.sentences.push_back(std::move(sentence));
  }
  return out;
}

// Ids are space-separated; a newline follows each eos so the file has one
// sentence per line.
inline void write_id_stream(std::ostream& os, const IdStream& stream,
                            const Vocabulary& vocab) {
  for (WordId id : stream.ids) {
    os << id;
    os << (id == vocab.eos_id() ? '\n' : ' ');
  }
}

inline IdStream read_id_stream(std::istream& is, std::size_t vocab_size) {
  IdStream out;
  std::uint64_t v;
  std::size_t line = 1;
  std::string tok;
  while (is >> tok) {
    try {
      v = std::stoull(tok);
    } catch (const std::exception&) {
      throw ParseError("id stream: not a number: " + tok, line);
    }
    if (v >= vocab_size) throw DataError("id stream: id out of range: " + tok);
    out.ids.push_back(static_cast<WordId>(v));
  }
  return out;
}

}  // namespace desklm

#endif  // DESKLM_CORPUS_HPP
