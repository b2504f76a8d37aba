// Shared test utilities: fixture vocabularies/streams, a high-precision
// softmax reference, and filesystem scratch space. Header keeps no Catch2
// dependency so the acceptance program can reuse it.
#ifndef DESKLM_TESTS_HELPERS_HPP
#define DESKLM_TESTS_HELPERS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "desklm/desklm.hpp"

namespace testutil {

using desklm::IdStream;
using desklm::Vocabulary;
using desklm::WordId;

// Vocabulary of `v` entries: the three specials then w3, w4, ...
inline Vocabulary make_vocab(std::size_t v) {
  std::vector<std::string> words = {desklm::kUnkWord, desklm::kBosWord,
                                    desklm::kEosWord};
  for (std::size_t i = 3; i < v; ++i) words.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(words));
}

// Random padded sentence stream over ids [3, v): <s> body </s> per sentence,
// mildly skewed word choice (min of two uniforms) so counts-of-counts are
// non-degenerate. Generates until at least `min_tokens` ids.
inline IdStream random_stream(std::mt19937_64& rng, std::size_t v,
                              std::size_t min_tokens,
                              std::size_t max_sentence_len = 12) {
  IdStream s;
  const auto body = static_cast<WordId>(v - 3);
  while (s.ids.size() < min_tokens) {
    s.ids.push_back(Vocabulary::kBosId);
    const std::size_t len = 1 + desklm::uniform_index(rng, max_sentence_len);
    for (std::size_t i = 0; i < len; ++i) {
      const auto r1 = static_cast<WordId>(desklm::uniform_index(rng, body));
      const auto r2 = static_cast<WordId>(desklm::uniform_index(rng, body));
      s.ids.push_back(3 + std::min(r1, r2));
    }
    s.ids.push_back(Vocabulary::kEosId);
  }
  return s;
}

// Deterministic cycle stream: `repeats` copies of <s> w3 w4 w5 w6 </s>.
inline IdStream cycle_stream(std::size_t repeats) {
  IdStream s;
  for (std::size_t r = 0; r < repeats; ++r)
    for (WordId id : {WordId(1), WordId(3), WordId(4), WordId(5), WordId(6),
                      WordId(2)})
      s.ids.push_back(id);
  return s;
}

// High-precision stable softmax over double scores.
inline std::vector<double> softmax_ref(const std::vector<double>& s) {
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> p(s.size());
  long double z = 0.0L;
  for (std::size_t i = 0; i < s.size(); ++i) z += expl((long double)(s[i] - mx));
  const long double lz = logl(z) + (long double)mx;
  for (std::size_t i = 0; i < s.size(); ++i)
    p[i] = (double)expl((long double)s[i] - lz);
  return p;
}

inline double ln_z_ref(const std::vector<double>& s) {
  const double mx = *std::max_element(s.begin(), s.end());
  long double z = 0.0L;
  for (double x : s) z += expl((long double)(x - mx));
  return (double)(logl(z) + (long double)mx);
}

// Scratch directory created once per process, removed on exit.
class TempDir {
 public:
  TempDir() {
    auto base = std::filesystem::temp_directory_path();
    std::mt19937_64 rng(std::random_device{}());
    path_ = base / ("desklm-test-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::string file(const std::string& name) const {
    return (path_ / name).string();
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
}

inline std::string serialize_params(const desklm::RnnParams<float>& p,
                                    const Vocabulary& v) {
  std::ostringstream os(std::ios::binary);
  desklm::write_params(os, p, v);
  return os.str();
}

}  // namespace testutil

#endif  // DESKLM_TESTS_HELPERS_HPP
