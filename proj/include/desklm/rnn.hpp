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

#ifndef DESKLM_RNN_HPP
#define DESKLM_RNN_HPP

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/mat.hpp"
#include "desklm/rng.hpp"
#include "desklm/util.hpp"

namespace desklm {

enum class Activation : std::uint8_t { kSigmoid = 0, kTanh = 1 };

template <class Real>
inline Real activate(Activation act, Real x) {
  if (act == Activation::kSigmoid)
    return Real(1) / (Real(1) + std::exp(-x));
  return std::tanh(x);
}

// Derivative expressed through the activation output y.
template <class Real>
inline Real activate_deriv(Activation act, Real y) {
  if (act == Activation::kSigmoid) return y * (Real(1) - y);
  return Real(1) - y * y;
}

// Two embedding-shaped matrices plus the recurrent matrix; no biases.
inline std::uint64_t param_count(std::uint64_t v, std::uint64_t h) {
  if (v < 1 || h < 1) throw std::invalid_argument("param_count: V,H >= 1");
  return 2 * v * h + h * h;
}

// Bias-free Elman RNN language model:
//   h_t = act(W_in[w_t] + W_rec . h_{t-1}),  s_w = h_t . W_out[w].
// W_out is kept word-major (V rows of H) so per-word score rows are
// contiguous; the checkpoint stores it H x V.
template <class Real>
struct RnnParams {
  std::int64_t v = 0;
  std::int64_t h = 0;
  Activation act = Activation::kSigmoid;
  Mat<Real> w_in;   // V x H
  Mat<Real> w_rec;  // H x H
  Mat<Real> w_out;  // V x H (word-major)

  RnnParams() = default;
  RnnParams(std::int64_t v_, std::int64_t h_,
            Activation a = Activation::kSigmoid)
      : v(v_), h(h_), act(a), w_in(v_, h_), w_rec(h_, h_), w_out(v_, h_) {
    if (v < 1 || h < 1) throw std::invalid_argument("RnnParams: V,H >= 1");
  }

  std::uint64_t count() const { return param_count(v, h); }

  void init_uniform(std::uint64_t seed, double range = 0.1) {
    std::mt19937_64 rng(seed);
    for (auto* m : {&w_in, &w_rec, &w_out})
      for (auto& x : m->a) x = static_cast<Real>(uniform(rng, -range, range));
  }
};

// Row-sparse gradient for an embedding-shaped matrix: only rows touched in
// the current window are materialized. Slot order follows first touch, so
// accumulation is deterministic.
template <class Real>
struct SparseRowGrads {
  std::int64_t width = 0;
  std::vector<WordId> words;  // slot -> word id
  std::vector<Real> data;     // slot-major rows of `width`
  std::unordered_map<WordId, std::size_t> slot;

  void reset(std::int64_t w) {
    width = w;
    words.clear();
    data.clear();
    slot.clear();
  }

  std::span<Real> row(WordId w) {
    auto [it, fresh] = slot.try_emplace(w, words.size());
    if (fresh) {
      words.push_back(w);
      data.resize(data.size() + width, Real(0));
    }
    return {data.data() + it->second * width, static_cast<std::size_t>(width)};
  }

  // row(w) += a * x
  void axpy_row(WordId w, Real a, const Real* x) {
    auto r = row(w);
    for (std::int64_t i = 0; i < width; ++i) r[i] += a * x[i];
  }

  std::size_t rows() const { return words.size(); }

  Mat<Real> to_dense(std::int64_t nrows) const {
    Mat<Real> m(nrows, width);
    for (std::size_t s = 0; s < words.size(); ++s)
      for (std::int64_t i = 0; i < width; ++i)
        m.at(words[s], i) += data[s * width + i];
    return m;
  }
};

namespace detail {

template <class Real>
inline void clip_span(std::span<Real> xs, Real clip) {
  for (auto& x : xs) x = std::min(clip, std::max(-clip, x));
}

template <class Real>
inline bool all_finite(std::span<const Real> xs) {
  for (auto x : xs)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace detail

// Gradients for the standard model. The output-side gradient is row-sparse
// in NCE mode and dense in exact-softmax mode.
template <class Real>
struct StandardGrads {
  SparseRowGrads<Real> w_in;
  Mat<Real> w_rec;
  bool out_dense = false;
  SparseRowGrads<Real> w_out_sp;
  Mat<Real> w_out_dense;

  void clip(Real c) {
    detail::clip_span<Real>({w_in.data.data(), w_in.data.size()}, c);
    detail::clip_span<Real>({w_rec.a.data(), w_rec.a.size()}, c);
    if (out_dense)
      detail::clip_span<Real>({w_out_dense.a.data(), w_out_dense.a.size()}, c);
    else
      detail::clip_span<Real>({w_out_sp.data.data(), w_out_sp.data.size()}, c);
  }

  bool finite() const {
    return detail::all_finite<Real>({w_in.data.data(), w_in.data.size()}) &&
           detail::all_finite<Real>({w_rec.a.data(), w_rec.a.size()}) &&
           (out_dense ? detail::all_finite<Real>(
                            {w_out_dense.a.data(), w_out_dense.a.size()})
                      : detail::all_finite<Real>(
                            {w_out_sp.data.data(), w_out_sp.data.size()}));
  }
};

// Adapter presenting the standard model to the shared BPTT engine. The
// engine contract (see backprop.hpp): input_forward adds the embedding
// contribution to the pre-activation; out_begin/score/score_backward/
// out_end run the output side per step; softmax_* provide the dense exact
// path. Acc selects the reduction accumulator type.
template <class Real, class Acc = double>
struct StandardAdapter {
  using RealT = Real;
  using AccT = Acc;
  using Params = RnnParams<Real>;
  using Grads = StandardGrads<Real>;
  struct OutCtx {};  // no per-step output tape needed

  const Params* p = nullptr;

  explicit StandardAdapter(const Params& params) : p(&params) {}

  std::int64_t hidden() const { return p->h; }
  std::int64_t vocab() const { return p->v; }
  Activation activation() const { return p->act; }
  const Mat<Real>& w_rec() const { return p->w_rec; }

  void grads_reset(Grads& g, bool dense_out) const {
    g.w_in.reset(p->h);
    if (g.w_rec.rows != p->h) g.w_rec = Mat<Real>(p->h, p->h);
    g.w_rec.fill(Real(0));
    g.out_dense = dense_out;
    if (dense_out) {
      if (g.w_out_dense.rows != p->v) g.w_out_dense = Mat<Real>(p->v, p->h);
      g.w_out_dense.fill(Real(0));
    } else {
      g.w_out_sp.reset(p->h);
    }
  }

  void input_forward(std::span<const WordId> words, Mat<Real>& pre,
                     int /*threads*/) const {
    for (std::int64_t b = 0; b < pre.rows; ++b) {
      const Real* e = p->w_in.row(words[b]);
      Real* o = pre.row(b);
      for (std::int64_t i = 0; i < p->h; ++i) o[i] += e[i];
    }
  }

  void input_backward(std::span<const WordId> words, const Mat<Real>& dpre,
                      Grads& g, int /*threads*/) const {
    for (std::int64_t b = 0; b < dpre.rows; ++b)
      g.w_in.axpy_row(words[b], Real(1), dpre.row(b));
  }

  void out_begin(const Mat<Real>& /*h*/, OutCtx& /*ctx*/,
                 int /*threads*/) const {}

  Real score(const OutCtx&, const Mat<Real>& h, std::int64_t b,
             WordId w) const {
    return dot_acc<Acc, Real>(h.row(b), p->w_out.row(w), p->h);
  }

  void score_backward(OutCtx&, const Mat<Real>& h, std::int64_t b, WordId w,
                      Real ds, Mat<Real>& dh, Grads& g) const {
    g.w_out_sp.axpy_row(w, ds, h.row(b));
    axpy(ds, p->w_out.row(w), dh.row(b), p->h);
  }

  void out_end(const OutCtx&, const Mat<Real>& /*h*/, Mat<Real>& /*dh*/,
               Grads& /*g*/, int /*threads*/) const {}

  void softmax_scores(const OutCtx&, const Mat<Real>& h, Mat<Real>& scores,
                      int threads) const {
    matmul_nt<Acc>(h, p->w_out, scores, false, threads);
  }

  // Transposed variant (V x B): each output row is read once per call, so
  // scoring a bank of states together is memory-bandwidth friendly.
  void softmax_scores_t(const OutCtx&, const Mat<Real>& h, Mat<Real>& scores_t,
                        int threads) const {
    matmul_nt<Acc>(p->w_out, h, scores_t, false, threads);
  }

  void softmax_backward(const OutCtx&, const Mat<Real>& h,
                        const Mat<Real>& dscores, Mat<Real>& dh, Grads& g,
                        int threads) const {
    matmul_tn_add(dscores, h, g.w_out_dense);
    matmul_nn<Acc>(dscores, p->w_out, dh, true, threads);
  }
};

// ----- checkpoint I/O (32-bit storage) -----

constexpr std::uint32_t kRnnFormatVersion = 1;

inline void write_params(std::ostream& os, const RnnParams<float>& p,
                         const Vocabulary& vocab) {
  put_magic(os, "RNLM");
  put_u32(os, kRnnFormatVersion);
  put_u64(os, static_cast<std::uint64_t>(p.v));
  put_u64(os, static_cast<std::uint64_t>(p.h));
  put_u8(os, static_cast<std::uint8_t>(p.act));
  for (std::int64_t r = 0; r < p.v; ++r)
    for (std::int64_t c = 0; c < p.h; ++c) put_f32(os, p.w_in.at(r, c));
  for (std::int64_t r = 0; r < p.h; ++r)
    for (std::int64_t c = 0; c < p.h; ++c) put_f32(os, p.w_rec.at(r, c));
  // stored H x V: row i holds every word's i-th output weight
  for (std::int64_t i = 0; i < p.h; ++i)
    for (std::int64_t w = 0; w < p.v; ++w) put_f32(os, p.w_out.at(w, i));
  put_u64(os, vocab.size());
  for (const auto& w : vocab.words()) put_string(os, w);
}

inline std::pair<RnnParams<float>, Vocabulary> read_params(std::istream& is) {
  expect_magic(is, "RNLM", "rnn checkpoint");
  const std::uint32_t version = get_u32(is);
  if (version != kRnnFormatVersion)
    throw DataError("rnn checkpoint: unsupported version " +
                    std::to_string(version));
  const auto v = static_cast<std::int64_t>(get_u64(is));
  const auto h = static_cast<std::int64_t>(get_u64(is));
  if (v < 1 || h < 1 || v > (1 << 26) || h > (1 << 20))
    throw DataError("rnn checkpoint: implausible dimensions");
  const auto act = static_cast<Activation>(get_u8(is));
  RnnParams<float> p(v, h, act);
  for (std::int64_t r = 0; r < v; ++r)
    for (std::int64_t c = 0; c < h; ++c) p.w_in.at(r, c) = get_f32(is);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < h; ++c) p.w_rec.at(r, c) = get_f32(is);
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t w = 0; w < v; ++w) p.w_out.at(w, i) = get_f32(is);
  const std::uint64_t nwords = get_u64(is);
  if (nwords != static_cast<std::uint64_t>(v))
    throw DataError("rnn checkpoint: vocabulary size mismatch");
  std::vector<std::string> words;
  words.reserve(nwords);
  for (std::uint64_t i = 0; i < nwords; ++i) words.push_back(get_string(is));
  return {std::move(p), Vocabulary(std::move(words))};
}

}  // namespace desklm

#endif  // DESKLM_RNN_HPP
