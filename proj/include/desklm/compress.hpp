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

#ifndef DESKLM_COMPRESS_HPP
#define DESKLM_COMPRESS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "desklm/corpus.hpp"
#include "desklm/mat.hpp"
#include "desklm/rmsprop.hpp"
#include "desklm/rnn.hpp"
#include "desklm/util.hpp"

namespace desklm {

// ----- bottleneck model with a tied embedding -----
//
// One embedding E serves both sides of the network through a low-rank
// bottleneck of width P:
//   h_t = act(E[w_t] . U + W_rec . h_{t-1}),   z_t = h_t . D,
//   s_w = E[w] . z_t.
// Parameters: V*P + P*H + H*H + H*P, far below the standard 2*V*H + H*H
// when P < H << V.

inline std::uint64_t bottleneck_param_count(std::uint64_t v, std::uint64_t h,
                                            std::uint64_t p) {
  if (v < 1 || h < 1 || p < 1)
    throw std::invalid_argument("bottleneck param count: V,H,P >= 1");
  return v * p + p * h + h * h + h * p;
}

template <class Real>
struct BottleneckParams {
  std::int64_t v = 0;
  std::int64_t h = 0;
  std::int64_t p = 0;
  Activation act = Activation::kSigmoid;
  Mat<Real> e;      // V x P, tied input/output embedding
  Mat<Real> u;      // P x H, input projection
  Mat<Real> w_rec;  // H x H
  Mat<Real> d;      // H x P, output projection

  BottleneckParams() = default;
  BottleneckParams(std::int64_t v_, std::int64_t h_, std::int64_t p_,
                   Activation a = Activation::kSigmoid)
      : v(v_), h(h_), p(p_), act(a), e(v_, p_), u(p_, h_), w_rec(h_, h_),
        d(h_, p_) {
    if (v < 1 || h < 1 || p < 1)
      throw std::invalid_argument("BottleneckParams: V,H,P >= 1");
    if (p > h)
      throw std::invalid_argument("BottleneckParams: P must not exceed H");
  }

  std::uint64_t count() const { return bottleneck_param_count(v, h, p); }

  void init_uniform(std::uint64_t seed, double range = 0.1) {
    std::mt19937_64 rng(seed);
    for (auto* m : {&e, &u, &w_rec, &d})
      for (auto& x : m->a) x = static_cast<Real>(uniform(rng, -range, range));
  }
};

// The embedding gradient is row-sparse under sampled losses and dense under
// the exact softmax; U, W_rec, D are always dense.
template <class Real>
struct BottleneckGrads {
  bool e_is_dense = false;
  SparseRowGrads<Real> e_sp;
  Mat<Real> e_dense;
  Mat<Real> u;
  Mat<Real> w_rec;
  Mat<Real> d;

  void clip(Real c) {
    if (e_is_dense)
      detail::clip_span<Real>({e_dense.a.data(), e_dense.a.size()}, c);
    else
      detail::clip_span<Real>({e_sp.data.data(), e_sp.data.size()}, c);
    detail::clip_span<Real>({u.a.data(), u.a.size()}, c);
    detail::clip_span<Real>({w_rec.a.data(), w_rec.a.size()}, c);
    detail::clip_span<Real>({d.a.data(), d.a.size()}, c);
  }

  bool finite() const {
    const bool e_ok =
        e_is_dense
            ? detail::all_finite<Real>({e_dense.a.data(), e_dense.a.size()})
            : detail::all_finite<Real>({e_sp.data.data(), e_sp.data.size()});
    return e_ok && detail::all_finite<Real>({u.a.data(), u.a.size()}) &&
           detail::all_finite<Real>({w_rec.a.data(), w_rec.a.size()}) &&
           detail::all_finite<Real>({d.a.data(), d.a.size()});
  }
};

// Engine adapter for the bottleneck model. The per-step output tape holds
// the projected state z and its gradient; scratch matrices are mutable so
// the const-qualified engine callbacks can reuse them without reallocating.
template <class Real, class Acc = double>
struct BottleneckAdapter {
  using RealT = Real;
  using AccT = Acc;
  using Params = BottleneckParams<Real>;
  using Grads = BottleneckGrads<Real>;
  struct OutCtx {
    Mat<Real> z;   // B x P
    Mat<Real> dz;  // B x P
  };

  const Params* p = nullptr;
  mutable Mat<Real> ebatch_;  // gathered embedding rows, B x P
  mutable Mat<Real> din_;     // embedding-side gradient, B x P

  explicit BottleneckAdapter(const Params& params) : p(&params) {}

  std::int64_t hidden() const { return p->h; }
  std::int64_t vocab() const { return p->v; }
  Activation activation() const { return p->act; }
  const Mat<Real>& w_rec() const { return p->w_rec; }

  void grads_reset(Grads& g, bool dense_out) const {
    g.e_is_dense = dense_out;
    if (dense_out) {
      if (g.e_dense.rows != p->v || g.e_dense.cols != p->p)
        g.e_dense = Mat<Real>(p->v, p->p);
      g.e_dense.fill(Real(0));
    } else {
      g.e_sp.reset(p->p);
    }
    if (g.u.rows != p->p) g.u = Mat<Real>(p->p, p->h);
    g.u.fill(Real(0));
    if (g.w_rec.rows != p->h) g.w_rec = Mat<Real>(p->h, p->h);
    g.w_rec.fill(Real(0));
    if (g.d.rows != p->h) g.d = Mat<Real>(p->h, p->p);
    g.d.fill(Real(0));
  }

  void gather(std::span<const WordId> words, Mat<Real>& out) const {
    if (out.rows != static_cast<std::int64_t>(words.size()) ||
        out.cols != p->p)
      out = Mat<Real>(static_cast<std::int64_t>(words.size()), p->p);
    for (std::size_t b = 0; b < words.size(); ++b) {
      const Real* src = p->e.row(words[b]);
      Real* dst = out.row(static_cast<std::int64_t>(b));
      for (std::int64_t i = 0; i < p->p; ++i) dst[i] = src[i];
    }
  }

  void input_forward(std::span<const WordId> words, Mat<Real>& pre,
                     int threads) const {
    gather(words, ebatch_);
    matmul_nn<Acc>(ebatch_, p->u, pre, true, threads);
  }

  void input_backward(std::span<const WordId> words, const Mat<Real>& dpre,
                      Grads& g, int threads) const {
    gather(words, ebatch_);
    matmul_tn_add(ebatch_, dpre, g.u);
    if (din_.rows != dpre.rows || din_.cols != p->p)
      din_ = Mat<Real>(dpre.rows, p->p);
    matmul_nt<Acc>(dpre, p->u, din_, false, threads);
    for (std::int64_t b = 0; b < dpre.rows; ++b) {
      if (g.e_is_dense) {
        const Real* src = din_.row(b);
        Real* dst = g.e_dense.row(words[static_cast<std::size_t>(b)]);
        for (std::int64_t i = 0; i < p->p; ++i) dst[i] += src[i];
      } else {
        g.e_sp.axpy_row(words[static_cast<std::size_t>(b)], Real(1),
                        din_.row(b));
      }
    }
  }

  void out_begin(const Mat<Real>& h, OutCtx& ctx, int threads) const {
    if (ctx.z.rows != h.rows || ctx.z.cols != p->p) {
      ctx.z = Mat<Real>(h.rows, p->p);
      ctx.dz = Mat<Real>(h.rows, p->p);
    }
    matmul_nn<Acc>(h, p->d, ctx.z, false, threads);
    ctx.dz.fill(Real(0));
  }

  Real score(const OutCtx& ctx, const Mat<Real>& /*h*/, std::int64_t b,
             WordId w) const {
    return dot_acc<Acc, Real>(ctx.z.row(b), p->e.row(w), p->p);
  }

  void score_backward(OutCtx& ctx, const Mat<Real>& /*h*/, std::int64_t b,
                      WordId w, Real ds, Mat<Real>& /*dh*/, Grads& g) const {
    axpy(ds, p->e.row(w), ctx.dz.row(b), p->p);
    if (g.e_is_dense) {
      const Real* z = ctx.z.row(b);
      Real* dst = g.e_dense.row(w);
      for (std::int64_t i = 0; i < p->p; ++i) dst[i] += ds * z[i];
    } else {
      g.e_sp.axpy_row(w, ds, ctx.z.row(b));
    }
  }

  void out_end(const OutCtx& ctx, const Mat<Real>& h, Mat<Real>& dh, Grads& g,
               int threads) const {
    matmul_nt<Acc>(ctx.dz, p->d, dh, true, threads);
    matmul_tn_add(h, ctx.dz, g.d);
  }

  void softmax_scores(const OutCtx& ctx, const Mat<Real>& /*h*/,
                      Mat<Real>& scores, int threads) const {
    matmul_nt<Acc>(ctx.z, p->e, scores, false, threads);
  }

  void softmax_scores_t(const OutCtx& ctx, const Mat<Real>& /*h*/,
                        Mat<Real>& scores_t, int threads) const {
    matmul_nt<Acc>(p->e, ctx.z, scores_t, false, threads);
  }

  void softmax_backward(OutCtx& ctx, const Mat<Real>& h,
                        const Mat<Real>& dscores, Mat<Real>& dh, Grads& g,
                        int threads) const {
    matmul_nn<Acc>(dscores, p->e, ctx.dz, false, threads);
    matmul_tn_add(dscores, ctx.z, g.e_dense);
    out_end(ctx, h, dh, g, threads);
  }
};

// ----- optimizer state for the bottleneck model -----
//
// Same scheme as the standard model: the embedding keeps one scalar
// accumulator per word (fed with the mean squared gradient over the row),
// everything else is per-element. All accumulators decay every update.

struct BottleneckOptState {
  std::int64_t v = 0, h = 0, p = 0;
  double rho = 0.9995;
  double eps = 1e-6;
  std::vector<float> m_e;  // one scalar per vocabulary word
  Mat<float> m_u;
  Mat<float> m_rec;
  Mat<float> m_d;

  BottleneckOptState() = default;
  BottleneckOptState(std::int64_t v_, std::int64_t h_, std::int64_t p_,
                     double rho_, double eps_)
      : v(v_), h(h_), p(p_), rho(rho_), eps(eps_), m_e(v_, 0.0f),
        m_u(p_, h_), m_rec(h_, h_), m_d(h_, p_) {
    if (v < 1 || h < 1 || p < 1)
      throw std::invalid_argument("opt state: V,H,P >= 1");
    if (!(rho > 0.0 && rho < 1.0))
      throw std::invalid_argument("opt state: rho must be in (0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("opt state: eps must be > 0");
  }

  std::uint64_t bytes() const {
    return (static_cast<std::uint64_t>(v) + m_u.a.size() + m_rec.a.size() +
            m_d.a.size()) *
           sizeof(float);
  }
};

namespace detail {

template <class Real>
inline void rms_dense_elem(Mat<Real>& param, const Mat<Real>& grad,
                           Mat<float>& m, double rho, double eps, double eta) {
  for (std::size_t i = 0; i < param.a.size(); ++i) {
    const double gi = static_cast<double>(grad.a[i]);
    m.a[i] = static_cast<float>(rho * static_cast<double>(m.a[i]) +
                                (1.0 - rho) * gi * gi);
    param.a[i] -= static_cast<Real>(
        eta * gi / std::sqrt(static_cast<double>(m.a[i]) + eps));
  }
}

}  // namespace detail

template <class Real>
bool bottleneck_update(BottleneckParams<Real>& p,
                       const BottleneckGrads<Real>& g, BottleneckOptState& s,
                       double eta) {
  if (!g.finite()) return false;
  if (g.e_is_dense)
    detail::update_rows_dense(p.e, g.e_dense, s.m_e, s.rho, s.eps, eta);
  else
    detail::update_rows_sparse(p.e, g.e_sp, s.m_e, s.rho, s.eps, eta);
  detail::rms_dense_elem(p.u, g.u, s.m_u, s.rho, s.eps, eta);
  detail::rms_dense_elem(p.w_rec, g.w_rec, s.m_rec, s.rho, s.eps, eta);
  detail::rms_dense_elem(p.d, g.d, s.m_d, s.rho, s.eps, eta);
  return true;
}

// ----- serialization -----

constexpr std::uint32_t kBottleneckFormatVersion = 1;

inline void write_bottleneck(std::ostream& os,
                             const BottleneckParams<float>& p,
                             const Vocabulary& vocab) {
  put_magic(os, "RNBL");
  put_u32(os, kBottleneckFormatVersion);
  put_u64(os, static_cast<std::uint64_t>(p.v));
  put_u64(os, static_cast<std::uint64_t>(p.h));
  put_u64(os, static_cast<std::uint64_t>(p.p));
  put_u8(os, static_cast<std::uint8_t>(p.act));
  for (const auto* m : {&p.e, &p.u, &p.w_rec, &p.d})
    for (float x : m->a) put_f32(os, x);
  put_u64(os, vocab.size());
  for (const auto& w : vocab.words()) put_string(os, w);
}

inline std::pair<BottleneckParams<float>, Vocabulary> read_bottleneck(
    std::istream& is) {
  expect_magic(is, "RNBL", "bottleneck checkpoint");
  const std::uint32_t version = get_u32(is);
  if (version != kBottleneckFormatVersion)
    throw DataError("bottleneck checkpoint: unsupported version " +
                    std::to_string(version));
  const auto v = static_cast<std::int64_t>(get_u64(is));
  const auto h = static_cast<std::int64_t>(get_u64(is));
  const auto pp = static_cast<std::int64_t>(get_u64(is));
  if (v < 1 || h < 1 || pp < 1 || v > (1 << 26) || h > (1 << 20) ||
      pp > (1 << 20))
    throw DataError("bottleneck checkpoint: implausible dimensions");
  const auto act = static_cast<Activation>(get_u8(is));
  BottleneckParams<float> p(v, h, pp, act);
  for (auto* m : {&p.e, &p.u, &p.w_rec, &p.d})
    for (auto& x : m->a) x = get_f32(is);
  const std::uint64_t nwords = get_u64(is);
  if (nwords != static_cast<std::uint64_t>(v))
    throw DataError("bottleneck checkpoint: vocabulary size mismatch");
  std::vector<std::string> words;
  words.reserve(nwords);
  for (std::uint64_t i = 0; i < nwords; ++i) words.push_back(get_string(is));
  return {std::move(p), Vocabulary(std::move(words))};
}

inline void write_bottleneck_opt(std::ostream& os,
                                 const BottleneckOptState& s) {
  put_magic(os, "RBOP");
  put_u32(os, kBottleneckFormatVersion);
  put_u64(os, static_cast<std::uint64_t>(s.v));
  put_u64(os, static_cast<std::uint64_t>(s.h));
  put_u64(os, static_cast<std::uint64_t>(s.p));
  put_f64(os, s.rho);
  put_f64(os, s.eps);
  for (float x : s.m_e) put_f32(os, x);
  for (const auto* m : {&s.m_u, &s.m_rec, &s.m_d})
    for (float x : m->a) put_f32(os, x);
}

inline BottleneckOptState read_bottleneck_opt(std::istream& is) {
  expect_magic(is, "RBOP", "bottleneck optimizer state");
  const std::uint32_t version = get_u32(is);
  if (version != kBottleneckFormatVersion)
    throw DataError("bottleneck optimizer state: unsupported version " +
                    std::to_string(version));
  const auto v = static_cast<std::int64_t>(get_u64(is));
  const auto h = static_cast<std::int64_t>(get_u64(is));
  const auto p = static_cast<std::int64_t>(get_u64(is));
  const double rho = get_f64(is);
  const double eps = get_f64(is);
  BottleneckOptState s(v, h, p, rho, eps);
  for (auto& x : s.m_e) x = get_f32(is);
  for (auto* m : {&s.m_u, &s.m_rec, &s.m_d})
    for (auto& x : m->a) x = get_f32(is);
  return s;
}

// Trainer traits for the bottleneck model.
struct BottleneckTraits {
  using Params = BottleneckParams<float>;
  using Grads = BottleneckGrads<float>;
  using Adapter = BottleneckAdapter<float>;
  using Opt = BottleneckOptState;

  static std::int64_t hidden(const Params& p) { return p.h; }
  static std::int64_t vocab(const Params& p) { return p.v; }
  static Activation activation(const Params& p) { return p.act; }
  static Opt make_opt(const Params& p, double rho, double eps) {
    return BottleneckOptState(p.v, p.h, p.p, rho, eps);
  }
  static bool update(Params& p, const Grads& g, Opt& o, double eta) {
    return bottleneck_update(p, g, o, eta);
  }
  static void write_params(std::ostream& os, const Params& p,
                           const Vocabulary& v) {
    write_bottleneck(os, p, v);
  }
  static std::pair<Params, Vocabulary> read_params(std::istream& is) {
    return read_bottleneck(is);
  }
  static void write_opt(std::ostream& os, const Opt& o) {
    write_bottleneck_opt(os, o);
  }
  static Opt read_opt(std::istream& is) { return read_bottleneck_opt(is); }
};

// ----- linear quantization -----

// Per-matrix linear quantization: step = (max - min) / (2^bits - 1), codes
// packed contiguously without padding, least-significant bit first. A
// constant matrix (max == min) quantizes to all-zero codes and reconstructs
// exactly.
struct QuantizedMatrix {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  int bits = 0;
  float min = 0.0f;
  float max = 0.0f;
  std::vector<std::uint8_t> codes;

  double step() const {
    const double range = static_cast<double>(max) - static_cast<double>(min);
    return range > 0.0
               ? range / static_cast<double>((std::uint32_t{1} << bits) - 1)
               : 0.0;
  }

  std::uint32_t code_at(std::int64_t idx) const {
    std::uint32_t c = 0;
    const std::int64_t base = idx * bits;
    for (int j = 0; j < bits; ++j) {
      const std::int64_t bit = base + j;
      if (codes[static_cast<std::size_t>(bit >> 3)] & (1u << (bit & 7)))
        c |= 1u << j;
    }
    return c;
  }
};

inline QuantizedMatrix quantize_matrix(const Mat<float>& m, int bits) {
  if (bits < 1 || bits > 16)
    throw std::invalid_argument("quantize: bits must be in [1, 16]");
  if (m.a.empty()) throw std::invalid_argument("quantize: empty matrix");
  QuantizedMatrix q;
  q.rows = m.rows;
  q.cols = m.cols;
  q.bits = bits;
  q.min = q.max = m.a[0];
  for (float x : m.a) {
    q.min = std::min(q.min, x);
    q.max = std::max(q.max, x);
  }
  const std::int64_t total_bits = static_cast<std::int64_t>(m.a.size()) * bits;
  q.codes.assign(static_cast<std::size_t>((total_bits + 7) / 8), 0);
  const double step = q.step();
  if (step > 0.0) {
    const auto levels =
        static_cast<std::int64_t>((std::uint32_t{1} << bits) - 1);
    for (std::size_t i = 0; i < m.a.size(); ++i) {
      const double x = (static_cast<double>(m.a[i]) - q.min) / step;
      auto c = static_cast<std::int64_t>(std::llround(x));
      c = std::max<std::int64_t>(0, std::min(levels, c));
      const std::int64_t base = static_cast<std::int64_t>(i) * bits;
      for (int j = 0; j < bits; ++j)
        if (c & (std::int64_t{1} << j)) {
          const std::int64_t bit = base + j;
          q.codes[static_cast<std::size_t>(bit >> 3)] |=
              static_cast<std::uint8_t>(1u << (bit & 7));
        }
    }
  }
  return q;
}

inline Mat<float> dequantize_matrix(const QuantizedMatrix& q) {
  Mat<float> m(q.rows, q.cols);
  const double step = q.step();
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(m.a.size()); ++i)
    m.a[static_cast<std::size_t>(i)] = static_cast<float>(
        static_cast<double>(q.min) + step * q.code_at(i));
  return m;
}

struct QuantizedModel {
  std::int64_t v = 0, h = 0, p = 0;
  Activation act = Activation::kSigmoid;
  int bits = 0;
  QuantizedMatrix e, u, w_rec, d;
  std::vector<std::string> words;
};

inline QuantizedModel quantize_model(const BottleneckParams<float>& p,
                                     const Vocabulary& vocab, int bits) {
  QuantizedModel q;
  q.v = p.v;
  q.h = p.h;
  q.p = p.p;
  q.act = p.act;
  q.bits = bits;
  q.e = quantize_matrix(p.e, bits);
  q.u = quantize_matrix(p.u, bits);
  q.w_rec = quantize_matrix(p.w_rec, bits);
  q.d = quantize_matrix(p.d, bits);
  q.words = vocab.words();
  return q;
}

inline std::pair<BottleneckParams<float>, Vocabulary> dequantize_model(
    const QuantizedModel& q) {
  BottleneckParams<float> p(q.v, q.h, q.p, q.act);
  p.e = dequantize_matrix(q.e);
  p.u = dequantize_matrix(q.u);
  p.w_rec = dequantize_matrix(q.w_rec);
  p.d = dequantize_matrix(q.d);
  return {std::move(p), Vocabulary(q.words)};
}

constexpr std::uint32_t kQuantizedFormatVersion = 1;

namespace detail {

inline void write_qmatrix(std::ostream& os, const QuantizedMatrix& q) {
  put_u32(os, static_cast<std::uint32_t>(q.bits));
  put_f32(os, q.min);
  put_f32(os, q.max);
  os.write(reinterpret_cast<const char*>(q.codes.data()),
           static_cast<std::streamsize>(q.codes.size()));
}

// Shapes come from the file header, so each matrix record carries only its
// bit width, range, and the padding-free code payload.
inline QuantizedMatrix read_qmatrix(std::istream& is, std::int64_t rows,
                                    std::int64_t cols) {
  QuantizedMatrix q;
  q.rows = rows;
  q.cols = cols;
  q.bits = static_cast<int>(get_u32(is));
  if (q.bits < 1 || q.bits > 16)
    throw DataError("quantized model: bits out of range");
  q.min = get_f32(is);
  q.max = get_f32(is);
  const std::uint64_t nbytes =
      (static_cast<std::uint64_t>(rows) * cols * q.bits + 7) / 8;
  q.codes.resize(nbytes);
  is.read(reinterpret_cast<char*>(q.codes.data()),
          static_cast<std::streamsize>(nbytes));
  if (!is) throw DataError("quantized model: truncated payload");
  return q;
}

inline std::uint64_t qmatrix_size(const QuantizedMatrix& q) {
  return 4 + 4 + 4 + q.codes.size();
}

}  // namespace detail

// Exact byte size of the serialized model; matches the file written by
// write_quantized.
inline std::uint64_t quantized_size_bytes(const QuantizedModel& q) {
  std::uint64_t n = 4 + 4;     // magic, version
  n += 8 + 8 + 8 + 1;          // dims, activation
  n += 8;                      // word count
  for (const auto& w : q.words) n += 8 + w.size();
  for (const auto* m : {&q.e, &q.u, &q.w_rec, &q.d})
    n += detail::qmatrix_size(*m);
  return n;
}

inline void write_quantized(std::ostream& os, const QuantizedModel& q) {
  put_magic(os, "RNQZ");
  put_u32(os, kQuantizedFormatVersion);
  put_u64(os, static_cast<std::uint64_t>(q.v));
  put_u64(os, static_cast<std::uint64_t>(q.h));
  put_u64(os, static_cast<std::uint64_t>(q.p));
  put_u8(os, static_cast<std::uint8_t>(q.act));
  put_u64(os, q.words.size());
  for (const auto& w : q.words) put_string(os, w);
  for (const auto* m : {&q.e, &q.u, &q.w_rec, &q.d})
    detail::write_qmatrix(os, *m);
}

inline QuantizedModel read_quantized(std::istream& is) {
  expect_magic(is, "RNQZ", "quantized model");
  const std::uint32_t version = get_u32(is);
  if (version != kQuantizedFormatVersion)
    throw DataError("quantized model: unsupported version " +
                    std::to_string(version));
  QuantizedModel q;
  q.v = static_cast<std::int64_t>(get_u64(is));
  q.h = static_cast<std::int64_t>(get_u64(is));
  q.p = static_cast<std::int64_t>(get_u64(is));
  if (q.v < 1 || q.h < 1 || q.p < 1 || q.p > q.h || q.v > (1 << 26) ||
      q.h > (1 << 20))
    throw DataError("quantized model: implausible dimensions");
  q.act = static_cast<Activation>(get_u8(is));
  const std::uint64_t nwords = get_u64(is);
  if (nwords != static_cast<std::uint64_t>(q.v))
    throw DataError("quantized model: vocabulary size mismatch");
  q.words.reserve(nwords);
  for (std::uint64_t i = 0; i < nwords; ++i) q.words.push_back(get_string(is));
  q.e = detail::read_qmatrix(is, q.v, q.p);
  q.u = detail::read_qmatrix(is, q.p, q.h);
  q.w_rec = detail::read_qmatrix(is, q.h, q.h);
  q.d = detail::read_qmatrix(is, q.h, q.p);
  q.bits = q.e.bits;
  return q;
}

}  // namespace desklm

#endif  // DESKLM_COMPRESS_HPP
