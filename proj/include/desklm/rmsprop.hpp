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

#ifndef DESKLM_RMSPROP_HPP
#define DESKLM_RMSPROP_HPP

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "desklm/mat.hpp"
#include "desklm/rnn.hpp"
#include "desklm/util.hpp"

namespace desklm {

// Squared-gradient accumulators for the standard model: per-element for the
// recurrent matrix, one scalar per word for the two embedding-shaped
// matrices (the scalar tracks the mean of the squared gradients across the
// word's H elements and divides the whole row's update). Accumulators are
// 32-bit, so the state occupies exactly (H^2 + 2V) * 4 bytes.
struct RmspropState {
  std::int64_t v = 0;
  std::int64_t h = 0;
  double rho = 0.9995;
  double eps = 1e-6;
  Mat<float> m_rec;           // H x H
  std::vector<float> m_in;    // V
  std::vector<float> m_out;   // V

  RmspropState() = default;
  RmspropState(std::int64_t v_, std::int64_t h_, double rho_, double eps_)
      : v(v_), h(h_), rho(rho_), eps(eps_), m_rec(h_, h_),
        m_in(static_cast<std::size_t>(v_), 0.0f),
        m_out(static_cast<std::size_t>(v_), 0.0f) {
    if (!(rho > 0.0 && rho < 1.0))
      throw std::invalid_argument("rmsprop: rho must be in (0,1)");
    if (eps <= 0.0) throw std::invalid_argument("rmsprop: eps must be > 0");
  }

  std::uint64_t bytes() const {
    return static_cast<std::uint64_t>(h * h + 2 * v) * 4;
  }
};

inline std::uint64_t rmsprop_state_bytes(std::int64_t h, std::int64_t v) {
  return static_cast<std::uint64_t>(h * h + 2 * v) * 4;
}

namespace detail {

template <class Real>
inline double mean_sq(std::span<const Real> xs) {
  double s = 0.0;
  for (Real x : xs) s += static_cast<double>(x) * static_cast<double>(x);
  return s / static_cast<double>(xs.size());
}

// Per-word-averaged rmsprop for one embedding-shaped sparse gradient:
// every accumulator decays, touched words add (1-rho) * mean(g^2), and the
// word's scalar divides all H elements of its update.
template <class Real>
inline void update_rows_sparse(Mat<Real>& w, const SparseRowGrads<Real>& g,
                               std::vector<float>& m, double rho, double eps,
                               double eta) {
  for (auto& x : m) x = static_cast<float>(rho * x);
  for (std::size_t s = 0; s < g.words.size(); ++s) {
    const WordId word = g.words[s];
    std::span<const Real> row{g.data.data() + s * g.width,
                              static_cast<std::size_t>(g.width)};
    m[word] += static_cast<float>((1.0 - rho) * mean_sq(row));
    const double denom = std::sqrt(static_cast<double>(m[word]) + eps);
    Real* wr = w.row(word);
    for (std::int64_t i = 0; i < g.width; ++i)
      wr[i] -= static_cast<Real>(eta * static_cast<double>(row[i]) / denom);
  }
}

template <class Real>
inline void update_rows_dense(Mat<Real>& w, const Mat<Real>& g,
                              std::vector<float>& m, double rho, double eps,
                              double eta) {
  for (std::int64_t word = 0; word < w.rows; ++word) {
    std::span<const Real> row = g.row_span(word);
    m[word] = static_cast<float>(rho * static_cast<double>(m[word]) +
                                 (1.0 - rho) * mean_sq(row));
    const double denom = std::sqrt(static_cast<double>(m[word]) + eps);
    Real* wr = w.row(word);
    for (std::int64_t i = 0; i < w.cols; ++i)
      wr[i] -= static_cast<Real>(eta * static_cast<double>(row[i]) / denom);
  }
}

}  // namespace detail

// Applies one update. Returns false (and leaves parameters and accumulators
// untouched) when any gradient component is non-finite.
template <class Real>
bool rmsprop_update(RnnParams<Real>& p, const StandardGrads<Real>& g,
                    RmspropState& s, double eta) {
  if (!g.finite()) return false;
  // recurrent matrix: plain per-element rmsprop
  for (std::int64_t i = 0; i < s.h * s.h; ++i) {
    const double gi = static_cast<double>(g.w_rec.a[i]);
    s.m_rec.a[i] = static_cast<float>(
        s.rho * static_cast<double>(s.m_rec.a[i]) + (1.0 - s.rho) * gi * gi);
    p.w_rec.a[i] -= static_cast<Real>(
        eta * gi / std::sqrt(static_cast<double>(s.m_rec.a[i]) + s.eps));
  }
  detail::update_rows_sparse(p.w_in, g.w_in, s.m_in, s.rho, s.eps, eta);
  if (g.out_dense)
    detail::update_rows_dense(p.w_out, g.w_out_dense, s.m_out, s.rho, s.eps,
                              eta);
  else
    detail::update_rows_sparse(p.w_out, g.w_out_sp, s.m_out, s.rho, s.eps,
                               eta);
  return true;
}

// ----- serialization ("ROPT"): header then the raw accumulator payload -----

constexpr std::uint32_t kRmspropFormatVersion = 1;

inline void write_rmsprop(std::ostream& os, const RmspropState& s) {
  put_magic(os, "ROPT");
  put_u32(os, kRmspropFormatVersion);
  put_u64(os, static_cast<std::uint64_t>(s.v));
  put_u64(os, static_cast<std::uint64_t>(s.h));
  put_f64(os, s.rho);
  put_f64(os, s.eps);
  for (float x : s.m_rec.a) put_f32(os, x);
  for (float x : s.m_in) put_f32(os, x);
  for (float x : s.m_out) put_f32(os, x);
}

inline RmspropState read_rmsprop(std::istream& is) {
  expect_magic(is, "ROPT", "rmsprop state");
  const std::uint32_t version = get_u32(is);
  if (version != kRmspropFormatVersion)
    throw DataError("rmsprop state: unsupported version " +
                    std::to_string(version));
  const auto v = static_cast<std::int64_t>(get_u64(is));
  const auto h = static_cast<std::int64_t>(get_u64(is));
  const double rho = get_f64(is);
  const double eps = get_f64(is);
  RmspropState s(v, h, rho, eps);
  for (auto& x : s.m_rec.a) x = get_f32(is);
  for (auto& x : s.m_in) x = get_f32(is);
  for (auto& x : s.m_out) x = get_f32(is);
  return s;
}

// Byte offset of the accumulator payload within the serialized state: the
// magic, version, two dims, and two doubles.
constexpr std::uint64_t kRmspropHeaderBytes = 4 + 4 + 8 + 8 + 8 + 8;

}  // namespace desklm

#endif  // DESKLM_RMSPROP_HPP
