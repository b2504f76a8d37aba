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

#ifndef DESKLM_MAT_HPP
#define DESKLM_MAT_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

namespace desklm {

// Dense row-major matrix. Everything model-sized in this codebase is either
// float (storage per the checkpoint formats) or double (verification builds),
// so the type stays a plain template with value semantics.
template <class T>
struct Mat {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<T> a;

  Mat() = default;
  Mat(std::int64_t r, std::int64_t c, T init = T(0))
      : rows(r), cols(c), a(static_cast<std::size_t>(r * c), init) {}

  T* row(std::int64_t i) { return a.data() + i * cols; }
  const T* row(std::int64_t i) const { return a.data() + i * cols; }
  std::span<T> row_span(std::int64_t i) {
    return {row(i), static_cast<std::size_t>(cols)};
  }
  std::span<const T> row_span(std::int64_t i) const {
    return {row(i), static_cast<std::size_t>(cols)};
  }
  T& at(std::int64_t i, std::int64_t j) { return a[i * cols + j]; }
  const T& at(std::int64_t i, std::int64_t j) const { return a[i * cols + j]; }
  std::int64_t size() const { return rows * cols; }
  void fill(T v) { a.assign(a.size(), v); }
};

// Dot product with accumulation in Acc. The eight fixed accumulator lanes
// keep the reduction order independent of the optimizer while still giving
// the compiler straight-line SLP lanes to vectorize.
template <class Acc, class T>
inline Acc dot_acc(const T* __restrict__ x, const T* __restrict__ y,
                   std::int64_t n) {
  Acc s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 += static_cast<Acc>(x[i + 0]) * static_cast<Acc>(y[i + 0]);
    s1 += static_cast<Acc>(x[i + 1]) * static_cast<Acc>(y[i + 1]);
    s2 += static_cast<Acc>(x[i + 2]) * static_cast<Acc>(y[i + 2]);
    s3 += static_cast<Acc>(x[i + 3]) * static_cast<Acc>(y[i + 3]);
    s4 += static_cast<Acc>(x[i + 4]) * static_cast<Acc>(y[i + 4]);
    s5 += static_cast<Acc>(x[i + 5]) * static_cast<Acc>(y[i + 5]);
    s6 += static_cast<Acc>(x[i + 6]) * static_cast<Acc>(y[i + 6]);
    s7 += static_cast<Acc>(x[i + 7]) * static_cast<Acc>(y[i + 7]);
  }
  Acc tail = 0;
  for (; i < n; ++i)
    tail += static_cast<Acc>(x[i]) * static_cast<Acc>(y[i]);
  return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)) + tail;
}

template <class T>
inline void axpy(T alpha, const T* __restrict__ x, T* __restrict__ y,
                 std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

namespace detail {
inline int clamp_threads(int threads, std::int64_t nrows) {
  if (threads < 1) threads = 1;
  if (static_cast<std::int64_t>(threads) > nrows)
    threads = static_cast<int>(nrows > 0 ? nrows : 1);
  return threads;
}
}  // namespace detail

// Runs fn(begin,end) over a row partition. Each output row is owned by one
// chunk, so results are identical for any thread count.
inline void parallel_rows(std::int64_t nrows, int threads,
                          const std::function<void(std::int64_t, std::int64_t)>& fn) {
  threads = detail::clamp_threads(threads, nrows);
  if (threads <= 1) {
    fn(0, nrows);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::int64_t chunk = (nrows + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const std::int64_t b = t * chunk;
    const std::int64_t e = std::min(nrows, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

// C = A * B^T (or += with accumulate), A: MxK, B: NxK, C: MxN.
template <class Acc, class T>
void matmul_nt(const Mat<T>& A, const Mat<T>& B, Mat<T>& C,
               bool accumulate = false, int threads = 1) {
  if (A.cols != B.cols || C.rows != A.rows || C.cols != B.rows)
    throw std::invalid_argument("matmul_nt: shape mismatch");
  const std::int64_t K = A.cols, N = B.rows;
  parallel_rows(A.rows, threads, [&](std::int64_t r0, std::int64_t r1) {
    for (std::int64_t i = r0; i < r1; ++i) {
      const T* ai = A.row(i);
      T* ci = C.row(i);
      for (std::int64_t j = 0; j < N; ++j) {
        const Acc s = dot_acc<Acc>(ai, B.row(j), K);
        ci[j] = accumulate ? static_cast<T>(static_cast<Acc>(ci[j]) + s)
                           : static_cast<T>(s);
      }
    }
  });
}

// C = A * B (or +=), A: MxK, B: KxN, C: MxN. Accumulates each output row in
// Acc before the single store back to T.
template <class Acc, class T>
void matmul_nn(const Mat<T>& A, const Mat<T>& B, Mat<T>& C,
               bool accumulate = false, int threads = 1) {
  if (A.cols != B.rows || C.rows != A.rows || C.cols != B.cols)
    throw std::invalid_argument("matmul_nn: shape mismatch");
  const std::int64_t K = A.cols, N = B.cols;
  parallel_rows(A.rows, threads, [&](std::int64_t r0, std::int64_t r1) {
    std::vector<Acc> acc(static_cast<std::size_t>(N));
    for (std::int64_t i = r0; i < r1; ++i) {
      if (accumulate) {
        const T* ci = C.row(i);
        for (std::int64_t j = 0; j < N; ++j) acc[j] = static_cast<Acc>(ci[j]);
      } else {
        std::fill(acc.begin(), acc.end(), Acc(0));
      }
      const T* ai = A.row(i);
      for (std::int64_t k = 0; k < K; ++k) {
        const Acc aik = static_cast<Acc>(ai[k]);
        if (aik == Acc(0)) continue;
        const T* bk = B.row(k);
        Acc* __restrict__ ac = acc.data();
        for (std::int64_t j = 0; j < N; ++j)
          ac[j] += aik * static_cast<Acc>(bk[j]);
      }
      T* ci = C.row(i);
      for (std::int64_t j = 0; j < N; ++j) ci[j] = static_cast<T>(acc[j]);
    }
  });
}

// C += A^T * B, A: KxM, B: KxN, C: MxN. Used for gradient outer products; the
// K dimension is a batch axis, so this accumulates directly in T.
template <class T>
void matmul_tn_add(const Mat<T>& A, const Mat<T>& B, Mat<T>& C) {
  if (A.rows != B.rows || C.rows != A.cols || C.cols != B.cols)
    throw std::invalid_argument("matmul_tn_add: shape mismatch");
  const std::int64_t K = A.rows, M = A.cols, N = B.cols;
  for (std::int64_t k = 0; k < K; ++k) {
    const T* ak = A.row(k);
    const T* bk = B.row(k);
    for (std::int64_t i = 0; i < M; ++i) {
      const T aki = ak[i];
      if (aki == T(0)) continue;
      axpy(aki, bk, C.row(i), N);
    }
  }
}

}  // namespace desklm

#endif  // DESKLM_MAT_HPP
