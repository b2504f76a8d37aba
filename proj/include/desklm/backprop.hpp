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

#ifndef DESKLM_BACKPROP_HPP
#define DESKLM_BACKPROP_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "desklm/mat.hpp"
#include "desklm/nce.hpp"
#include "desklm/rnn.hpp"

namespace desklm {

enum class LossMode : std::uint8_t { kNce = 0, kSoftmax = 1 };

// One truncated-BPTT window over B parallel streams, t-major layout
// (index t*B + b). weights[i] = 0 masks a position out of the loss (used
// for bos targets, which are never predicted).
struct WindowBatch {
  std::int64_t T = 0;
  std::int64_t B = 0;
  std::vector<WordId> inputs;
  std::vector<WordId> targets;
  std::vector<std::uint8_t> weights;

  void resize(std::int64_t t, std::int64_t b) {
    T = t;
    B = b;
    inputs.assign(static_cast<std::size_t>(t * b), 0);
    targets.assign(static_cast<std::size_t>(t * b), 0);
    weights.assign(static_cast<std::size_t>(t * b), 1);
  }
};

template <class Real>
struct BpttOptions {
  LossMode mode = LossMode::kNce;
  const NoiseModel* noise = nullptr;  // required in NCE mode
  std::mt19937_64* rng = nullptr;     // required in NCE mode
  double loss_scale = 1.0;            // multiplies loss and gradients
  Real clip = Real(1);                // elementwise bound after accumulation
  int threads = 1;
  bool compute_grads = true;
};

struct BpttResult {
  double loss = 0.0;        // scaled loss, summed over scored positions
  std::size_t positions = 0;  // scored (unmasked) positions
};

// Runs forward, loss, and backward over one window for any model exposing
// the adapter interface (see StandardAdapter): shared state recurrence
//   h_{t+1} = act(input_forward(w_t) + h_t . W_rec^T)
// with the output side delegated per step. Gradients are exact for the
// scaled summed loss, truncated at h_0, and clipped elementwise at the end.
// In NCE mode the noise draws depend only on the rng stream (t, then b,
// then sample index; masked positions draw nothing), so a reseeded rng
// reproduces the sampling exactly regardless of parameter values.
template <class Adapter>
BpttResult bptt_run(const Adapter& model, const WindowBatch& wb,
                    const Mat<typename Adapter::RealT>& h0,
                    typename Adapter::Grads* grads,
                    Mat<typename Adapter::RealT>* h_final,
                    const BpttOptions<typename Adapter::RealT>& opt) {
  using Real = typename Adapter::RealT;
  using Acc = typename Adapter::AccT;
  const std::int64_t T = wb.T, B = wb.B, H = model.hidden();
  if (T < 1 || B < 1) throw std::invalid_argument("bptt: empty window");
  const auto n = static_cast<std::size_t>(T * B);
  if (wb.inputs.size() != n || wb.targets.size() != n || wb.weights.size() != n)
    throw std::invalid_argument("bptt: window size mismatch");
  if (h0.rows != B || h0.cols != H)
    throw std::invalid_argument("bptt: initial state shape mismatch");
  if (opt.mode == LossMode::kNce && (opt.noise == nullptr || opt.rng == nullptr))
    throw std::invalid_argument("bptt: NCE mode needs noise model and rng");

  const Activation act = model.activation();
  const bool want_grads = opt.compute_grads && grads != nullptr;

  // ----- forward -----
  std::vector<Mat<Real>> h(T + 1);
  std::vector<typename Adapter::OutCtx> ctx(T);
  h[0] = h0;
  Mat<Real> pre(B, H);
  for (std::int64_t t = 0; t < T; ++t) {
    matmul_nt<Acc>(h[t], model.w_rec(), pre, false, opt.threads);
    model.input_forward(
        std::span<const WordId>(wb.inputs.data() + t * B, B), pre,
        opt.threads);
    h[t + 1] = Mat<Real>(B, H);
    for (std::int64_t b = 0; b < B; ++b) {
      const Real* pi = pre.row(b);
      Real* hi = h[t + 1].row(b);
      for (std::int64_t i = 0; i < H; ++i) hi[i] = activate(act, pi[i]);
    }
    model.out_begin(h[t + 1], ctx[t], opt.threads);
  }
  if (h_final != nullptr) *h_final = h[T];

  // ----- loss -----
  BpttResult result;
  struct SampleRec {
    std::int32_t b;
    WordId w;
    Real ds;
  };
  std::vector<std::vector<SampleRec>> recs;     // NCE backward records
  std::vector<Mat<Real>> dscores;               // softmax backward records
  if (opt.mode == LossMode::kNce) {
    if (want_grads) recs.resize(T);
    const NoiseModel& noise = *opt.noise;
    std::mt19937_64& rng = *opt.rng;
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t b = 0; b < B; ++b) {
        const std::size_t idx = static_cast<std::size_t>(t * B + b);
        if (!wb.weights[idx]) continue;
        ++result.positions;
        const WordId y = wb.targets[idx];
        const double s_t =
            static_cast<double>(model.score(ctx[t], h[t + 1], b, y));
        const double a_t = s_t - noise.ln_kq(y);
        result.loss += opt.loss_scale * softplus(-a_t);
        if (want_grads)
          recs[t].push_back(
              {static_cast<std::int32_t>(b), y,
               static_cast<Real>(-opt.loss_scale * sigmoid(-a_t))});
        for (int j = 0; j < noise.k(); ++j) {
          const WordId w = noise.sample(rng);
          const double s =
              static_cast<double>(model.score(ctx[t], h[t + 1], b, w));
          const double a = s - noise.ln_kq(w);
          result.loss += opt.loss_scale * softplus(a);
          if (want_grads)
            recs[t].push_back(
                {static_cast<std::int32_t>(b), w,
                 static_cast<Real>(opt.loss_scale * sigmoid(a))});
        }
      }
    }
  } else {
    const std::int64_t V = model.vocab();
    if (want_grads) dscores.resize(T);
    Mat<Real> scores(B, V);
    for (std::int64_t t = 0; t < T; ++t) {
      model.softmax_scores(ctx[t], h[t + 1], scores, opt.threads);
      if (want_grads) dscores[t] = Mat<Real>(B, V);
      for (std::int64_t b = 0; b < B; ++b) {
        const std::size_t idx = static_cast<std::size_t>(t * B + b);
        if (!wb.weights[idx]) continue;
        ++result.positions;
        const Real* s = scores.row(b);
        double mx = static_cast<double>(s[0]);
        for (std::int64_t w = 1; w < V; ++w)
          mx = std::max(mx, static_cast<double>(s[w]));
        double z = 0.0;
        for (std::int64_t w = 0; w < V; ++w)
          z += std::exp(static_cast<double>(s[w]) - mx);
        const double lse = mx + std::log(z);
        const WordId y = wb.targets[idx];
        result.loss +=
            opt.loss_scale * (lse - static_cast<double>(s[y]));
        if (want_grads) {
          Real* d = dscores[t].row(b);
          for (std::int64_t w = 0; w < V; ++w)
            d[w] = static_cast<Real>(
                opt.loss_scale *
                std::exp(static_cast<double>(s[w]) - lse));
          d[y] -= static_cast<Real>(opt.loss_scale);
        }
      }
    }
  }
  if (!want_grads) return result;

  // ----- backward -----
  model.grads_reset(*grads, opt.mode == LossMode::kSoftmax);
  Mat<Real> dh(B, H);   // dLoss/dh[t+1] for the current t
  Mat<Real> dpre(B, H);
  dh.fill(Real(0));
  for (std::int64_t t = T - 1; t >= 0; --t) {
    // output-layer contribution at step t
    if (opt.mode == LossMode::kNce) {
      for (const SampleRec& r : recs[t])
        model.score_backward(ctx[t], h[t + 1], r.b, r.w, r.ds, dh, *grads);
      model.out_end(ctx[t], h[t + 1], dh, *grads, opt.threads);
    } else {
      model.softmax_backward(ctx[t], h[t + 1], dscores[t], dh, *grads,
                             opt.threads);
    }
    for (std::int64_t b = 0; b < B; ++b) {
      const Real* hi = h[t + 1].row(b);
      const Real* di = dh.row(b);
      Real* pi = dpre.row(b);
      for (std::int64_t i = 0; i < H; ++i)
        pi[i] = di[i] * activate_deriv(act, hi[i]);
    }
    matmul_tn_add(dpre, h[t], grads->w_rec);
    model.input_backward(std::span<const WordId>(wb.inputs.data() + t * B, B),
                         dpre, *grads, opt.threads);
    if (t > 0)
      matmul_nn<Acc>(dpre, model.w_rec(), dh, false, opt.threads);
  }
  grads->clip(opt.clip);
  return result;
}

// Forward-only loss evaluation (used by the finite-difference checks).
template <class Adapter>
BpttResult bptt_loss(const Adapter& model, const WindowBatch& wb,
                     const Mat<typename Adapter::RealT>& h0,
                     BpttOptions<typename Adapter::RealT> opt) {
  opt.compute_grads = false;
  return bptt_run(model, wb, h0, nullptr, nullptr, opt);
}

}  // namespace desklm

#endif  // DESKLM_BACKPROP_HPP
