// The shared BPTT engine, NCE loss, noise model, and rmsprop optimizer.
// Gradients are checked against central finite differences (oracles/
// fd_check.hpp) and losses against independent forward replays implemented
// here from the model equations.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "desklm/desklm.hpp"
#include "oracles/fd_check.hpp"
#include "oracles/helpers.hpp"

using namespace desklm;

namespace {

double softplus_ref(double x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0);
}
double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

WindowBatch random_batch(std::mt19937_64& rng, std::int64_t t, std::int64_t b,
                         std::int64_t v, double mask_p) {
  WindowBatch wb;
  wb.resize(t, b);
  for (auto& w : wb.inputs) w = static_cast<WordId>(uniform_index(rng, v));
  for (auto& w : wb.targets) {
    // any id except bos (bos is never a prediction target)
    w = static_cast<WordId>(uniform_index(rng, v - 1));
    if (w >= Vocabulary::kBosId) ++w;
  }
  for (auto& m : wb.weights) m = uniform01(rng) < mask_p ? 0 : 1;
  return wb;
}

NoiseModel random_noise(std::mt19937_64& rng, std::int64_t v, int k) {
  std::vector<double> counts(static_cast<std::size_t>(v));
  for (auto& c : counts) c = 1.0 + static_cast<double>(uniform_index(rng, 50));
  counts[Vocabulary::kBosId] = 0.0;
  return NoiseModel(std::move(counts), k);
}

template <class Real>
Mat<Real> random_state(std::mt19937_64& rng, std::int64_t b, std::int64_t h) {
  Mat<Real> m(b, h);
  for (auto& x : m.a) x = static_cast<Real>(uniform(rng, -0.5, 0.5));
  return m;
}

// ----- independent forward replay (double math from the stored params) -----

template <class Real>
std::vector<Mat<double>> ref_forward(const RnnParams<Real>& p,
                                     const WindowBatch& wb,
                                     const Mat<Real>& h0) {
  std::vector<Mat<double>> h(wb.T + 1, Mat<double>(wb.B, p.h));
  for (std::size_t i = 0; i < h0.a.size(); ++i)
    h[0].a[i] = static_cast<double>(h0.a[i]);
  for (std::int64_t t = 0; t < wb.T; ++t)
    for (std::int64_t b = 0; b < wb.B; ++b) {
      const WordId w = wb.inputs[t * wb.B + b];
      for (std::int64_t i = 0; i < p.h; ++i) {
        double pre = static_cast<double>(p.w_in.at(w, i));
        for (std::int64_t j = 0; j < p.h; ++j)
          pre += static_cast<double>(p.w_rec.at(i, j)) * h[t].at(b, j);
        h[t + 1].at(b, i) = p.act == Activation::kSigmoid
                                ? sigmoid_ref(pre)
                                : std::tanh(pre);
      }
    }
  return h;
}

template <class Real>
std::vector<Mat<double>> ref_forward(const BottleneckParams<Real>& p,
                                     const WindowBatch& wb,
                                     const Mat<Real>& h0) {
  std::vector<Mat<double>> h(wb.T + 1, Mat<double>(wb.B, p.h));
  for (std::size_t i = 0; i < h0.a.size(); ++i)
    h[0].a[i] = static_cast<double>(h0.a[i]);
  for (std::int64_t t = 0; t < wb.T; ++t)
    for (std::int64_t b = 0; b < wb.B; ++b) {
      const WordId w = wb.inputs[t * wb.B + b];
      for (std::int64_t i = 0; i < p.h; ++i) {
        double pre = 0.0;
        for (std::int64_t k = 0; k < p.p; ++k)
          pre += static_cast<double>(p.e.at(w, k)) *
                 static_cast<double>(p.u.at(k, i));
        for (std::int64_t j = 0; j < p.h; ++j)
          pre += static_cast<double>(p.w_rec.at(i, j)) * h[t].at(b, j);
        h[t + 1].at(b, i) = p.act == Activation::kSigmoid
                                ? sigmoid_ref(pre)
                                : std::tanh(pre);
      }
    }
  return h;
}

template <class Real>
double ref_score(const RnnParams<Real>& p, const Mat<double>& h,
                 std::int64_t b, WordId w) {
  double s = 0.0;
  for (std::int64_t i = 0; i < p.h; ++i)
    s += h.at(b, i) * static_cast<double>(p.w_out.at(w, i));
  return s;
}

template <class Real>
double ref_score(const BottleneckParams<Real>& p, const Mat<double>& h,
                 std::int64_t b, WordId w) {
  double s = 0.0;
  for (std::int64_t k = 0; k < p.p; ++k) {
    double z = 0.0;
    for (std::int64_t i = 0; i < p.h; ++i)
      z += h.at(b, i) * static_cast<double>(p.d.at(i, k));
    s += static_cast<double>(p.e.at(w, k)) * z;
  }
  return s;
}

template <class Params, class Real>
double ref_softmax_loss(const Params& p, const WindowBatch& wb,
                        const Mat<Real>& h0, double scale) {
  const auto h = ref_forward(p, wb, h0);
  double loss = 0.0;
  for (std::int64_t t = 0; t < wb.T; ++t)
    for (std::int64_t b = 0; b < wb.B; ++b) {
      if (!wb.weights[t * wb.B + b]) continue;
      std::vector<double> s(static_cast<std::size_t>(p.v));
      for (std::int64_t w = 0; w < p.v; ++w)
        s[w] = ref_score(p, h[t + 1], b, static_cast<WordId>(w));
      const auto prob = testutil::softmax_ref(s);
      loss -= scale * std::log(prob[wb.targets[t * wb.B + b]]);
    }
  return loss;
}

// Replays the engine's draw order (t, then b skipping masked, then j).
template <class Params, class Real>
double ref_nce_loss(const Params& p, const WindowBatch& wb,
                    const Mat<Real>& h0, const NoiseModel& noise,
                    std::uint64_t seed, double scale) {
  const auto h = ref_forward(p, wb, h0);
  std::mt19937_64 rng(seed);
  double loss = 0.0;
  for (std::int64_t t = 0; t < wb.T; ++t)
    for (std::int64_t b = 0; b < wb.B; ++b) {
      if (!wb.weights[t * wb.B + b]) continue;
      const WordId y = wb.targets[t * wb.B + b];
      loss += scale *
              softplus_ref(-(ref_score(p, h[t + 1], b, y) - noise.ln_kq(y)));
      for (int j = 0; j < noise.k(); ++j) {
        const WordId w = noise.sample(rng);
        loss += scale *
                softplus_ref(ref_score(p, h[t + 1], b, w) - noise.ln_kq(w));
      }
    }
  return loss;
}

template <class Adapter>
BpttResult run_once(const typename Adapter::Params& p, const WindowBatch& wb,
                    const Mat<typename Adapter::RealT>& h0, LossMode mode,
                    const NoiseModel* noise, std::uint64_t seed,
                    typename Adapter::Grads* g,
                    Mat<typename Adapter::RealT>* hf = nullptr,
                    double scale = 1.0,
                    double clip = std::numeric_limits<double>::max()) {
  Adapter a(p);
  BpttOptions<typename Adapter::RealT> opt;
  opt.mode = mode;
  opt.noise = noise;
  std::mt19937_64 rng(seed);
  opt.rng = &rng;
  opt.loss_scale = scale;
  opt.clip = static_cast<typename Adapter::RealT>(clip);
  return bptt_run(a, wb, h0, g, hf, opt);
}

}  // namespace

TEST_CASE("finite differences validate the gradients (pinned instance)") {
  std::mt19937_64 rng(101);
  const WindowBatch wb = random_batch(rng, 4, 2, 7, 0.15);
  const NoiseModel noise = random_noise(rng, 7, 3);

  SECTION("standard model") {
    RnnParams<float> pf(7, 5, Activation::kSigmoid);
    pf.init_uniform(11);
    RnnParams<double> pd(7, 5, Activation::kSigmoid);
    pd.init_uniform(11);
    const auto h0f = random_state<float>(rng, 2, 5);
    Mat<double> h0d(2, 5);
    for (std::size_t i = 0; i < h0f.a.size(); ++i) h0d.a[i] = h0f.a[i];
    for (LossMode mode : {LossMode::kNce, LossMode::kSoftmax}) {
      const auto f = testutil::fd_check<StandardAdapter<float>>(
          pf, wb, h0f, mode, &noise, 5, 1e-3, 0.5);
      INFO("float max_rel " << f.max_rel << " over " << f.checked);
      CHECK(f.max_rel < 1e-2);
      const auto d = testutil::fd_check<StandardAdapter<double>>(
          pd, wb, h0d, mode, &noise, 5, 1e-6, 1e-3);
      INFO("double max_rel " << d.max_rel << " over " << d.checked);
      CHECK(d.max_rel < 1e-5);
      CHECK(d.checked == 7 * 5 * 2 + 5 * 5);
    }
  }

  SECTION("bottleneck model") {
    BottleneckParams<float> pf(7, 5, 3, Activation::kTanh);
    pf.init_uniform(13);
    BottleneckParams<double> pd(7, 5, 3, Activation::kTanh);
    pd.init_uniform(13);
    const auto h0f = random_state<float>(rng, 2, 5);
    Mat<double> h0d(2, 5);
    for (std::size_t i = 0; i < h0f.a.size(); ++i) h0d.a[i] = h0f.a[i];
    for (LossMode mode : {LossMode::kNce, LossMode::kSoftmax}) {
      const auto f = testutil::fd_check<BottleneckAdapter<float>>(
          pf, wb, h0f, mode, &noise, 7, 1e-3, 0.5);
      INFO("float max_rel " << f.max_rel << " over " << f.checked);
      CHECK(f.max_rel < 1e-2);
      const auto d = testutil::fd_check<BottleneckAdapter<double>>(
          pd, wb, h0d, mode, &noise, 7, 1e-6, 1e-3);
      INFO("double max_rel " << d.max_rel << " over " << d.checked);
      CHECK(d.max_rel < 1e-5);
      CHECK(d.checked == 7 * 3 + 3 * 5 + 5 * 5 + 5 * 3);
    }
  }
}

TEST_CASE("finite differences on randomized configurations") {
  std::mt19937_64 rng(103);
  for (int c = 0; c < 8; ++c) {
    const auto v = static_cast<std::int64_t>(5 + uniform_index(rng, 8));
    const auto h = static_cast<std::int64_t>(2 + uniform_index(rng, 6));
    const auto t = static_cast<std::int64_t>(1 + uniform_index(rng, 5));
    const auto b = static_cast<std::int64_t>(1 + uniform_index(rng, 3));
    const int k = static_cast<int>(1 + uniform_index(rng, 5));
    const Activation act =
        uniform01(rng) < 0.5 ? Activation::kSigmoid : Activation::kTanh;
    const LossMode mode = c % 2 ? LossMode::kNce : LossMode::kSoftmax;
    const WindowBatch wb = random_batch(rng, t, b, v, 0.2);
    const NoiseModel noise = random_noise(rng, v, k);
    const auto h0 = random_state<double>(rng, b, h);
    INFO("config " << c << ": V=" << v << " H=" << h << " T=" << t
                   << " B=" << b << " k=" << k);
    if (c < 4) {
      RnnParams<double> p(v, h, act);
      p.init_uniform(200 + c);
      const auto r = testutil::fd_check<StandardAdapter<double>>(
          p, wb, h0, mode, &noise, 300 + c, 1e-6, 1e-3);
      CHECK(r.max_rel < 1e-5);
    } else {
      const auto pp = static_cast<std::int64_t>(1 + uniform_index(rng, h));
      BottleneckParams<double> p(v, h, pp, act);
      p.init_uniform(200 + c);
      const auto r = testutil::fd_check<BottleneckAdapter<double>>(
          p, wb, h0, mode, &noise, 300 + c, 1e-6, 1e-3);
      CHECK(r.max_rel < 1e-5);
    }
  }
}

TEST_CASE("nce loss matches the closed formula on random instances") {
  std::mt19937_64 rng(107);
  for (int i = 0; i < 100; ++i) {
    const std::int64_t v = 6 + static_cast<std::int64_t>(uniform_index(rng, 10));
    const int k = static_cast<int>(1 + uniform_index(rng, 7));
    const NoiseModel noise = random_noise(rng, v, k);
    const auto target =
        static_cast<WordId>(uniform_index(rng, v));
    const double ts = uniform(rng, -8.0, 8.0);
    std::vector<WordId> samples(k);
    std::vector<double> scores(k);
    for (int j = 0; j < k; ++j) {
      samples[j] = static_cast<WordId>(uniform_index(rng, v));
      scores[j] = uniform(rng, -8.0, 8.0);
    }
    const NceLossResult r = nce_loss(ts, target, scores, samples, noise);

    // direct translation of the defining ratios, evaluated with plain exp
    const double kq_t = static_cast<double>(k) * noise.q(target);
    const double pt = std::exp(ts);
    double want = -std::log(pt / (pt + kq_t));
    for (int j = 0; j < k; ++j) {
      const double kq = static_cast<double>(k) * noise.q(samples[j]);
      const double pn = std::exp(scores[j]);
      want -= std::log(kq / (pn + kq));
    }
    CHECK(r.loss == Catch::Approx(want).margin(1e-6));

    REQUIRE(r.score_grads.size() == static_cast<std::size_t>(k) + 1);
    REQUIRE(r.posteriors.size() == static_cast<std::size_t>(k) + 1);
    CHECK(r.score_grads[0] ==
          Catch::Approx(-sigmoid_ref(-(ts - std::log(kq_t)))).margin(1e-12));
    CHECK(r.posteriors[0] ==
          Catch::Approx(sigmoid_ref(ts - std::log(kq_t))).margin(1e-12));
    for (int j = 0; j < k; ++j) {
      const double a = scores[j] - std::log(static_cast<double>(k) *
                                            noise.q(samples[j]));
      CHECK(r.score_grads[j + 1] ==
            Catch::Approx(sigmoid_ref(a)).margin(1e-12));
      CHECK(r.posteriors[j + 1] ==
            Catch::Approx(sigmoid_ref(a)).margin(1e-12));
    }
  }
}

TEST_CASE("nce at zero margin costs exactly 2 ln 2") {
  // one noise sample, both scores equal to ln(k q): every posterior is 1/2
  NoiseModel noise({1.0, 1.0, 2.0, 4.0}, 1);
  const WordId target = 3, sample = 2;
  const double st = noise.ln_kq(target), sn = noise.ln_kq(sample);
  const NceLossResult r =
      nce_loss(st, target, std::vector<double>{sn},
               std::vector<WordId>{sample}, noise);
  CHECK(r.loss == Catch::Approx(2.0 * std::log(2.0)).margin(1e-12));
  CHECK(r.posteriors[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(r.posteriors[1] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("nce loss input validation") {
  NoiseModel noise({1.0, 1.0, 2.0}, 2);
  std::vector<double> one_score{0.0};
  std::vector<WordId> one_sample{0};
  CHECK_THROWS_AS(nce_loss(0.0, 0, one_score, one_sample, noise),
                  std::invalid_argument);
}

TEST_CASE("bptt softmax loss equals an independent replay") {
  std::mt19937_64 rng(109);
  const WindowBatch wb = random_batch(rng, 5, 3, 9, 0.2);

  RnnParams<double> ps(9, 6, Activation::kSigmoid);
  ps.init_uniform(21);
  const auto h0s = random_state<double>(rng, 3, 6);
  const BpttResult r = run_once<StandardAdapter<double>>(
      ps, wb, h0s, LossMode::kSoftmax, nullptr, 0, nullptr);
  CHECK(r.loss ==
        Catch::Approx(ref_softmax_loss(ps, wb, h0s, 1.0)).epsilon(1e-10));

  BottleneckParams<double> pb(9, 6, 4, Activation::kTanh);
  pb.init_uniform(23);
  const BpttResult rb = run_once<BottleneckAdapter<double>>(
      pb, wb, h0s, LossMode::kSoftmax, nullptr, 0, nullptr);
  CHECK(rb.loss ==
        Catch::Approx(ref_softmax_loss(pb, wb, h0s, 1.0)).epsilon(1e-10));

  // float path agrees with the double reference to single precision
  RnnParams<float> pf(9, 6, Activation::kSigmoid);
  pf.init_uniform(21);
  Mat<float> h0f(3, 6);
  for (std::size_t i = 0; i < h0s.a.size(); ++i)
    h0f.a[i] = static_cast<float>(h0s.a[i]);
  const BpttResult rf = run_once<StandardAdapter<float>>(
      pf, wb, h0f, LossMode::kSoftmax, nullptr, 0, nullptr);
  CHECK(rf.loss ==
        Catch::Approx(ref_softmax_loss(pf, wb, h0f, 1.0)).epsilon(1e-4));
}

TEST_CASE("bptt nce loss equals an independent replay with shared draws") {
  std::mt19937_64 rng(113);
  const WindowBatch wb = random_batch(rng, 6, 2, 11, 0.25);
  const NoiseModel noise = random_noise(rng, 11, 4);
  RnnParams<double> p(11, 5, Activation::kSigmoid);
  p.init_uniform(31);
  const auto h0 = random_state<double>(rng, 2, 5);
  const BpttResult r = run_once<StandardAdapter<double>>(
      p, wb, h0, LossMode::kNce, &noise, 424242, nullptr);
  CHECK(r.loss == Catch::Approx(ref_nce_loss(p, wb, h0, noise, 424242, 1.0))
                      .epsilon(1e-10));
  std::size_t unmasked = 0;
  for (auto w : wb.weights) unmasked += w;
  CHECK(r.positions == unmasked);
}

TEST_CASE("batched forward equals independent single streams") {
  std::mt19937_64 rng(127);
  const std::int64_t T = 5, B = 4, V = 10, H = 6;
  const WindowBatch wb = random_batch(rng, T, B, V, 0.0);

  const double tolf = 1e-6;
  RnnParams<float> p(V, H, Activation::kSigmoid);
  p.init_uniform(41);
  const auto h0 = random_state<float>(rng, B, H);
  StandardAdapter<float>::Grads g;
  Mat<float> hf;
  const BpttResult batch = run_once<StandardAdapter<float>>(
      p, wb, h0, LossMode::kSoftmax, nullptr, 0, &g, &hf);
  const Mat<float> gin = g.w_in.to_dense(V);
  const Mat<float> grec = g.w_rec;
  const Mat<float> gout = g.out_dense ? g.w_out_dense : g.w_out_sp.to_dense(V);

  double loss_sum = 0.0;
  Mat<double> gin_sum(V, H), grec_sum(H, H), gout_sum(V, H);
  for (std::int64_t b = 0; b < B; ++b) {
    WindowBatch single;
    single.resize(T, 1);
    for (std::int64_t t = 0; t < T; ++t) {
      single.inputs[t] = wb.inputs[t * B + b];
      single.targets[t] = wb.targets[t * B + b];
    }
    Mat<float> h0b(1, H);
    for (std::int64_t i = 0; i < H; ++i) h0b.at(0, i) = h0.at(b, i);
    StandardAdapter<float>::Grads gb;
    Mat<float> hfb;
    loss_sum += run_once<StandardAdapter<float>>(
                    p, single, h0b, LossMode::kSoftmax, nullptr, 0, &gb, &hfb)
                    .loss;
    for (std::int64_t i = 0; i < H; ++i)
      CHECK(hfb.at(0, i) == Catch::Approx(hf.at(b, i)).margin(tolf));
    const Mat<float> gbin = gb.w_in.to_dense(V);
    const Mat<float> gbout =
        gb.out_dense ? gb.w_out_dense : gb.w_out_sp.to_dense(V);
    for (std::size_t i = 0; i < gin_sum.a.size(); ++i)
      gin_sum.a[i] += gbin.a[i];
    for (std::size_t i = 0; i < grec_sum.a.size(); ++i)
      grec_sum.a[i] += gb.w_rec.a[i];
    for (std::size_t i = 0; i < gout_sum.a.size(); ++i)
      gout_sum.a[i] += gbout.a[i];
  }
  CHECK(batch.loss == Catch::Approx(loss_sum).epsilon(1e-6));
  for (std::size_t i = 0; i < gin_sum.a.size(); ++i)
    CHECK(gin.a[i] == Catch::Approx(gin_sum.a[i]).margin(1e-5));
  for (std::size_t i = 0; i < grec_sum.a.size(); ++i)
    CHECK(grec.a[i] == Catch::Approx(grec_sum.a[i]).margin(1e-5));
  for (std::size_t i = 0; i < gout_sum.a.size(); ++i)
    CHECK(gout.a[i] == Catch::Approx(gout_sum.a[i]).margin(1e-5));
}

TEST_CASE("masked positions contribute nothing") {
  std::mt19937_64 rng(131);
  WindowBatch wb = random_batch(rng, 4, 2, 8, 0.0);
  RnnParams<double> p(8, 4, Activation::kSigmoid);
  p.init_uniform(51);
  const auto h0 = random_state<double>(rng, 2, 4);

  const double full = run_once<StandardAdapter<double>>(
                          p, wb, h0, LossMode::kSoftmax, nullptr, 0, nullptr)
                          .loss;
  // knock out one position; the loss drops by exactly its contribution
  wb.weights[5] = 0;
  const double less = run_once<StandardAdapter<double>>(
                          p, wb, h0, LossMode::kSoftmax, nullptr, 0, nullptr)
                          .loss;
  WindowBatch only;
  only.resize(4, 2);
  only.inputs = wb.inputs;
  only.targets = wb.targets;
  for (auto& w : only.weights) w = 0;
  only.weights[5] = 1;
  const double just_it =
      run_once<StandardAdapter<double>>(p, only, h0, LossMode::kSoftmax,
                                        nullptr, 0, nullptr)
          .loss;
  CHECK(full == Catch::Approx(less + just_it).epsilon(1e-12));

  // fully masked: zero loss, zero positions, zero gradients
  WindowBatch none = wb;
  for (auto& w : none.weights) w = 0;
  StandardAdapter<double>::Grads g;
  const BpttResult rn = run_once<StandardAdapter<double>>(
      p, none, h0, LossMode::kSoftmax, nullptr, 0, &g);
  CHECK(rn.loss == 0.0);
  CHECK(rn.positions == 0);
  const Mat<double> gout = g.out_dense ? g.w_out_dense : g.w_out_sp.to_dense(8);
  for (double x : g.w_rec.a) CHECK(x == 0.0);
  for (double x : gout.a) CHECK(x == 0.0);
}

TEST_CASE("loss_scale multiplies the loss and every gradient") {
  std::mt19937_64 rng(137);
  const WindowBatch wb = random_batch(rng, 3, 2, 9, 0.1);
  const NoiseModel noise = random_noise(rng, 9, 3);
  RnnParams<double> p(9, 5, Activation::kTanh);
  p.init_uniform(61);
  const auto h0 = random_state<double>(rng, 2, 5);

  StandardAdapter<double>::Grads g1, g2;
  const double l1 = run_once<StandardAdapter<double>>(
                        p, wb, h0, LossMode::kNce, &noise, 9, &g1, nullptr, 1.0)
                        .loss;
  const double l2 = run_once<StandardAdapter<double>>(
                        p, wb, h0, LossMode::kNce, &noise, 9, &g2, nullptr, 2.5)
                        .loss;
  CHECK(l2 == Catch::Approx(2.5 * l1).epsilon(1e-12));
  const Mat<double> a1 = g1.w_in.to_dense(9), a2 = g2.w_in.to_dense(9);
  for (std::size_t i = 0; i < a1.a.size(); ++i)
    CHECK(a2.a[i] == Catch::Approx(2.5 * a1.a[i]).margin(1e-12));
  for (std::size_t i = 0; i < g1.w_rec.a.size(); ++i)
    CHECK(g2.w_rec.a[i] == Catch::Approx(2.5 * g1.w_rec.a[i]).margin(1e-12));
}

TEST_CASE("gradient clipping bounds every component") {
  std::mt19937_64 rng(139);
  const WindowBatch wb = random_batch(rng, 6, 3, 12, 0.0);
  RnnParams<float> p(12, 6, Activation::kSigmoid);
  p.init_uniform(71, 0.8);  // large weights so raw gradients exceed the bound
  const auto h0 = random_state<float>(rng, 3, 6);
  StandardAdapter<float>::Grads g;
  run_once<StandardAdapter<float>>(p, wb, h0, LossMode::kSoftmax, nullptr, 0,
                                   &g, nullptr, 1.0, 0.01);
  const Mat<float> gin = g.w_in.to_dense(12);
  const Mat<float> gout = g.out_dense ? g.w_out_dense : g.w_out_sp.to_dense(12);
  float mx = 0.0f;
  for (float x : gin.a) mx = std::max(mx, std::abs(x));
  for (float x : g.w_rec.a) mx = std::max(mx, std::abs(x));
  for (float x : gout.a) mx = std::max(mx, std::abs(x));
  CHECK(mx <= 0.01f);
  CHECK(mx > 0.0f);
}

TEST_CASE("identical seeds give identical losses and gradients") {
  std::mt19937_64 rng(149);
  const WindowBatch wb = random_batch(rng, 5, 2, 10, 0.2);
  const NoiseModel noise = random_noise(rng, 10, 5);
  RnnParams<float> p(10, 6, Activation::kSigmoid);
  p.init_uniform(81);
  const auto h0 = random_state<float>(rng, 2, 6);
  StandardAdapter<float>::Grads g1, g2;
  const double l1 =
      run_once<StandardAdapter<float>>(p, wb, h0, LossMode::kNce, &noise, 33,
                                       &g1)
          .loss;
  const double l2 =
      run_once<StandardAdapter<float>>(p, wb, h0, LossMode::kNce, &noise, 33,
                                       &g2)
          .loss;
  CHECK(l1 == l2);
  CHECK(g1.w_in.data == g2.w_in.data);
  CHECK(g1.w_rec.a == g2.w_rec.a);
  CHECK(g1.w_out_sp.data == g2.w_out_sp.data);
  CHECK(g1.w_out_sp.words == g2.w_out_sp.words);
}

TEST_CASE("noise model is a floored, renormalized unigram") {
  NoiseModel n({0.0, 4.0, 6.0, 10.0}, 3, 0.01);
  // raw {0, .2, .3, .5} -> floor lifts word 0 to 0.01 -> renormalize by 1.01
  CHECK(n.q(0) == Catch::Approx(0.01 / 1.01).margin(1e-12));
  CHECK(n.q(1) == Catch::Approx(0.20 / 1.01).margin(1e-12));
  CHECK(n.q(2) == Catch::Approx(0.30 / 1.01).margin(1e-12));
  CHECK(n.q(3) == Catch::Approx(0.50 / 1.01).margin(1e-12));
  double sum = 0.0;
  for (WordId w = 0; w < 4; ++w) {
    sum += n.q(w);
    CHECK(n.ln_kq(w) == Catch::Approx(std::log(3.0 * n.q(w))).margin(1e-12));
  }
  CHECK(sum == Catch::Approx(1.0).margin(1e-12));
  CHECK(n.k() == 3);
  CHECK(n.vocab() == 4);

  CHECK_THROWS_AS(NoiseModel({1.0}, 0), std::invalid_argument);
  CHECK_THROWS_AS(NoiseModel({}, 2), std::invalid_argument);
  CHECK_THROWS_AS(NoiseModel({-1.0, 2.0}, 2), std::invalid_argument);
  CHECK_THROWS_AS(NoiseModel({0.0, 0.0}, 2), std::invalid_argument);
}

TEST_CASE("noise model built from a stream ignores bos") {
  IdStream s;
  s.ids = {1, 3, 4, 4, 2, 1, 3, 2};  // bos twice, never counted
  const NoiseModel n = NoiseModel::from_stream(s, 5, 2);
  // counts: w2 (eos) 2, w3 2, w4 2 of 6 tokens; bos and unk floored
  CHECK(n.q(2) == Catch::Approx(n.q(3)).margin(1e-9));
  CHECK(n.q(1) < 1e-7);
  CHECK(n.q(0) < 1e-7);
}

TEST_CASE("noise sampling follows the distribution") {
  std::mt19937_64 rng(151);
  const NoiseModel n = random_noise(rng, 40, 1);
  std::vector<std::size_t> hist(40, 0);
  const std::size_t draws = 200000;
  for (std::size_t i = 0; i < draws; ++i) ++hist[n.sample(rng)];
  for (WordId w = 0; w < 40; ++w) {
    const double emp =
        static_cast<double>(hist[w]) / static_cast<double>(draws);
    const double sd =
        std::sqrt(n.q(w) * (1.0 - n.q(w)) / static_cast<double>(draws));
    CHECK(std::abs(emp - n.q(w)) < 5.0 * sd + 2e-4);
  }
}

TEST_CASE("rmsprop leaves parameters alone on zero gradients") {
  RnnParams<float> p(6, 4, Activation::kSigmoid);
  p.init_uniform(91);
  const std::vector<float> before_in(p.w_in.a), before_rec(p.w_rec.a),
      before_out(p.w_out.a);
  RmspropState s(6, 4, 0.9, 1e-6);
  // seed the accumulators so the decay is observable
  for (auto& m : s.m_rec.a) m = 2.0f;
  for (auto& m : s.m_in) m = 3.0f;
  for (auto& m : s.m_out) m = 5.0f;

  StandardGrads<float> g;
  StandardAdapter<float> a(p);
  a.grads_reset(g, false);  // sparse, no touched rows: all-zero gradient
  REQUIRE(rmsprop_update(p, g, s, 0.5));

  CHECK(p.w_in.a == before_in);
  CHECK(p.w_rec.a == before_rec);
  CHECK(p.w_out.a == before_out);
  for (float m : s.m_rec.a) CHECK(m == Catch::Approx(1.8f).margin(1e-7));
  for (float m : s.m_in) CHECK(m == Catch::Approx(2.7f).margin(1e-7));
  for (float m : s.m_out) CHECK(m == Catch::Approx(4.5f).margin(1e-7));
}

TEST_CASE("rmsprop per-word averaging matches a hand computation") {
  RnnParams<float> p(4, 2, Activation::kSigmoid);
  p.w_in.fill(0.0f);
  p.w_rec.fill(0.0f);
  p.w_out.fill(0.0f);
  RmspropState s(4, 2, 0.5, 1e-6);
  s.m_in[2] = 8.0f;

  StandardGrads<float> g;
  StandardAdapter<float> a(p);
  a.grads_reset(g, false);
  const float row[2] = {3.0f, 4.0f};
  g.w_in.axpy_row(2, 1.0f, row);  // word 2: mean g^2 = (9+16)/2 = 12.5
  g.w_rec.at(1, 0) = 2.0f;        // plain per-element path

  REQUIRE(rmsprop_update(p, g, s, 0.1));

  // m = 0.5*8 + 0.5*12.5 = 10.25; step_i = 0.1 * g_i / sqrt(10.25 + 1e-6)
  const double denom = std::sqrt(10.25 + 1e-6);
  CHECK(s.m_in[2] == Catch::Approx(10.25).margin(1e-5));
  CHECK(p.w_in.at(2, 0) == Catch::Approx(-0.1 * 3.0 / denom).margin(1e-6));
  CHECK(p.w_in.at(2, 1) == Catch::Approx(-0.1 * 4.0 / denom).margin(1e-6));
  // untouched word rows unchanged, accumulators decayed
  CHECK(p.w_in.at(0, 0) == 0.0f);
  CHECK(s.m_in[0] == 0.0f);

  const double drec = std::sqrt(0.5 * 4.0 + 1e-6);
  CHECK(p.w_rec.at(1, 0) == Catch::Approx(-0.1 * 2.0 / drec).margin(1e-6));
  CHECK(s.m_rec.at(1, 0) == Catch::Approx(2.0).margin(1e-6));
  CHECK(p.w_rec.at(0, 0) == 0.0f);
}

TEST_CASE("rmsprop sparse and dense embedding paths agree") {
  std::mt19937_64 rng(157);
  const std::int64_t V = 8, H = 5;
  RnnParams<float> p1(V, H, Activation::kSigmoid), p2;
  p1.init_uniform(97);
  p2 = p1;
  RmspropState s1(V, H, 0.9995, 1e-6), s2 = s1;
  for (auto& m : s1.m_out) m = 0.25f;
  s2 = s1;

  StandardGrads<float> gs, gd;
  StandardAdapter<float> a(p1);
  a.grads_reset(gs, false);
  a.grads_reset(gd, true);
  for (int c = 0; c < 4; ++c) {
    const auto w = static_cast<WordId>(uniform_index(rng, V));
    std::vector<float> row(H);
    for (auto& x : row) x = static_cast<float>(uniform(rng, -1.0, 1.0));
    gs.w_out_sp.axpy_row(w, 1.0f, row.data());
    for (std::int64_t i = 0; i < H; ++i) gd.w_out_dense.at(w, i) += row[i];
  }
  REQUIRE(rmsprop_update(p1, gs, s1, 0.05));
  REQUIRE(rmsprop_update(p2, gd, s2, 0.05));
  for (std::size_t i = 0; i < p1.w_out.a.size(); ++i)
    CHECK(p1.w_out.a[i] == Catch::Approx(p2.w_out.a[i]).margin(1e-7));
  for (std::size_t i = 0; i < s1.m_out.size(); ++i)
    CHECK(s1.m_out[i] == Catch::Approx(s2.m_out[i]).margin(1e-7));
}

TEST_CASE("rmsprop rejects non-finite gradients untouched") {
  RnnParams<float> p(5, 3, Activation::kSigmoid);
  p.init_uniform(99);
  const std::vector<float> before(p.w_rec.a);
  RmspropState s(5, 3, 0.9, 1e-6);
  StandardGrads<float> g;
  StandardAdapter<float> a(p);
  a.grads_reset(g, false);
  g.w_rec.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_FALSE(rmsprop_update(p, g, s, 0.1));
  CHECK(p.w_rec.a == before);
  for (float m : s.m_rec.a) CHECK(m == 0.0f);
}

TEST_CASE("rmsprop state occupies exactly (H^2 + 2V) floats") {
  RmspropState s(10000, 256, 0.9995, 1e-6);
  CHECK(s.bytes() == (256ull * 256 + 2 * 10000) * 4);
  CHECK(rmsprop_state_bytes(256, 10000) == s.bytes());

  std::mt19937_64 rng(163);
  RmspropState small(7, 3, 0.9, 1e-5);
  for (auto& m : small.m_rec.a) m = static_cast<float>(uniform01(rng));
  for (auto& m : small.m_in) m = static_cast<float>(uniform01(rng));
  for (auto& m : small.m_out) m = static_cast<float>(uniform01(rng));
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_rmsprop(ss, small);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 40 + small.bytes());  // header + payload

  const RmspropState back = read_rmsprop(ss);
  CHECK(back.v == small.v);
  CHECK(back.h == small.h);
  CHECK(back.rho == small.rho);
  CHECK(back.eps == small.eps);
  CHECK(back.m_rec.a == small.m_rec.a);
  CHECK(back.m_in == small.m_in);
  CHECK(back.m_out == small.m_out);

  std::istringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_rmsprop(cut), DataError);
  CHECK_THROWS_AS(RmspropState(5, 3, 1.5, 1e-6), std::invalid_argument);
  CHECK_THROWS_AS(RmspropState(5, 3, 0.9, 0.0), std::invalid_argument);
}
