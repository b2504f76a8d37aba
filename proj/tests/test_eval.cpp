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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "desklm/corpus.hpp"
#include "desklm/corpusgen.hpp"
#include "desklm/eval.hpp"
#include "desklm/ngram.hpp"
#include "desklm/rnn.hpp"
#include "desklm/trainer.hpp"
#include "oracles/helpers.hpp"

using namespace desklm;
using Catch::Approx;

namespace {

double act_ref(Activation act, double x) {
  switch (act) {
    case Activation::kSigmoid:
      return 1.0 / (1.0 + std::exp(-x));
    case Activation::kTanh:
      return std::tanh(x);
    default:
      return x > 0.0 ? x : 0.0;
  }
}

// One recurrence step of the standard model, replayed in double precision
// from the raw parameter matrices.
std::vector<double> step_standard(const RnnParams<float>& p,
                                  const std::vector<double>& h, WordId x) {
  std::vector<double> out(static_cast<std::size_t>(p.h));
  for (std::int64_t i = 0; i < p.h; ++i) {
    double pre = static_cast<double>(p.w_in.at(x, i));
    for (std::int64_t j = 0; j < p.h; ++j)
      pre += static_cast<double>(p.w_rec.at(i, j)) * h[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = act_ref(p.act, pre);
  }
  return out;
}

std::vector<double> scores_standard(const RnnParams<float>& p,
                                    const std::vector<double>& h) {
  std::vector<double> s(static_cast<std::size_t>(p.v));
  for (std::int64_t w = 0; w < p.v; ++w) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < p.h; ++i)
      acc += static_cast<double>(p.w_out.at(w, i)) * h[static_cast<std::size_t>(i)];
    s[static_cast<std::size_t>(w)] = acc;
  }
  return s;
}

std::vector<double> step_bottleneck(const BottleneckParams<float>& p,
                                    const std::vector<double>& h, WordId x) {
  std::vector<double> out(static_cast<std::size_t>(p.h));
  for (std::int64_t i = 0; i < p.h; ++i) {
    double pre = 0.0;
    for (std::int64_t k = 0; k < p.p; ++k)
      pre += static_cast<double>(p.e.at(x, k)) * static_cast<double>(p.u.at(k, i));
    for (std::int64_t j = 0; j < p.h; ++j)
      pre += static_cast<double>(p.w_rec.at(i, j)) * h[static_cast<std::size_t>(j)];
    out[static_cast<std::size_t>(i)] = act_ref(p.act, pre);
  }
  return out;
}

std::vector<double> scores_bottleneck(const BottleneckParams<float>& p,
                                      const std::vector<double>& h) {
  std::vector<double> hd(static_cast<std::size_t>(p.p), 0.0);
  for (std::int64_t k = 0; k < p.p; ++k) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < p.h; ++i)
      acc += h[static_cast<std::size_t>(i)] * static_cast<double>(p.d.at(i, k));
    hd[static_cast<std::size_t>(k)] = acc;
  }
  std::vector<double> s(static_cast<std::size_t>(p.v));
  for (std::int64_t w = 0; w < p.v; ++w) {
    double acc = 0.0;
    for (std::int64_t k = 0; k < p.p; ++k)
      acc += static_cast<double>(p.e.at(w, k)) * hd[static_cast<std::size_t>(k)];
    s[static_cast<std::size_t>(w)] = acc;
  }
  return s;
}

struct OraclePpl {
  double total = 0.0;
  std::size_t predicted = 0;
  double ppl() const {
    return std::exp(-total / static_cast<double>(predicted));
  }
};

// Walks one slice [lo, hi) of the stream cold and accumulates the exact
// log-probability of every non-bos target, all in double precision.
template <class Params, class Step, class Score>
void oracle_walk(const Params& p, const IdStream& s, std::size_t lo,
                 std::size_t hi, WordId bos, Step step, Score score,
                 OraclePpl* out) {
  std::vector<double> h(static_cast<std::size_t>(p.h), act_ref(p.act, 0.0));
  for (std::size_t i = lo; i + 1 < hi; ++i) {
    h = step(p, h, s.ids[i]);
    const WordId y = s.ids[i + 1];
    if (y == bos) continue;
    const std::vector<double> sc = score(p, h);
    out->total += sc[y] - testutil::ln_z_ref(sc);
    ++out->predicted;
  }
}

OraclePpl oracle_rnn_ppl(const RnnParams<float>& p, const IdStream& s,
                         WordId bos = 1) {
  OraclePpl r;
  oracle_walk(p, s, 0, s.ids.size(), bos, step_standard, scores_standard, &r);
  return r;
}

OraclePpl oracle_sharded(const RnnParams<float>& p, const IdStream& s,
                         int shards, WordId bos = 1) {
  const auto n = static_cast<std::int64_t>(s.ids.size());
  const std::int64_t S = std::min<std::int64_t>(shards, n / 2);
  OraclePpl r;
  for (std::int64_t sl = 0; sl < S; ++sl)
    oracle_walk(p, s, static_cast<std::size_t>(sl * n / S),
                static_cast<std::size_t>((sl + 1) * n / S), bos, step_standard,
                scores_standard, &r);
  return r;
}

RnnParams<float> random_standard(std::int64_t v, std::int64_t h,
                                 Activation act, std::uint64_t seed) {
  RnnParams<float> p(v, h, act);
  p.init_uniform(seed, 0.1);
  return p;
}

// A tiny model trained to near-determinism on the 6-cycle, for tests that
// need confident predictions.
struct TrainedCycle {
  Vocabulary vocab = testutil::make_vocab(7);
  RnnParams<float> params{7, 16, Activation::kSigmoid};

  TrainedCycle() {
    TrainConfig cfg;
    cfg.nstate = 16;
    cfg.noffset = 2;
    cfg.minibatch = 2;
    cfg.unroll = 8;
    cfg.eta = 0.02;
    cfg.mode = LossMode::kSoftmax;
    cfg.max_epochs = 30;
    cfg.seed = 3;
    params.init_uniform(17, 0.1);
    const IdStream train = testutil::cycle_stream(200);
    const IdStream valid = testutil::cycle_stream(40);
    Trainer<StandardTraits> tr(cfg, params, vocab, train, valid);
    tr.train(nullptr);
    params = tr.params();
  }
};

const TrainedCycle& trained_cycle() {
  static const TrainedCycle tc;
  return tc;
}

}  // namespace

TEST_CASE("recurrent perplexity matches a double-precision replay") {
  std::mt19937_64 rng(71);

  SECTION("standard model, sigmoid") {
    const IdStream s = testutil::random_stream(rng, 18, 400);
    const RnnParams<float> p = random_standard(18, 12, Activation::kSigmoid, 7);
    const StandardAdapter<float> a(p);
    const PerplexityResult r = rnn_perplexity(a, s);
    const OraclePpl o = oracle_rnn_ppl(p, s);
    CHECK(r.predicted == o.predicted);
    CHECK(r.perplexity == Approx(o.ppl()).epsilon(1e-3));
    CHECK(r.total_logprob == Approx(o.total).margin(0.05));

    std::size_t non_bos = 0;
    for (std::size_t i = 1; i < s.ids.size(); ++i) non_bos += s.ids[i] != 1;
    CHECK(r.predicted == non_bos);

    const PerplexityResult r2 = rnn_perplexity(a, s, 1, 2);
    CHECK(r2.total_logprob == r.total_logprob);
  }
  SECTION("standard model, tanh") {
    const IdStream s = testutil::random_stream(rng, 14, 300);
    const RnnParams<float> p = random_standard(14, 9, Activation::kTanh, 8);
    const StandardAdapter<float> a(p);
    CHECK(rnn_perplexity(a, s).perplexity ==
          Approx(oracle_rnn_ppl(p, s).ppl()).epsilon(1e-3));
  }
  SECTION("bottleneck model") {
    const IdStream s = testutil::random_stream(rng, 15, 300);
    BottleneckParams<float> p(15, 10, 6, Activation::kSigmoid);
    p.init_uniform(9, 0.1);
    const BottleneckAdapter<float> a(p);
    const PerplexityResult r = rnn_perplexity(a, s);
    OraclePpl o;
    oracle_walk(p, s, 0, s.ids.size(), WordId{1}, step_bottleneck,
                scores_bottleneck, &o);
    CHECK(r.predicted == o.predicted);
    CHECK(r.perplexity == Approx(o.ppl()).epsilon(1e-3));
  }
  SECTION("error cases") {
    const RnnParams<float> p = random_standard(8, 4, Activation::kSigmoid, 7);
    const StandardAdapter<float> a(p);
    IdStream tiny;
    tiny.ids = {1};
    CHECK_THROWS_AS(rnn_perplexity(a, tiny), std::invalid_argument);
    IdStream oor;
    oor.ids = {1, 3, 99, 2};
    CHECK_THROWS_AS(rnn_perplexity(a, oor), DataError);
    IdStream all_bos;
    all_bos.ids = {1, 1, 1, 1};
    CHECK_THROWS_AS(rnn_perplexity(a, all_bos), std::invalid_argument);
  }
}

TEST_CASE("sharded perplexity walks each slice cold") {
  std::mt19937_64 rng(72);
  const IdStream s = testutil::random_stream(rng, 16, 400);
  const RnnParams<float> p = random_standard(16, 10, Activation::kSigmoid, 11);
  const StandardAdapter<float> a(p);

  SECTION("one shard equals the single-pass walk") {
    const PerplexityResult one = sharded_perplexity(a, s, 1);
    const PerplexityResult full = rnn_perplexity(a, s);
    CHECK(one.predicted == full.predicted);
    CHECK(one.total_logprob == Approx(full.total_logprob).margin(1e-9));
  }
  SECTION("several shards match the sliced replay") {
    for (const int shards : {2, 4, 7}) {
      const PerplexityResult r = sharded_perplexity(a, s, shards);
      const OraclePpl o = oracle_sharded(p, s, shards);
      INFO("shards " << shards);
      CHECK(r.predicted == o.predicted);
      CHECK(r.perplexity == Approx(o.ppl()).epsilon(1e-3));
    }
  }
  SECTION("shard count clamps to half the stream length") {
    IdStream ten;
    ten.ids = {1, 3, 4, 5, 6, 2, 1, 3, 4, 5};
    const PerplexityResult r = sharded_perplexity(a, ten, 100);
    CHECK(r.predicted == 5);  // five 2-token slices, one prediction each
    const OraclePpl o = oracle_sharded(p, ten, 100);
    CHECK(r.perplexity == Approx(o.ppl()).epsilon(1e-6));
  }
  SECTION("thread count does not change the numbers") {
    CHECK(sharded_perplexity(a, s, 4, 1, 2).total_logprob ==
          sharded_perplexity(a, s, 4, 1, 1).total_logprob);
  }
  SECTION("error cases") {
    IdStream tiny;
    tiny.ids = {3};
    CHECK_THROWS_AS(sharded_perplexity(a, tiny, 4), std::invalid_argument);
    CHECK_THROWS_AS(sharded_perplexity(a, s, 0), std::invalid_argument);
    IdStream oor;
    oor.ids = {1, 3, 200, 4, 2, 1};
    CHECK_THROWS_AS(sharded_perplexity(a, oor, 2), DataError);
  }
}

TEST_CASE("ln Z sampling and drift statistics") {
  std::mt19937_64 rng(73);
  const IdStream s = testutil::random_stream(rng, 15, 1000);

  SECTION("zero output weights give ln Z = ln V everywhere") {
    RnnParams<float> p = random_standard(15, 8, Activation::kSigmoid, 13);
    p.w_out.a.assign(p.w_out.a.size(), 0.0f);
    const StandardAdapter<float> a(p);
    const std::vector<double> z = ln_z_samples(a, s, 120);
    CHECK(z.size() == 120);
    for (double v : z) CHECK(v == Approx(std::log(15.0)).margin(1e-9));
  }
  SECTION("samples match a double-precision replay at the same stride") {
    const RnnParams<float> p = random_standard(15, 8, Activation::kSigmoid, 13);
    const StandardAdapter<float> a(p);
    const std::size_t count = 150;
    const std::vector<double> z = ln_z_samples(a, s, count);
    const std::size_t stride = std::max<std::size_t>(1, s.ids.size() / count);
    std::vector<double> h(8, act_ref(p.act, 0.0));
    std::vector<double> expect;
    for (std::size_t i = 0; i < s.ids.size() && expect.size() < count; ++i) {
      h = step_standard(p, h, s.ids[i]);
      if (i % stride == 0)
        expect.push_back(testutil::ln_z_ref(scores_standard(p, h)));
    }
    REQUIRE(z.size() == expect.size());
    for (std::size_t i = 0; i < z.size(); ++i)
      CHECK(z[i] == Approx(expect[i]).margin(2e-3));
  }
  SECTION("drift statistics against hand-computed quantiles") {
    std::vector<double> v;
    for (int i = 1; i <= 100; ++i) v.push_back(static_cast<double>(i));
    std::shuffle(v.begin(), v.end(), rng);
    const DriftStats st = drift_stats(v);
    CHECK(st.contexts == 100);
    CHECK(st.mean == Approx(50.5).margin(1e-12));
    CHECK(st.median == Approx(50.5).margin(1e-12));
    CHECK(st.q25 == Approx(25.75).margin(1e-12));
    CHECK(st.q75 == Approx(75.25).margin(1e-12));
    CHECK(st.iqr == Approx(49.5).margin(1e-12));
  }
  SECTION("error cases") {
    const RnnParams<float> p = random_standard(15, 8, Activation::kSigmoid, 13);
    const StandardAdapter<float> a(p);
    IdStream empty;
    CHECK_THROWS_AS(ln_z_samples(a, empty, 10), std::invalid_argument);
    CHECK_THROWS_AS(ln_z_samples(a, s, 0), std::invalid_argument);
    IdStream oor;
    oor.ids = {1, 400};
    CHECK_THROWS_AS(ln_z_samples(a, oor, 2), DataError);
    std::vector<double> few(99, 1.0);
    CHECK_THROWS_AS(drift_stats(few), std::invalid_argument);
  }
}

TEST_CASE("vocabulary mapping and mixture distribution") {
  // Full vocabulary of 8, recurrent vocabulary covering the first 6 words.
  std::vector<std::string> full_words = {"<unk>", "<s>", "</s>", "aa", "bb",
                                         "cc", "dd", "ee"};
  std::vector<std::string> rnn_words(full_words.begin(), full_words.begin() + 6);
  const Vocabulary full{std::move(full_words)};
  const Vocabulary rnn{std::move(rnn_words)};

  const VocabMap map = make_vocab_map(rnn, full);
  CHECK(map.rnn_unk == 0);
  REQUIRE(map.rnn_to_full.size() == 6);
  for (WordId r = 0; r < 6; ++r) {
    CHECK(map.rnn_to_full[r] == r);  // shared prefix => identity on the overlap
    CHECK(map.full_to_rnn[map.rnn_to_full[r]] == static_cast<std::int64_t>(r));
  }
  CHECK(map.oor_ids == std::vector<WordId>{0, 6, 7});  // unk + uncovered tail

  SECTION("missing words are rejected") {
    const Vocabulary stranger{std::vector<std::string>{
        "<unk>", "<s>", "</s>", "aa", "zz"}};
    CHECK_THROWS_AS(make_vocab_map(stranger, full), DataError);
  }
  SECTION("mixture keeps normalization and endpoints") {
    const std::vector<double> pr = {0.05, 0.0, 0.15, 0.3, 0.2, 0.3};
    const std::vector<double> pn = {0.1, 0.0, 0.1, 0.2, 0.15, 0.15, 0.2, 0.1};
    for (const double lam : {0.0, 0.3, 0.7, 1.0}) {
      const std::vector<double> out =
          interpolate_distribution(pr, pn, map, lam);
      REQUIRE(out.size() == 8);
      double sum = 0.0;
      for (double x : out) sum += x;
      CHECK(sum == Approx(1.0).margin(1e-12));
      // Mapped non-unk words mix directly.
      for (WordId f : {2, 3, 4, 5})
        CHECK(out[f] ==
              Approx(lam * pr[f] + (1.0 - lam) * pn[f]).margin(1e-15));
      // Everything else shares the recurrent unk mass by n-gram proportion.
      const double z = pn[0] + pn[6] + pn[7];
      for (WordId f : {0, 6, 7})
        CHECK(out[f] == Approx(lam * pr[0] * pn[f] / z +
                               (1.0 - lam) * pn[f]).margin(1e-15));
    }
  }
  SECTION("mixture argument validation") {
    const std::vector<double> pr(6, 1.0 / 6), pn(8, 0.125);
    CHECK_THROWS_AS(interpolate_distribution(pr, pn, map, -0.1),
                    std::invalid_argument);
    CHECK_THROWS_AS(interpolate_distribution(pr, pn, map, 1.1),
                    std::invalid_argument);
    const std::vector<double> bad(5, 0.2);
    CHECK_THROWS_AS(interpolate_distribution(bad, pn, map, 0.5),
                    std::invalid_argument);
    CHECK_THROWS_AS(interpolate_distribution(pr, bad, map, 0.5),
                    std::invalid_argument);
  }
}

TEST_CASE("interpolation terms cache both model probabilities") {
  GenConfig gcfg;
  TextGenerator gen(gcfg, 999);
  const SentenceCorpus train_text = normalize_text(gen.generate(20000, 1));
  const SentenceCorpus test_text = normalize_text(gen.generate(1500, 2));
  const Vocabulary full = build_vocab(train_text, 30);
  std::vector<std::string> rnn_words(full.words().begin(),
                                     full.words().begin() + 20);
  const Vocabulary rnn_vocab{std::move(rnn_words)};
  const VocabMap map = make_vocab_map(rnn_vocab, full);

  const IdStream train = encode(train_text, full);
  const IdStream test = encode(test_text, full);
  const NGramModel ngram = estimate_kn(count_ngrams(train, 3), full);
  const RnnParams<float> params =
      random_standard(20, 10, Activation::kSigmoid, 31);
  const StandardAdapter<float> adapter(params);

  const std::vector<InterpTerm> terms =
      interpolation_terms(adapter, map, ngram, test, 1);

  SECTION("terms match a double-precision replay of both models") {
    std::vector<double> h(10, act_ref(params.act, 0.0));
    std::vector<WordId> ctx;
    const std::size_t cap = static_cast<std::size_t>(ngram.order() - 1);
    std::size_t t = 0;
    for (std::size_t i = 0; i + 1 < test.ids.size(); ++i) {
      const WordId x = test.ids[i];
      const std::int64_t xr = map.full_to_rnn[x];
      h = step_standard(params, h,
                        xr >= 0 ? static_cast<WordId>(xr) : map.rnn_unk);
      if (x == full.bos_id())
        ctx.assign(1, x);
      else {
        ctx.push_back(x);
        if (ctx.size() > cap)
          ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(cap));
      }
      const WordId y = test.ids[i + 1];
      if (y == full.bos_id()) continue;
      REQUIRE(t < terms.size());
      const double pn = std::exp(ngram.logprob(ctx, y));
      CHECK(terms[t].b == Approx(pn).epsilon(1e-9));
      const std::vector<double> sc = scores_standard(params, h);
      const double lse = testutil::ln_z_ref(sc);
      const std::int64_t yr = map.full_to_rnn[y];
      double a;
      if (yr >= 0 && static_cast<WordId>(yr) != map.rnn_unk) {
        a = std::exp(sc[static_cast<std::size_t>(yr)] - lse);
      } else {
        double z_out = 0.0;
        for (WordId f : map.oor_ids) z_out += std::exp(ngram.logprob(ctx, f));
        a = std::exp(sc[map.rnn_unk] - lse) * pn / z_out;
      }
      CHECK(terms[t].a == Approx(a).epsilon(2e-3).margin(1e-9));
      ++t;
    }
    CHECK(t == terms.size());
  }
  SECTION("lambda 0 reduces to the backoff model") {
    const PerplexityResult r = interp_perplexity_at(terms, 0.0);
    CHECK(r.perplexity ==
          Approx(ngram_perplexity(ngram, test)).epsilon(1e-12));
  }
  SECTION("lambda 1 with identical vocabularies reduces to the rnn") {
    const VocabMap id_map = make_vocab_map(full, full);
    const RnnParams<float> p_full = random_standard(
        static_cast<std::int64_t>(full.size()), 10, Activation::kSigmoid, 37);
    const StandardAdapter<float> a_full(p_full);
    const std::vector<InterpTerm> t_full =
        interpolation_terms(a_full, id_map, ngram, test, 1);
    const PerplexityResult r = interp_perplexity_at(t_full, 1.0);
    const PerplexityResult rr = rnn_perplexity(a_full, test);
    CHECK(r.predicted == rr.predicted);
    CHECK(r.perplexity == Approx(rr.perplexity).epsilon(1e-9));
  }
  SECTION("tuning lands at the grid minimum") {
    double best = 0.0;
    const double lam = tune_lambda(terms, &best);
    CHECK(best == interp_perplexity_at(terms, lam).perplexity);
    for (int g = 0; g <= 100; ++g) {
      const double l = g / 100.0;
      CHECK(best <= interp_perplexity_at(terms, l).perplexity + 1e-9);
    }
    CHECK(interpolated_perplexity(adapter, map, ngram, test, lam).perplexity ==
          Approx(best).margin(1e-12));
  }
  SECTION("tuning a symmetric two-term system gives one half") {
    const std::vector<InterpTerm> sym = {{0.9, 0.1}, {0.1, 0.9}};
    CHECK(tune_lambda(sym) == Approx(0.5).margin(1e-6));
  }
  SECTION("tuning a dominated system runs to the endpoint") {
    const std::vector<InterpTerm> dom = {{0.9, 0.2}, {0.8, 0.3}, {0.7, 0.1}};
    CHECK(tune_lambda(dom) == Approx(1.0).margin(1e-6));
  }
  SECTION("degenerate terms are rejected") {
    CHECK_THROWS_AS(interp_perplexity_at(std::vector<InterpTerm>{}, 0.5),
                    std::invalid_argument);
    const std::vector<InterpTerm> zero = {{0.0, 0.0}};
    CHECK_THROWS_AS(interp_perplexity_at(zero, 0.5), DataError);
  }
}

TEST_CASE("hit rate counts targets found in the reranked shortlist") {
  GenConfig gcfg;
  TextGenerator gen(gcfg, 1234);
  const SentenceCorpus train_text = normalize_text(gen.generate(30000, 1));
  const SentenceCorpus test_text = normalize_text(gen.generate(3000, 2));
  const Vocabulary vocab = build_vocab(train_text, 200);
  const IdStream train = encode(train_text, vocab);
  const IdStream test = encode(test_text, vocab);
  const NGramModel m = estimate_kn(count_ngrams(train, 3), vocab);
  const WordId bos = vocab.bos_id();
  const auto V = static_cast<WordId>(vocab.size());

  // Brute-force oracle sharing no code with hit_rate: its own context
  // bookkeeping, its own shortlist by exhaustive ranking, its own reranking.
  const auto oracle = [&](std::size_t sk, std::size_t tk,
                          auto&& score_of) {
    HitRateResult r;
    std::vector<WordId> ctx;
    const auto cap = static_cast<std::size_t>(m.order() - 1);
    for (std::size_t i = 0; i + 1 < test.ids.size(); ++i) {
      const WordId x = test.ids[i];
      if (x == bos)
        ctx.assign(1, x);
      else {
        ctx.push_back(x);
        if (ctx.size() > cap)
          ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(cap));
      }
      const WordId y = test.ids[i + 1];
      if (y == bos) continue;
      ++r.positions;
      std::vector<std::pair<double, WordId>> all;
      for (WordId w = 0; w < V; ++w) all.emplace_back(-m.logprob(ctx, w), w);
      std::sort(all.begin(), all.end());
      std::vector<std::pair<double, WordId>> ranked;
      bool found = false;
      for (std::size_t j = 0; j < std::min<std::size_t>(sk, all.size()); ++j) {
        found = found || all[j].second == y;
        ranked.emplace_back(-score_of(ctx, all[j].second), all[j].second);
      }
      if (!found) continue;
      std::sort(ranked.begin(), ranked.end());
      for (std::size_t j = 0; j < std::min(tk, ranked.size()); ++j)
        if (ranked[j].second == y) {
          ++r.hits;
          break;
        }
    }
    return r;
  };

  SECTION("backoff scorer agrees with the oracle exactly") {
    for (const auto& [sk, tk] :
         std::vector<std::pair<std::size_t, std::size_t>>{
             {20, 1}, {20, 5}, {50, 10}}) {
      NgramHitScorer scorer(m, bos);
      const HitRateResult r = hit_rate(test, m, sk, tk, scorer, bos);
      const HitRateResult o =
          oracle(sk, tk, [&](const std::vector<WordId>& ctx, WordId w) {
            return m.logprob(ctx, w);
          });
      INFO("shortlist " << sk << " top " << tk);
      CHECK(r.positions == o.positions);
      CHECK(r.hits == o.hits);
    }
  }
  SECTION("hit rate is monotone in top_k") {
    double prev = -1.0;
    for (const std::size_t tk : {1, 2, 5, 10, 20}) {
      NgramHitScorer scorer(m, bos);
      const double rate = hit_rate(test, m, 20, tk, scorer, bos).rate();
      CHECK(rate >= prev);
      CHECK(rate >= 0.0);
      CHECK(rate <= 1.0);
      prev = rate;
    }
  }
  SECTION("zero output weights rank the shortlist by id") {
    RnnParams<float> p(static_cast<std::int64_t>(vocab.size()), 6,
                       Activation::kSigmoid);
    p.init_uniform(41, 0.1);
    p.w_out.a.assign(p.w_out.a.size(), 0.0f);
    const StandardAdapter<float> a(p);
    RnnHitScorer<StandardAdapter<float>> scorer(a);
    const HitRateResult r = hit_rate(test, m, 10, 3, scorer, bos);
    const HitRateResult o =
        oracle(10, 3, [&](const std::vector<WordId>&, WordId) { return 0.0; });
    CHECK(r.positions == o.positions);
    CHECK(r.hits == o.hits);
  }
  SECTION("a near-perfect model hits at top 1") {
    const TrainedCycle& tc = trained_cycle();
    const IdStream cyc = testutil::cycle_stream(60);
    const NGramModel cm = estimate_kn(count_ngrams(cyc, 2), tc.vocab);
    const StandardAdapter<float> a(tc.params);
    RnnHitScorer<StandardAdapter<float>> scorer(a);
    const HitRateResult r = hit_rate(cyc, cm, 6, 1, scorer, 1);
    CHECK(r.rate() >= 0.99);
  }
  SECTION("error cases") {
    NgramHitScorer scorer(m, bos);
    CHECK_THROWS_AS(hit_rate(test, m, 5, 0, scorer, bos),
                    std::invalid_argument);
    CHECK_THROWS_AS(hit_rate(test, m, 3, 5, scorer, bos),
                    std::invalid_argument);
    IdStream tiny;
    tiny.ids = {4};
    CHECK_THROWS_AS(hit_rate(tiny, m, 5, 2, scorer, bos),
                    std::invalid_argument);
    IdStream all_bos;
    all_bos.ids = {1, 1, 1};
    CHECK_THROWS_AS(hit_rate(all_bos, m, 5, 2, scorer, bos),
                    std::invalid_argument);
  }
}

TEST_CASE("n-best lists parse, validate, and round-trip") {
  SECTION("3, 4, and 7 field lines are accepted") {
    std::istringstream is(
        "utt1\t-10.5\t-3.25\thello there\n"
        "utt1\t-11\t-3\t\n"
        "utt2\t-1.5\t0\tone\t-2.5\t-4.0\t1\n"
        "\n"
        "utt1\t-9\t-2\tback again\n");
    const std::vector<NBestUtt> utts = read_nbest(is);
    REQUIRE(utts.size() == 3);  // grouping is by consecutive runs
    CHECK(utts[0].id == "utt1");
    REQUIRE(utts[0].hyps.size() == 2);
    CHECK(utts[0].hyps[0].acoustic == -10.5);
    CHECK(utts[0].hyps[0].old_lm == -3.25);
    CHECK(utts[0].hyps[0].words ==
          std::vector<std::string>{"hello", "there"});
    CHECK(utts[0].hyps[1].words.empty());
    CHECK(utts[1].id == "utt2");
    CHECK(utts[1].hyps[0].words == std::vector<std::string>{"one"});
    CHECK(utts[1].hyps[0].new_lm == 0.0);  // annotations dropped on read
    CHECK(utts[2].id == "utt1");
    REQUIRE(utts[2].hyps.size() == 1);
  }
  SECTION("carriage returns are stripped") {
    std::istringstream is("u\t-1\t-2\ta b\r\n");
    const std::vector<NBestUtt> utts = read_nbest(is);
    CHECK(utts[0].hyps[0].words == std::vector<std::string>{"a", "b"});
  }
  SECTION("malformed lines carry their line number") {
    std::istringstream two("u\t-1\t-2\tok\nu\t-1\n");
    CHECK_THROWS_MATCHES(read_nbest(two), ParseError,
                         Catch::Matchers::Predicate<ParseError>(
                             [](const ParseError& e) { return e.line() == 2; }));
    std::istringstream bad_num("u\t-1\t-2\tok\nu\tx\t-2\tok\n");
    CHECK_THROWS_MATCHES(read_nbest(bad_num), ParseError,
                         Catch::Matchers::Predicate<ParseError>(
                             [](const ParseError& e) { return e.line() == 2; }));
    std::istringstream no_id("\t-1\t-2\tok\n");
    CHECK_THROWS_AS(read_nbest(no_id), ParseError);
  }
  SECTION("write then read preserves the payload") {
    std::vector<NBestUtt> utts(1);
    utts[0].id = "spk1-7";
    NBestHyp h;
    h.acoustic = -12.125;
    h.old_lm = -4.5;
    h.words = {"we", "went", "home"};
    h.new_lm = -3.75;
    h.new_total = -15.875;
    h.rank = 2;
    utts[0].hyps.push_back(h);
    std::ostringstream os;
    write_nbest(os, utts);
    CHECK(os.str() ==
          "spk1-7\t-12.125000\t-4.500000\twe went home\t-3.750000\t"
          "-15.875000\t2\n");
    std::istringstream back(os.str());
    const std::vector<NBestUtt> again = read_nbest(back);
    REQUIRE(again.size() == 1);
    CHECK(again[0].hyps[0].acoustic == -12.125);
    CHECK(again[0].hyps[0].old_lm == -4.5);
    CHECK(again[0].hyps[0].words == h.words);
  }
}

TEST_CASE("rescoring orders hypotheses by the combined score") {
  const TrainedCycle& tc = trained_cycle();
  const StandardAdapter<float> adapter(tc.params);

  const auto make_utt = [&](std::vector<std::pair<double, std::string>> hyps) {
    NBestUtt u;
    u.id = "u";
    for (auto& [ac, text] : hyps) {
      NBestHyp h;
      h.acoustic = ac;
      std::istringstream is(text);
      std::string w;
      while (is >> w) h.words.push_back(w);
      u.hyps.push_back(std::move(h));
    }
    return u;
  };

  SECTION("lm_scale 0 sorts by acoustic score, stably") {
    std::vector<NBestUtt> utts = {make_utt(
        {{-5.0, "w3"}, {-1.0, "w4"}, {-3.0, "w5"}, {-1.0, "w6"}})};
    RescoreConfig cfg;
    cfg.lm_scale = 0.0;
    rescore_nbest(utts, adapter, tc.vocab, nullptr, cfg);
    REQUIRE(utts[0].hyps.size() == 4);
    CHECK(utts[0].hyps[0].acoustic == -1.0);
    CHECK(utts[0].hyps[1].acoustic == -1.0);
    CHECK(utts[0].hyps[0].words == std::vector<std::string>{"w4"});  // stable
    CHECK(utts[0].hyps[1].words == std::vector<std::string>{"w6"});
    CHECK(utts[0].hyps[2].acoustic == -3.0);
    CHECK(utts[0].hyps[3].acoustic == -5.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(utts[0].hyps[i].rank == i + 1);
  }
  SECTION("language-model score matches a double-precision replay") {
    std::vector<NBestUtt> utts = {make_utt({{0.0, "w3 w4 w5 w6"}})};
    RescoreConfig cfg;
    rescore_nbest(utts, adapter, tc.vocab, nullptr, cfg);
    std::vector<WordId> ids = {1, 3, 4, 5, 6, 2};
    std::vector<double> h(16, act_ref(Activation::kSigmoid, 0.0));
    double lp = 0.0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      h = step_standard(tc.params, h, ids[i]);
      const std::vector<double> sc = scores_standard(tc.params, h);
      lp += sc[ids[i + 1]] - testutil::ln_z_ref(sc);
    }
    CHECK(utts[0].hyps[0].new_lm == Approx(lp).margin(2e-3));
    CHECK(utts[0].hyps[0].new_total ==
          Approx(lp).margin(2e-3));  // acoustic 0, wip 0
  }
  SECTION("a lambda-1 interpolation with the same vocabulary is a no-op") {
    const IdStream cyc = testutil::cycle_stream(100);
    const NGramModel cm = estimate_kn(count_ngrams(cyc, 2), tc.vocab);
    std::vector<NBestUtt> plain = {make_utt({{0.0, "w3 w4 w5"}})};
    std::vector<NBestUtt> mixed = plain;
    RescoreConfig cfg;
    rescore_nbest(plain, adapter, tc.vocab, nullptr, cfg);
    cfg.lambda = 1.0;
    rescore_nbest(mixed, adapter, tc.vocab, &cm, cfg);
    CHECK(mixed[0].hyps[0].new_lm ==
          Approx(plain[0].hyps[0].new_lm).margin(1e-12));
  }
  SECTION("lambda 0 scores with the backoff model alone") {
    const IdStream cyc = testutil::cycle_stream(100);
    const NGramModel cm = estimate_kn(count_ngrams(cyc, 2), tc.vocab);
    std::vector<NBestUtt> utts = {make_utt({{0.0, "w3 w4"}})};
    RescoreConfig cfg;
    cfg.lambda = 0.0;
    rescore_nbest(utts, adapter, tc.vocab, &cm, cfg);
    const std::vector<WordId> ids = {1, 3, 4, 2};
    double lp = 0.0;
    std::vector<WordId> ctx = {1};
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      if (i > 0) {
        ctx.push_back(ids[i]);
        if (ctx.size() > 1) ctx.erase(ctx.begin(), ctx.end() - 1);
      }
      lp += cm.logprob(ctx, ids[i + 1]);
    }
    CHECK(utts[0].hyps[0].new_lm == Approx(lp).margin(1e-9));
  }
  SECTION("word insertion bonus favors longer hypotheses") {
    std::vector<NBestUtt> utts = {
        make_utt({{0.0, "w3"}, {0.0, "w3 w4 w5 w6"}, {0.0, "w3 w4"}})};
    RescoreConfig cfg;
    cfg.lm_scale = 0.0;
    cfg.wip = 100.0;
    rescore_nbest(utts, adapter, tc.vocab, nullptr, cfg);
    CHECK(utts[0].hyps[0].words.size() == 4);
    CHECK(utts[0].hyps[1].words.size() == 2);
    CHECK(utts[0].hyps[2].words.size() == 1);
  }
  SECTION("a constant acoustic shift does not change the order") {
    std::vector<NBestUtt> base = {make_utt(
        {{-2.0, "w3 w4 w5"}, {-1.5, "w6 w3"}, {-4.0, "w5 w5 w5"}})};
    std::vector<NBestUtt> shifted = base;
    for (NBestHyp& h : shifted[0].hyps) h.acoustic += 123.0;
    RescoreConfig cfg;
    rescore_nbest(base, adapter, tc.vocab, nullptr, cfg);
    rescore_nbest(shifted, adapter, tc.vocab, nullptr, cfg);
    for (std::size_t i = 0; i < base[0].hyps.size(); ++i) {
      CHECK(shifted[0].hyps[i].words == base[0].hyps[i].words);
      CHECK(shifted[0].hyps[i].new_total ==
            Approx(base[0].hyps[i].new_total + 123.0).margin(1e-9));
    }
  }
  SECTION("fast mode agrees with exact mode on clear margins") {
    std::vector<NBestUtt> exact = {make_utt(
        {{0.0, "w6 w3 w6 w3"}, {0.0, "w3 w4 w5 w6"}})};
    std::vector<NBestUtt> fast = exact;
    RescoreConfig cfg;
    rescore_nbest(exact, adapter, tc.vocab, nullptr, cfg);
    cfg.fast = true;
    rescore_nbest(fast, adapter, tc.vocab, nullptr, cfg);
    CHECK(exact[0].hyps[0].words ==
          std::vector<std::string>{"w3", "w4", "w5", "w6"});
    CHECK(fast[0].hyps[0].words ==
          std::vector<std::string>{"w3", "w4", "w5", "w6"});
  }
  SECTION("argument validation") {
    std::vector<NBestUtt> utts = {make_utt({{0.0, "w3"}})};
    RescoreConfig cfg;
    cfg.lambda = 1.5;
    CHECK_THROWS_AS(rescore_nbest(utts, adapter, tc.vocab, nullptr, cfg),
                    std::invalid_argument);
    const Vocabulary other = testutil::make_vocab(9);
    cfg.lambda = 0.5;
    CHECK_THROWS_AS(rescore_nbest(utts, adapter, other, nullptr, cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("scaling curve fit recovers exact parameters") {
  const double a = 50.0, b = 5.0, c = 0.2;
  std::vector<ScalingPoint> pts;
  for (int i = 0; i < 7; ++i) {
    const double w = std::pow(10.0, 6 + i);
    pts.push_back({w, a * std::exp(b * std::pow(w, -c))});
  }

  SECTION("exact data is recovered") {
    const ScalingFit fit = fit_scaling_curve(pts);
    CHECK(fit.a == Approx(a).epsilon(1e-6));
    CHECK(fit.b == Approx(b).epsilon(1e-4));
    CHECK(fit.c == Approx(c).margin(1e-6));
    CHECK(fit.rms < 1e-6);
    const double w = 3.3e9;
    CHECK(scaling_predict(fit, w) ==
          Approx(a * std::exp(b * std::pow(w, -c))).epsilon(1e-6));
    const double drop = scaling_drop(fit, 1e9, 1e10);
    CHECK(drop == Approx((scaling_predict(fit, 1e9) -
                          scaling_predict(fit, 1e10)) /
                         scaling_predict(fit, 1e9)).margin(1e-15));
    CHECK(drop > 0.0);
  }
  SECTION("noisy data keeps parameters close and reports the residual") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> jitter(-0.01, 0.01);
    std::vector<ScalingPoint> noisy = pts;
    for (ScalingPoint& p : noisy) p.ppl *= 1.0 + jitter(rng);
    const ScalingFit fit = fit_scaling_curve(noisy);
    CHECK(fit.a == Approx(a).epsilon(0.2));
    CHECK(fit.rms > 0.0);
    CHECK(fit.rms < 2.0);
  }
  SECTION("fitted curves decrease toward the asymptote") {
    const ScalingFit fit = fit_scaling_curve(pts);
    double prev = scaling_predict(fit, 1e6);
    for (double w = 1e7; w <= 1e14; w *= 10) {
      const double cur = scaling_predict(fit, w);
      CHECK(cur < prev);
      CHECK(cur > fit.a - 1e-9);
      prev = cur;
    }
  }
  SECTION("input validation") {
    std::vector<ScalingPoint> three(pts.begin(), pts.begin() + 3);
    CHECK_THROWS_AS(fit_scaling_curve(three), std::invalid_argument);
    std::vector<ScalingPoint> neg = pts;
    neg[2].ppl = -1.0;
    CHECK_THROWS_AS(fit_scaling_curve(neg), std::invalid_argument);
    std::vector<ScalingPoint> dup = pts;
    dup[3].words = dup[2].words;
    CHECK_THROWS_AS(fit_scaling_curve(dup), std::invalid_argument);
    CHECK_THROWS_AS(scaling_predict(ScalingFit{50, 5, 0.2, 0}, 0.0),
                    std::invalid_argument);
  }
}
