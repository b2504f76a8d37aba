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

#ifndef DESKLM_TRAINER_HPP
#define DESKLM_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "desklm/backprop.hpp"
#include "desklm/corpus.hpp"
#include "desklm/eval.hpp"
#include "desklm/nce.hpp"
#include "desklm/rmsprop.hpp"
#include "desklm/rnn.hpp"
#include "desklm/util.hpp"

namespace desklm {

struct TrainConfig {
  std::int64_t nstate = 256;  // hidden units
  std::int64_t nproj = 0;     // projection width (bottleneck models; 0 = none)
  int noffset = 128;          // stream groups per round
  int minibatch = 8;          // parallel streams per group
  int unroll = 16;            // truncation length T
  double eta = 1e-3;          // initial learning rate
  double rho = 0.9995;        // accumulator decay
  double eps = 1e-6;          // accumulator damping
  double clip = 1.0;          // elementwise gradient bound
  LossMode mode = LossMode::kNce;
  int nce_k = 64;             // noise samples per position
  double noise_floor = 1e-8;  // minimum noise probability before renorm
  int max_epochs = 20;
  std::uint64_t seed = 1;
  Activation act = Activation::kSigmoid;
  double divergence_factor = 10.0;  // validation blow-up bound
  std::int64_t valid_limit = 0;     // cap on validation tokens (0 = all)
  int valid_shards = 8;             // parallel slices for validation
  double init_range = 0.1;          // uniform init half-width
  int threads = 1;                  // execution detail; results do not depend on it

  void validate() const {
    if (nstate < 1) throw std::invalid_argument("config: nstate must be >= 1");
    if (nproj < 0) throw std::invalid_argument("config: nproj must be >= 0");
    if (noffset < 1 || minibatch < 1 || unroll < 1)
      throw std::invalid_argument(
          "config: noffset, minibatch, unroll must be >= 1");
    if (!(eta > 0.0)) throw std::invalid_argument("config: eta must be > 0");
    if (!(rho > 0.0 && rho < 1.0))
      throw std::invalid_argument("config: rho must be in (0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("config: eps must be > 0");
    if (!(clip > 0.0)) throw std::invalid_argument("config: clip must be > 0");
    if (mode == LossMode::kNce && nce_k < 1)
      throw std::invalid_argument("config: nce_k must be >= 1");
    if (!(noise_floor > 0.0))
      throw std::invalid_argument("config: noise_floor must be > 0");
    if (max_epochs < 1)
      throw std::invalid_argument("config: max_epochs must be >= 1");
    if (!(divergence_factor > 1.0))
      throw std::invalid_argument("config: divergence_factor must be > 1");
    if (valid_limit < 0)
      throw std::invalid_argument("config: valid_limit must be >= 0");
    if (valid_shards < 1)
      throw std::invalid_argument("config: valid_shards must be >= 1");
    if (!(init_range > 0.0))
      throw std::invalid_argument("config: init_range must be > 0");
    if (threads < 1)
      throw std::invalid_argument("config: threads must be >= 1");
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean per-position loss over the epoch's windows
  double valid_ppl = 0.0;
  double eta = 0.0;
  double seconds = 0.0;
  double tokens_per_sec = 0.0;
  std::size_t skipped_updates = 0;
};

inline void write_epoch_log(std::ostream& os,
                            const std::vector<EpochLog>& logs) {
  os << "epoch,train_loss,valid_ppl,eta,seconds,tokens_per_sec,skipped\n";
  char buf[160];
  for (const EpochLog& l : logs) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.4f,%.8g,%.2f,%.1f,%zu\n",
                  l.epoch, l.train_loss, l.valid_ppl, l.eta, l.seconds,
                  l.tokens_per_sec, l.skipped_updates);
    os << buf;
  }
}

// Model family plugged into the trainer. A traits type binds together the
// parameter struct, its gradients, the engine adapter, and the optimizer:
//
//   using Params / Grads / Adapter / Opt;
//   static std::int64_t hidden(const Params&);
//   static std::int64_t vocab(const Params&);
//   static Activation activation(const Params&);
//   static Opt make_opt(const Params&, double rho, double eps);
//   static bool update(Params&, const Grads&, Opt&, double eta);
//   static void write_params(std::ostream&, const Params&, const Vocabulary&);
//   static std::pair<Params, Vocabulary> read_params(std::istream&);
//   static void write_opt(std::ostream&, const Opt&);
//   static Opt read_opt(std::istream&);
struct StandardTraits {
  using Params = RnnParams<float>;
  using Grads = StandardGrads<float>;
  using Adapter = StandardAdapter<float>;
  using Opt = RmspropState;

  static std::int64_t hidden(const Params& p) { return p.h; }
  static std::int64_t vocab(const Params& p) { return p.v; }
  static Activation activation(const Params& p) { return p.act; }
  static Opt make_opt(const Params& p, double rho, double eps) {
    return RmspropState(p.v, p.h, rho, eps);
  }
  static bool update(Params& p, const Grads& g, Opt& o, double eta) {
    return rmsprop_update(p, g, o, eta);
  }
  static void write_params(std::ostream& os, const Params& p,
                           const Vocabulary& v) {
    desklm::write_params(os, p, v);
  }
  static std::pair<Params, Vocabulary> read_params(std::istream& is) {
    return desklm::read_params(is);
  }
  static void write_opt(std::ostream& os, const Opt& o) {
    write_rmsprop(os, o);
  }
  static Opt read_opt(std::istream& is) { return read_rmsprop(is); }
};

constexpr std::uint32_t kTrainerFormatVersion = 1;

// Minibatched truncated-backpropagation trainer over offset streams.
//
// The training stream is read by noffset*minibatch cursors starting at
// offsets floor(i*L/N); each group of `minibatch` consecutive streams forms
// one window batch, groups are visited round-robin, and an epoch is
// ceil(L/(N*T)) rounds, after which every cursor has advanced about one
// stream length. Hidden state persists across windows and sentence
// boundaries and is reset only when a cursor wraps past the end of the
// stream (windows straddling the end read modulo L). After each epoch the
// exact-softmax validation perplexity decides the learning-rate schedule:
// halve on non-improvement, stop after two consecutive non-improvements.
template <class Traits>
class Trainer {
 public:
  using Params = typename Traits::Params;
  using Adapter = typename Traits::Adapter;
  using Real = typename Adapter::RealT;

  Trainer(TrainConfig cfg, Params params, Vocabulary vocab,
          const IdStream& train, const IdStream& valid)
      : cfg_(std::move(cfg)),
        params_(std::move(params)),
        vocab_(std::move(vocab)),
        train_(&train),
        rng_(cfg_.seed) {
    cfg_.validate();
    if (static_cast<std::int64_t>(vocab_.size()) != Traits::vocab(params_))
      throw std::invalid_argument("trainer: vocabulary/model size mismatch");
    const std::int64_t L = static_cast<std::int64_t>(train.ids.size());
    const std::int64_t N =
        static_cast<std::int64_t>(cfg_.noffset) * cfg_.minibatch;
    if (L < N)
      throw std::invalid_argument(
          "trainer: training stream shorter than the stream count");
    cursors_.resize(N);
    for (std::int64_t i = 0; i < N; ++i) cursors_[i] = i * L / N;
    const std::int64_t H = Traits::hidden(params_);
    hidden_ = Mat<Real>(N, H);
    hidden_.fill(activate(Traits::activation(params_), Real(0)));
    if (cfg_.valid_limit > 0 &&
        static_cast<std::int64_t>(valid.ids.size()) > cfg_.valid_limit)
      valid_eval_.ids.assign(valid.ids.begin(),
                             valid.ids.begin() + cfg_.valid_limit);
    else
      valid_eval_ = valid;
    if (valid_eval_.ids.size() < 2)
      throw std::invalid_argument("trainer: validation stream too short");
    if (cfg_.mode == LossMode::kNce)
      noise_ = NoiseModel::from_stream(train, vocab_.size(), cfg_.nce_k,
                                       vocab_.bos_id(), cfg_.noise_floor);
    opt_ = Traits::make_opt(params_, cfg_.rho, cfg_.eps);
    eta_ = cfg_.eta;
  }

  const TrainConfig& config() const { return cfg_; }
  const Params& params() const { return params_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<EpochLog>& logs() const { return logs_; }
  int epoch() const { return epoch_; }
  double eta() const { return eta_; }
  double best_ppl() const { return best_ppl_; }
  double initial_ppl() const { return initial_ppl_; }

  double validate() {
    Adapter a(params_);
    return sharded_perplexity(a, valid_eval_, cfg_.valid_shards,
                              vocab_.bos_id(), cfg_.threads)
        .perplexity;
  }

  // Runs epochs until max_epochs or early stopping; callable again after
  // resume. Throws DataError if validation perplexity exceeds
  // divergence_factor times the initial (untrained) perplexity.
  void train(std::ostream* progress = nullptr) {
    if (initial_ppl_ == 0.0) {
      initial_ppl_ = validate();
      best_ppl_ = initial_ppl_;
      if (progress != nullptr)
        *progress << "initial valid ppl " << initial_ppl_ << "\n";
    }
    while (epoch_ < cfg_.max_epochs && bad_epochs_ < 2) {
      Timer timer;
      const auto [mean_loss, skipped, tokens] = run_epoch();
      const double ppl = validate();
      EpochLog log;
      log.epoch = ++epoch_;
      log.train_loss = mean_loss;
      log.valid_ppl = ppl;
      log.eta = eta_;
      log.seconds = timer.seconds();
      log.tokens_per_sec =
          log.seconds > 0.0 ? static_cast<double>(tokens) / log.seconds : 0.0;
      log.skipped_updates = skipped;
      logs_.push_back(log);
      if (progress != nullptr)
        *progress << "epoch " << log.epoch << " loss " << log.train_loss
                  << " valid ppl " << ppl << " eta " << log.eta << " ("
                  << log.seconds << "s)\n";
      if (ppl > cfg_.divergence_factor * initial_ppl_)
        throw DataError("trainer: diverged (validation perplexity " +
                        std::to_string(ppl) + " vs initial " +
                        std::to_string(initial_ppl_) + ")");
      if (ppl < best_ppl_) {
        best_ppl_ = ppl;
        bad_epochs_ = 0;
      } else {
        ++bad_epochs_;
        eta_ *= 0.5;
      }
    }
  }

  // ----- checkpointing -----

  void save_checkpoint(std::ostream& os) const {
    put_magic(os, "RTRN");
    put_u32(os, kTrainerFormatVersion);
    write_config_echo(os);
    put_u32(os, static_cast<std::uint32_t>(epoch_));
    put_f64(os, eta_);
    put_f64(os, best_ppl_);
    put_u32(os, static_cast<std::uint32_t>(bad_epochs_));
    put_f64(os, initial_ppl_);
    std::ostringstream rs;
    rs << rng_;
    put_string(os, rs.str());
    put_u64(os, cursors_.size());
    for (std::int64_t c : cursors_) put_u64(os, static_cast<std::uint64_t>(c));
    for (const Real x : hidden_.a) put_f32(os, static_cast<float>(x));
    Traits::write_params(os, params_, vocab_);
    Traits::write_opt(os, opt_);
    put_magic(os, "TEND");
  }

  void save_checkpoint(const std::string& path) const {
    atomic_write(path, [&](std::ostream& os) { save_checkpoint(os); });
  }

  // Restores a checkpoint written with an identical configuration and
  // streams; training then continues bit-for-bit as if uninterrupted.
  void load_checkpoint(std::istream& is) {
    expect_magic(is, "RTRN", "trainer checkpoint");
    const std::uint32_t version = get_u32(is);
    if (version != kTrainerFormatVersion)
      throw DataError("trainer checkpoint: unsupported version " +
                      std::to_string(version));
    check_config_echo(is);
    epoch_ = static_cast<int>(get_u32(is));
    eta_ = get_f64(is);
    best_ppl_ = get_f64(is);
    bad_epochs_ = static_cast<int>(get_u32(is));
    initial_ppl_ = get_f64(is);
    {
      std::istringstream rs(get_string(is));
      rs >> rng_;
      if (rs.fail())
        throw DataError("trainer checkpoint: bad generator state");
    }
    const std::uint64_t n = get_u64(is);
    if (n != cursors_.size())
      throw DataError("trainer checkpoint: cursor count mismatch");
    for (auto& c : cursors_) c = static_cast<std::int64_t>(get_u64(is));
    const std::int64_t L = static_cast<std::int64_t>(train_->ids.size());
    for (std::int64_t c : cursors_)
      if (c < 0 || c >= L)
        throw DataError("trainer checkpoint: cursor out of range");
    for (auto& x : hidden_.a) x = static_cast<Real>(get_f32(is));
    auto [p, v] = Traits::read_params(is);
    if (Traits::hidden(p) != Traits::hidden(params_) ||
        Traits::vocab(p) != Traits::vocab(params_))
      throw DataError("trainer checkpoint: model shape mismatch");
    if (v.words() != vocab_.words())
      throw DataError("trainer checkpoint: vocabulary mismatch");
    params_ = std::move(p);
    opt_ = Traits::read_opt(is);
    expect_magic(is, "TEND", "trainer checkpoint trailer");
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream is = open_input(path);
    load_checkpoint(is);
  }

 private:
  struct EpochStats {
    double mean_loss;
    std::size_t skipped;
    std::int64_t tokens;
  };

  EpochStats run_epoch() {
    const auto& ids = train_->ids;
    const std::int64_t L = static_cast<std::int64_t>(ids.size());
    const std::int64_t B = cfg_.minibatch, T = cfg_.unroll;
    const std::int64_t N = static_cast<std::int64_t>(cfg_.noffset) * B;
    const std::int64_t H = Traits::hidden(params_);
    const std::int64_t rounds = (L + N * T - 1) / (N * T);
    const WordId bos = vocab_.bos_id();

    WindowBatch wb;
    wb.resize(T, B);
    Mat<Real> h0(B, H), h_final;
    BpttOptions<Real> opt;
    opt.mode = cfg_.mode;
    opt.noise = cfg_.mode == LossMode::kNce ? &*noise_ : nullptr;
    opt.rng = &rng_;
    opt.loss_scale = 1.0 / static_cast<double>(B * T);
    opt.clip = static_cast<Real>(cfg_.clip);
    opt.threads = cfg_.threads;

    double loss_sum = 0.0;
    std::int64_t windows = 0;
    std::size_t skipped = 0;
    const Real a0 = activate(Traits::activation(params_), Real(0));
    for (std::int64_t r = 0; r < rounds; ++r) {
      for (int g = 0; g < cfg_.noffset; ++g) {
        const std::int64_t s0 = static_cast<std::int64_t>(g) * B;
        for (std::int64_t t = 0; t < T; ++t) {
          for (std::int64_t b = 0; b < B; ++b) {
            const std::int64_t pos = cursors_[s0 + b] + t;
            const WordId x = ids[static_cast<std::size_t>(pos % L)];
            const WordId y = ids[static_cast<std::size_t>((pos + 1) % L)];
            const auto i = static_cast<std::size_t>(t * B + b);
            wb.inputs[i] = x;
            wb.targets[i] = y;
            wb.weights[i] = y == bos ? 0 : 1;
          }
        }
        for (std::int64_t b = 0; b < B; ++b)
          std::copy_n(hidden_.row(s0 + b), H, h0.row(b));
        Adapter adapter(params_);
        const BpttResult res =
            bptt_run(adapter, wb, h0, &grads_, &h_final, opt);
        loss_sum += res.loss;
        ++windows;
        if (!Traits::update(params_, grads_, opt_, eta_)) ++skipped;
        for (std::int64_t b = 0; b < B; ++b) {
          std::copy_n(h_final.row(b), H, hidden_.row(s0 + b));
          auto& cur = cursors_[s0 + b];
          cur += T;
          if (cur >= L) {
            cur -= L;
            Real* hr = hidden_.row(s0 + b);
            for (std::int64_t i = 0; i < H; ++i) hr[i] = a0;
          }
        }
      }
    }
    return {windows > 0 ? loss_sum / static_cast<double>(windows) : 0.0,
            skipped, rounds * N * T};
  }

  void write_config_echo(std::ostream& os) const {
    put_u64(os, static_cast<std::uint64_t>(cfg_.nstate));
    put_u64(os, static_cast<std::uint64_t>(cfg_.nproj));
    put_u32(os, static_cast<std::uint32_t>(cfg_.noffset));
    put_u32(os, static_cast<std::uint32_t>(cfg_.minibatch));
    put_u32(os, static_cast<std::uint32_t>(cfg_.unroll));
    put_f64(os, cfg_.eta);
    put_f64(os, cfg_.rho);
    put_f64(os, cfg_.eps);
    put_f64(os, cfg_.clip);
    put_u8(os, static_cast<std::uint8_t>(cfg_.mode));
    put_u32(os, static_cast<std::uint32_t>(cfg_.nce_k));
    put_f64(os, cfg_.noise_floor);
    put_u32(os, static_cast<std::uint32_t>(cfg_.max_epochs));
    put_u64(os, cfg_.seed);
    put_u8(os, static_cast<std::uint8_t>(cfg_.act));
    put_f64(os, cfg_.divergence_factor);
    put_u64(os, static_cast<std::uint64_t>(cfg_.valid_limit));
    put_u32(os, static_cast<std::uint32_t>(cfg_.valid_shards));
    put_f64(os, cfg_.init_range);
  }

  void check_config_echo(std::istream& is) const {
    const bool ok =
        get_u64(is) == static_cast<std::uint64_t>(cfg_.nstate) &&
        get_u64(is) == static_cast<std::uint64_t>(cfg_.nproj) &&
        get_u32(is) == static_cast<std::uint32_t>(cfg_.noffset) &&
        get_u32(is) == static_cast<std::uint32_t>(cfg_.minibatch) &&
        get_u32(is) == static_cast<std::uint32_t>(cfg_.unroll) &&
        get_f64(is) == cfg_.eta && get_f64(is) == cfg_.rho &&
        get_f64(is) == cfg_.eps && get_f64(is) == cfg_.clip &&
        get_u8(is) == static_cast<std::uint8_t>(cfg_.mode) &&
        get_u32(is) == static_cast<std::uint32_t>(cfg_.nce_k) &&
        get_f64(is) == cfg_.noise_floor &&
        // max_epochs is only a stopping rule; a resumed run may raise it.
        (static_cast<void>(get_u32(is)), true) &&
        get_u64(is) == cfg_.seed &&
        get_u8(is) == static_cast<std::uint8_t>(cfg_.act) &&
        get_f64(is) == cfg_.divergence_factor &&
        get_u64(is) == static_cast<std::uint64_t>(cfg_.valid_limit) &&
        get_u32(is) == static_cast<std::uint32_t>(cfg_.valid_shards) &&
        get_f64(is) == cfg_.init_range;
    if (!ok)
      throw DataError(
          "trainer checkpoint: configuration does not match this run");
  }

  TrainConfig cfg_;
  Params params_;
  Vocabulary vocab_;
  const IdStream* train_;
  IdStream valid_eval_;
  std::optional<NoiseModel> noise_;
  typename Traits::Opt opt_;
  typename Traits::Grads grads_;
  std::mt19937_64 rng_;
  std::vector<std::int64_t> cursors_;
  Mat<Real> hidden_;
  std::vector<EpochLog> logs_;
  int epoch_ = 0;
  int bad_epochs_ = 0;
  double eta_ = 0.0;
  double best_ppl_ = 0.0;
  double initial_ppl_ = 0.0;
};

}  // namespace desklm

#endif  // DESKLM_TRAINER_HPP
