// desklm: a desk-scale language-modelling pipeline. Each subcommand is one
// pipeline stage; `desklm <subcommand> --help` documents its file formats.
//
// Common conventions:
//   - "-" as an input path reads stdin; as an output path writes stdout.
//   - Every successful run writes desklm-manifest-<subcommand>.json into
//     --outdir with the resolved configuration and FNV-1a checksums of all
//     input and output bytes, so runs can be replayed and compared exactly.
//   - Exit codes: 0 success, 1 usage error, 2 data/format error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <desklm/desklm.hpp>

namespace {

using nlohmann::json;
using namespace desklm;

struct Global {
  std::uint64_t seed = 1;
  int threads = 1;
  std::string outdir = ".";
  bool quiet = false;
};

void note(const Global& g, const std::string& msg) {
  if (!g.quiet) std::cerr << msg << '\n';
}

__attribute__((format(printf, 1, 2)))
std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

// Collects input/output checksums and writes the run manifest.
class Io {
 public:
  Io(const Global& g, std::string sub) : g_(g), sub_(std::move(sub)) {}

  std::string read_input(const std::string& path) {
    std::string bytes;
    if (path == "-") {
      std::ostringstream ss;
      ss << std::cin.rdbuf();
      bytes = ss.str();
    } else {
      bytes = read_file(path);
    }
    inputs_.push_back({{"path", path},
                       {"bytes", bytes.size()},
                       {"fnv1a64", hex64(fnv1a64(bytes))}});
    return bytes;
  }

  void write_output(const std::string& path, const std::string& bytes) {
    if (path == "-") {
      std::cout.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      std::cout.flush();
    } else {
      atomic_write(path, [&](std::ostream& os) {
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      });
    }
    outputs_.push_back({{"path", path},
                        {"bytes", bytes.size()},
                        {"fnv1a64", hex64(fnv1a64(bytes))}});
  }

  void config(json j) { config_ = std::move(j); }

  void finish() {
    const json m{{"tool", "desklm"},     {"subcommand", sub_},
                 {"seed", g_.seed},      {"threads", g_.threads},
                 {"config", config_},    {"inputs", inputs_},
                 {"outputs", outputs_}};
    if (!g_.outdir.empty() && g_.outdir != ".")
      std::filesystem::create_directories(g_.outdir);
    const std::string path =
        (g_.outdir.empty() ? std::string(".") : g_.outdir) +
        "/desklm-manifest-" + sub_ + ".json";
    atomic_write(path, [&](std::ostream& os) { os << m.dump(2) << '\n'; });
  }

 private:
  const Global& g_;
  std::string sub_;
  json config_ = json::object();
  json inputs_ = json::array();
  json outputs_ = json::array();
};

Activation parse_act(const std::string& s) {
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation: " + s);
}

LossMode parse_mode(const std::string& s) {
  if (s == "nce") return LossMode::kNce;
  if (s == "softmax") return LossMode::kSoftmax;
  throw std::invalid_argument("unknown training mode: " + s);
}

Vocabulary load_vocab(Io& io, const std::string& path) {
  std::istringstream is(io.read_input(path));
  return Vocabulary::read(is);
}

IdStream load_ids(Io& io, const std::string& path, std::size_t vocab_size) {
  std::istringstream is(io.read_input(path));
  return read_id_stream(is, vocab_size);
}

NGramModel load_arpa(Io& io, const std::string& path) {
  std::istringstream is(io.read_input(path));
  return read_arpa(is);
}

// Reads a recurrent model of any on-disk flavour (standard "RNLM",
// bottleneck "RNBL", or quantized "RNQZ", which is dequantized first) and
// invokes fn(adapter, vocabulary).
template <class Fn>
void with_model(const std::string& bytes, Fn&& fn) {
  if (bytes.size() < 4)
    throw DataError("model file too short to identify");
  const std::string_view magic(bytes.data(), 4);
  std::istringstream is(bytes);
  if (magic == "RNLM") {
    auto [p, v] = read_params(is);
    const StandardAdapter<float> a(p);
    fn(a, v);
  } else if (magic == "RNBL") {
    auto [p, v] = read_bottleneck(is);
    const BottleneckAdapter<float> a(p);
    fn(a, v);
  } else if (magic == "RNQZ") {
    auto [p, v] = dequantize_model(read_quantized(is));
    const BottleneckAdapter<float> a(p);
    fn(a, v);
  } else {
    throw DataError("unrecognized model header (want RNLM, RNBL, or RNQZ)");
  }
}

// Encodes either raw text (normalized first) or a pre-encoded id stream
// under the given vocabulary; exactly one of text_path/ids_path is set.
IdStream load_eval_stream(Io& io, const std::string& text_path,
                          const std::string& ids_path,
                          const Vocabulary& vocab) {
  if (!text_path.empty()) {
    const SentenceCorpus c = normalize_text(io.read_input(text_path));
    return encode(c, vocab);
  }
  return load_ids(io, ids_path, vocab.size());
}

// ---------------------------------------------------------------------------
// normalize
// ---------------------------------------------------------------------------

struct NormalizeOpts {
  std::string in = "-";
  std::string out = "-";
};

void run_normalize(const NormalizeOpts& o, const Global& g) {
  Io io(g, "normalize");
  const SentenceCorpus c = normalize_text(io.read_input(o.in));
  std::ostringstream os;
  write_corpus(os, c);
  io.write_output(o.out, os.str());
  io.config({{"in", o.in}, {"out", o.out}});
  io.finish();
  note(g, fmt("normalize: %zu sentences, %zu tokens", c.num_sentences(),
              c.num_tokens()));
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

struct GenOpts {
  std::int64_t tokens = 0;
  std::string out = "-";
  std::uint64_t stream_seed = 1;
  int topic = -1;
  int topics = 24;
  double dup_p = 0.01;
};

void run_gen(const GenOpts& o, const Global& g) {
  Io io(g, "gen-corpus");
  GenConfig cfg;
  cfg.topics = o.topics;
  cfg.dup_p = o.dup_p;
  cfg.validate();
  if (o.topic >= cfg.topics)
    throw std::invalid_argument("gen-corpus: --topic out of range");
  TextGenerator gen(cfg, g.seed);
  const std::string raw =
      o.topic < 0 ? gen.generate(o.tokens, o.stream_seed)
                  : gen.generate_topic(o.tokens, o.stream_seed, o.topic);
  io.write_output(o.out, raw);
  io.config({{"tokens", o.tokens},
             {"stream_seed", o.stream_seed},
             {"topic", o.topic},
             {"topics", o.topics},
             {"dup_p", o.dup_p}});
  io.finish();
  note(g, fmt("gen-corpus: %zu bytes of raw text", raw.size()));
}

// ---------------------------------------------------------------------------
// dedup
// ---------------------------------------------------------------------------

struct DedupOpts {
  std::string in = "-";
  std::string out = "-";
  std::size_t min_buffer_chars = 140;
  std::size_t num_hashes = 4;
  std::size_t filter_bits = 0;  // 0 = size automatically
};

void run_dedup(const DedupOpts& o, const Global& g) {
  Io io(g, "dedup");
  std::istringstream is(io.read_input(o.in));
  const SentenceCorpus c = read_corpus(is);
  DedupConfig cfg;
  cfg.min_buffer_chars = o.min_buffer_chars;
  cfg.num_hashes = o.num_hashes;
  if (o.filter_bits != 0) {
    cfg.filter_bits = o.filter_bits;
  } else {
    std::size_t chars = 0;
    for (const auto& s : c.sentences)
      for (const auto& w : s) chars += w.size() + 1;
    cfg.filter_bits = recommended_filter_bits(
        chars / std::max<std::size_t>(1, o.min_buffer_chars) + 1,
        o.num_hashes);
  }
  const DedupResult r = dedup_corpus_stats(c, cfg);
  std::ostringstream os;
  write_corpus(os, r.corpus);
  io.write_output(o.out, os.str());
  io.config({{"min_buffer_chars", cfg.min_buffer_chars},
             {"num_hashes", cfg.num_hashes},
             {"filter_bits", cfg.filter_bits}});
  io.finish();
  note(g, fmt("dedup: dropped %zu of %zu buffers (%zu sentences)",
              r.buffers_dropped, r.buffers_total, r.sentences_dropped));
}

// ---------------------------------------------------------------------------
// vocab
// ---------------------------------------------------------------------------

struct VocabOpts {
  std::string in = "-";
  std::string out = "-";
  std::size_t size = 10000;
};

void run_vocab(const VocabOpts& o, const Global& g) {
  Io io(g, "vocab");
  std::istringstream is(io.read_input(o.in));
  const Vocabulary v = build_vocab(read_corpus(is), o.size);
  std::ostringstream os;
  v.write(os);
  io.write_output(o.out, os.str());
  io.config({{"size", o.size}});
  io.finish();
  note(g, fmt("vocab: %zu words", v.size()));
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

struct EncodeOpts {
  std::string in = "-";
  std::string vocab;
  std::string out = "-";
};

void run_encode(const EncodeOpts& o, const Global& g) {
  Io io(g, "encode");
  std::istringstream is(io.read_input(o.in));
  const SentenceCorpus c = read_corpus(is);
  const Vocabulary v = load_vocab(io, o.vocab);
  const IdStream s = encode(c, v);
  std::ostringstream os;
  write_id_stream(os, s, v);
  io.write_output(o.out, os.str());
  io.config({{"vocab", o.vocab}});
  io.finish();
  note(g, fmt("encode: %zu ids", s.ids.size()));
}

// ---------------------------------------------------------------------------
// ngram-train
// ---------------------------------------------------------------------------

struct NgramTrainOpts {
  std::string ids;
  std::string vocab;
  std::string out = "-";
  int order = 5;
  std::optional<double> prune_count;
  std::optional<double> prune_logp;
};

void run_ngram_train(const NgramTrainOpts& o, const Global& g) {
  Io io(g, "ngram-train");
  const Vocabulary v = load_vocab(io, o.vocab);
  const IdStream s = load_ids(io, o.ids, v.size());
  const CountTable counts = count_ngrams(s, o.order, v.bos_id());
  std::vector<std::string> warnings;
  NGramModel m = estimate_kn(counts, v, &warnings);
  for (const auto& w : warnings) note(g, "ngram-train: " + w);
  if (o.prune_count)
    m = prune(m, PruneMode::kMinCount, *o.prune_count, &counts);
  if (o.prune_logp) m = prune(m, PruneMode::kMinLogp10, *o.prune_logp);
  std::ostringstream os;
  write_arpa(os, m);
  io.write_output(o.out, os.str());
  json cfg{{"order", o.order}};
  if (o.prune_count) cfg["prune_count"] = *o.prune_count;
  if (o.prune_logp) cfg["prune_logp"] = *o.prune_logp;
  io.config(cfg);
  io.finish();
  std::string sizes;
  for (int k = 1; k <= m.order(); ++k)
    sizes += fmt("%s%d-grams=%zu", k > 1 ? " " : "", k,
                 m.levels()[k - 1].size());
  note(g, "ngram-train: " + sizes);
}

// ---------------------------------------------------------------------------
// ngram-ppl
// ---------------------------------------------------------------------------

struct NgramPplOpts {
  std::string model;
  std::string text;
  std::string ids;
};

void run_ngram_ppl(const NgramPplOpts& o, const Global& g) {
  Io io(g, "ngram-ppl");
  const NGramModel m = load_arpa(io, o.model);
  const IdStream s = load_eval_stream(io, o.text, o.ids, m.vocab());
  const PerplexityResult r = ngram_perplexity_full(m, s);
  std::cout << fmt("%.6f\n", r.perplexity);
  io.config({{"order", m.order()}});
  io.finish();
  note(g, fmt("ngram-ppl: %zu predicted tokens, total ln p = %.3f",
              r.predicted, r.total_logprob));
}

// ---------------------------------------------------------------------------
// filter / filter-threshold
// ---------------------------------------------------------------------------

struct FilterOpts {
  std::string in = "-";
  std::string out = "-";
  std::string in_lm;
  std::string gen_lm;
  std::size_t buffer = 1;
  std::optional<double> threshold;
  std::optional<double> fraction;
  double tol = 0.02;
  bool sweep = false;  // filter-threshold only
};

void run_filter(const FilterOpts& o, const Global& g) {
  Io io(g, "filter");
  std::istringstream is(io.read_input(o.in));
  const SentenceCorpus c = read_corpus(is);
  const NGramModel in_lm = load_arpa(io, o.in_lm);
  const NGramModel gen_lm = load_arpa(io, o.gen_lm);
  const std::vector<SentenceScore> scores = score_sentences(in_lm, gen_lm, c);
  double thr;
  if (o.fraction) {
    const ThresholdResult t =
        threshold_for_fraction(scores, o.buffer, *o.fraction, o.tol);
    thr = t.threshold;
    note(g, fmt("filter: threshold %.6g keeps fraction %.4f%s", t.threshold,
                t.fraction, t.within_tol ? "" : " (outside tolerance)"));
  } else {
    thr = *o.threshold;
  }
  const FilterResult fr = entropy_filter(scores, o.buffer, thr);
  const SentenceCorpus kept = apply_filter(c, fr.keep);
  std::ostringstream os;
  write_corpus(os, kept);
  io.write_output(o.out, os.str());
  io.config({{"buffer", o.buffer},
             {"threshold", thr},
             {"kept", fr.kept},
             {"fraction", fr.fraction}});
  io.finish();
  note(g, fmt("filter: kept %zu of %zu sentences (%.4f)", fr.kept,
              scores.size(), fr.fraction));
}

void run_filter_threshold(const FilterOpts& o, const Global& g) {
  Io io(g, "filter-threshold");
  std::istringstream is(io.read_input(o.in));
  const SentenceCorpus c = read_corpus(is);
  const NGramModel in_lm = load_arpa(io, o.in_lm);
  const NGramModel gen_lm = load_arpa(io, o.gen_lm);
  const std::vector<SentenceScore> scores = score_sentences(in_lm, gen_lm, c);
  std::ostringstream os;
  json cfg{{"buffer", o.buffer}};
  if (o.fraction) {
    const ThresholdResult t =
        threshold_for_fraction(scores, o.buffer, *o.fraction, o.tol);
    os << "threshold,fraction,within_tol\n"
       << fmt("%.10g,%.6f,%d\n", t.threshold, t.fraction,
              t.within_tol ? 1 : 0);
    cfg["target"] = *o.fraction;
    cfg["tol"] = o.tol;
    cfg["threshold"] = t.threshold;
  } else {
    os << "threshold,fraction\n";
    for (const ThresholdResult& t : threshold_sweep(scores, o.buffer))
      os << fmt("%.10g,%.6f\n", t.threshold, t.fraction);
  }
  io.write_output(o.out, os.str());
  io.config(cfg);
  io.finish();
}

// ---------------------------------------------------------------------------
// rnn-train
// ---------------------------------------------------------------------------

struct RnnTrainOpts {
  std::string train;
  std::string valid;
  std::string vocab;
  std::string out;
  std::string checkpoint;
  std::string resume;
  std::string log;
  std::int64_t nstate = 256;
  std::int64_t nproj = 0;
  int noffset = 128;
  int minibatch = 8;
  int unroll = 16;
  double eta = 0.1;
  double rho = 0.9995;
  double eps = 1e-6;
  double clip = 1.0;
  std::string mode = "nce";
  int nce_k = 64;
  double noise_floor = 1e-8;
  int max_epochs = 20;
  std::string act = "sigmoid";
  double divergence_factor = 10.0;
  std::int64_t valid_limit = 0;
  int valid_shards = 8;
  double init_range = 0.1;
};

json train_config_json(const RnnTrainOpts& o) {
  return {{"nstate", o.nstate},
          {"nproj", o.nproj},
          {"noffset", o.noffset},
          {"minibatch", o.minibatch},
          {"unroll", o.unroll},
          {"eta", o.eta},
          {"rho", o.rho},
          {"eps", o.eps},
          {"clip", o.clip},
          {"mode", o.mode},
          {"nce_k", o.nce_k},
          {"noise_floor", o.noise_floor},
          {"max_epochs", o.max_epochs},
          {"act", o.act},
          {"divergence_factor", o.divergence_factor},
          {"valid_limit", o.valid_limit},
          {"valid_shards", o.valid_shards},
          {"init_range", o.init_range}};
}

template <class Traits>
void do_train(const RnnTrainOpts& o, const Global& g) {
  Io io(g, "rnn-train");
  const Vocabulary vocab = load_vocab(io, o.vocab);
  const IdStream train = load_ids(io, o.train, vocab.size());
  const IdStream valid = load_ids(io, o.valid, vocab.size());

  TrainConfig tc;
  tc.nstate = o.nstate;
  tc.nproj = o.nproj;
  tc.noffset = o.noffset;
  tc.minibatch = o.minibatch;
  tc.unroll = o.unroll;
  tc.eta = o.eta;
  tc.rho = o.rho;
  tc.eps = o.eps;
  tc.clip = o.clip;
  tc.mode = parse_mode(o.mode);
  tc.nce_k = o.nce_k;
  tc.noise_floor = o.noise_floor;
  tc.max_epochs = o.max_epochs;
  tc.seed = g.seed;
  tc.act = parse_act(o.act);
  tc.divergence_factor = o.divergence_factor;
  tc.valid_limit = o.valid_limit;
  tc.valid_shards = o.valid_shards;
  tc.init_range = o.init_range;
  tc.threads = g.threads;

  const auto v = static_cast<std::int64_t>(vocab.size());
  typename Traits::Params p0 = [&] {
    if constexpr (std::is_same_v<Traits, BottleneckTraits>)
      return typename Traits::Params(v, tc.nstate, tc.nproj, tc.act);
    else
      return typename Traits::Params(v, tc.nstate, tc.act);
  }();
  p0.init_uniform(tc.seed, tc.init_range);

  Trainer<Traits> trainer(tc, std::move(p0), vocab, train, valid);
  if (!o.resume.empty()) {
    std::istringstream is(io.read_input(o.resume));
    trainer.load_checkpoint(is);
    note(g, fmt("rnn-train: resumed at epoch %d", trainer.epoch()));
  }
  trainer.train(g.quiet ? nullptr : &std::cerr);

  {
    std::ostringstream os;
    Traits::write_params(os, trainer.params(), vocab);
    io.write_output(o.out, os.str());
  }
  if (!o.checkpoint.empty()) {
    std::ostringstream os;
    trainer.save_checkpoint(os);
    io.write_output(o.checkpoint, os.str());
  }
  if (!o.log.empty()) {
    std::ostringstream os;
    write_epoch_log(os, trainer.logs());
    io.write_output(o.log, os.str());
  }
  io.config(train_config_json(o));
  io.finish();
  note(g, fmt("rnn-train: %d epochs, best valid ppl %.4f (initial %.4f)",
              trainer.epoch(), trainer.best_ppl(), trainer.initial_ppl()));
}

void run_rnn_train(const RnnTrainOpts& o, const Global& g) {
  if (o.nproj > 0)
    do_train<BottleneckTraits>(o, g);
  else
    do_train<StandardTraits>(o, g);
}

// ---------------------------------------------------------------------------
// rnn-ppl
// ---------------------------------------------------------------------------

struct RnnPplOpts {
  std::string model;
  std::string text;
  std::string ids;
  int shards = 1;
};

void run_rnn_ppl(const RnnPplOpts& o, const Global& g) {
  Io io(g, "rnn-ppl");
  const std::string bytes = io.read_input(o.model);
  PerplexityResult r;
  with_model(bytes, [&](const auto& a, const Vocabulary& v) {
    const IdStream s = load_eval_stream(io, o.text, o.ids, v);
    r = o.shards > 1 ? sharded_perplexity(a, s, o.shards, v.bos_id(),
                                          g.threads)
                     : rnn_perplexity(a, s, v.bos_id(), g.threads);
  });
  std::cout << fmt("%.6f\n", r.perplexity);
  io.config({{"shards", o.shards}});
  io.finish();
  note(g, fmt("rnn-ppl: %zu predicted tokens", r.predicted));
}

// ---------------------------------------------------------------------------
// interp-ppl
// ---------------------------------------------------------------------------

struct InterpOpts {
  std::string model;
  std::string arpa;
  std::string text;
  std::string ids;
  std::string tune_text;
  std::string tune_ids;
  double lambda = 0.5;
};

void run_interp_ppl(const InterpOpts& o, const Global& g) {
  Io io(g, "interp-ppl");
  const std::string bytes = io.read_input(o.model);
  const NGramModel ng = load_arpa(io, o.arpa);
  double lambda = o.lambda;
  const bool tuned = !o.tune_text.empty() || !o.tune_ids.empty();
  PerplexityResult r;
  with_model(bytes, [&](const auto& a, const Vocabulary& v) {
    const VocabMap map = make_vocab_map(v, ng.vocab());
    if (tuned) {
      const IdStream ts = load_eval_stream(io, o.tune_text, o.tune_ids,
                                           ng.vocab());
      const auto terms = interpolation_terms(a, map, ng, ts, g.threads);
      double tune_ppl = 0.0;
      lambda = tune_lambda(terms, &tune_ppl);
      note(g, fmt("interp-ppl: tuned lambda %.6f (tuning ppl %.4f)", lambda,
                  tune_ppl));
    }
    const IdStream s = load_eval_stream(io, o.text, o.ids, ng.vocab());
    r = interpolated_perplexity(a, map, ng, s, lambda, g.threads);
  });
  std::cout << fmt("%.6f\n", r.perplexity);
  io.config({{"lambda", lambda}, {"tuned", tuned}});
  io.finish();
  note(g, fmt("interp-ppl: lambda %.6f over %zu tokens", lambda, r.predicted));
}

// ---------------------------------------------------------------------------
// hit-rate
// ---------------------------------------------------------------------------

struct HitRateOpts {
  std::string ids;
  std::string shortlist_arpa;
  std::string scorer = "rnn";
  std::string model;
  std::string arpa;
  std::size_t shortlist = 100;
  std::size_t top = 3;
};

void run_hit_rate(const HitRateOpts& o, const Global& g) {
  Io io(g, "hit-rate");
  const NGramModel shortlist = load_arpa(io, o.shortlist_arpa);
  const IdStream s = load_ids(io, o.ids, shortlist.vocab().size());
  HitRateResult r;
  if (o.scorer == "ngram") {
    if (!o.arpa.empty()) {
      const NGramModel scoring = load_arpa(io, o.arpa);
      if (scoring.vocab().words() != shortlist.vocab().words())
        throw DataError("hit-rate: scoring and shortlist vocabularies differ");
      NgramHitScorer sc(scoring);
      r = hit_rate(s, shortlist, o.shortlist, o.top, sc);
    } else {
      NgramHitScorer sc(shortlist);
      r = hit_rate(s, shortlist, o.shortlist, o.top, sc);
    }
  } else if (o.scorer == "rnn") {
    if (o.model.empty())
      throw std::invalid_argument("hit-rate: --model required with rnn scorer");
    const std::string bytes = io.read_input(o.model);
    with_model(bytes, [&](const auto& a, const Vocabulary& v) {
      if (v.words() != shortlist.vocab().words())
        throw DataError("hit-rate: model and shortlist vocabularies differ");
      RnnHitScorer sc(a, g.threads);
      r = hit_rate(s, shortlist, o.shortlist, o.top, sc);
    });
  } else {
    throw std::invalid_argument("hit-rate: --scorer must be rnn or ngram");
  }
  std::cout << fmt("%.4f\n", 100.0 * r.rate());
  io.config({{"scorer", o.scorer},
             {"shortlist", o.shortlist},
             {"top", o.top}});
  io.finish();
  note(g, fmt("hit-rate: %zu hits / %zu positions", r.hits, r.positions));
}

// ---------------------------------------------------------------------------
// rescore
// ---------------------------------------------------------------------------

struct RescoreOpts {
  std::string nbest;
  std::string model;
  std::string arpa;
  std::string out = "-";
  double lambda = 0.5;
  double lm_scale = 1.0;
  double wip = 0.0;
  bool fast = false;
};

void run_rescore(const RescoreOpts& o, const Global& g) {
  Io io(g, "rescore");
  std::istringstream is(io.read_input(o.nbest));
  std::vector<NBestUtt> utts = read_nbest(is);
  std::optional<NGramModel> ng;
  if (!o.arpa.empty()) ng = load_arpa(io, o.arpa);
  const std::string bytes = io.read_input(o.model);
  with_model(bytes, [&](const auto& a, const Vocabulary& v) {
    RescoreConfig rc;
    rc.lambda = o.lambda;
    rc.lm_scale = o.lm_scale;
    rc.wip = o.wip;
    rc.fast = o.fast;
    rc.threads = g.threads;
    rescore_nbest(utts, a, v, ng ? &*ng : nullptr, rc);
  });
  std::ostringstream os;
  write_nbest(os, utts);
  io.write_output(o.out, os.str());
  io.config({{"lambda", o.lambda},
             {"lm_scale", o.lm_scale},
             {"wip", o.wip},
             {"fast", o.fast}});
  io.finish();
  std::size_t hyps = 0;
  for (const auto& u : utts) hyps += u.hyps.size();
  note(g, fmt("rescore: %zu utterances, %zu hypotheses", utts.size(), hyps));
}

// ---------------------------------------------------------------------------
// compress / quantize-sweep
// ---------------------------------------------------------------------------

struct CompressOpts {
  std::string model;
  std::string out = "-";
  int bits = 16;
};

void run_compress(const CompressOpts& o, const Global& g) {
  Io io(g, "compress");
  std::istringstream is(io.read_input(o.model));
  auto [p, v] = read_bottleneck(is);
  const QuantizedModel q = quantize_model(p, v, o.bits);
  std::ostringstream os;
  write_quantized(os, q);
  io.write_output(o.out, os.str());
  std::cout << quantized_size_bytes(q) << '\n';
  io.config({{"bits", o.bits}, {"bytes", quantized_size_bytes(q)}});
  io.finish();
  note(g, fmt("compress: %d-bit model, %llu bytes", o.bits,
              static_cast<unsigned long long>(quantized_size_bytes(q))));
}

struct SweepOpts {
  std::string model;
  std::string out = "-";
  std::vector<int> bits{16, 8, 6, 5, 4, 3, 2, 1};
  std::string ids;
  std::string shortlist_arpa;
  std::size_t shortlist = 100;
  std::size_t top = 3;
};

void run_quantize_sweep(const SweepOpts& o, const Global& g) {
  Io io(g, "quantize-sweep");
  std::istringstream is(io.read_input(o.model));
  auto [p, v] = read_bottleneck(is);
  const bool eval = !o.ids.empty() && !o.shortlist_arpa.empty();
  std::optional<NGramModel> shortlist;
  IdStream s;
  if (eval) {
    shortlist = load_arpa(io, o.shortlist_arpa);
    if (shortlist->vocab().words() != v.words())
      throw DataError("quantize-sweep: model and shortlist vocabularies differ");
    s = load_ids(io, o.ids, v.size());
  }
  std::ostringstream os;
  os << (eval ? "bits,bytes,hit_rate\n" : "bits,bytes\n");
  for (const int bits : o.bits) {
    const QuantizedModel q = quantize_model(p, v, bits);
    const std::uint64_t bytes = quantized_size_bytes(q);
    if (eval) {
      auto [dp, dv] = dequantize_model(q);
      const BottleneckAdapter<float> a(dp);
      RnnHitScorer sc(a, g.threads);
      const HitRateResult r = hit_rate(s, *shortlist, o.shortlist, o.top, sc);
      os << fmt("%d,%llu,%.4f\n", bits,
                static_cast<unsigned long long>(bytes), 100.0 * r.rate());
    } else {
      os << fmt("%d,%llu\n", bits, static_cast<unsigned long long>(bytes));
    }
  }
  io.write_output(o.out, os.str());
  io.config({{"bits", o.bits},
             {"shortlist", o.shortlist},
             {"top", o.top},
             {"eval", eval}});
  io.finish();
}

// ---------------------------------------------------------------------------
// fit-curve
// ---------------------------------------------------------------------------

struct FitOpts {
  std::string csv;
};

double parse_num(const std::string& s, std::size_t line) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw desklm::ParseError("fit-curve: bad number '" + s + "'", line);
  }
}

void run_fit_curve(const FitOpts& o, const Global& g) {
  Io io(g, "fit-curve");
  std::istringstream is(io.read_input(o.csv));
  std::vector<ScalingPoint> pts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw desklm::ParseError("fit-curve: expected 'words,ppl'", line_no);
    const std::string a = line.substr(0, comma);
    const std::string b = line.substr(comma + 1);
    if (line_no == 1 && (a == "words" || b == "ppl")) continue;  // header
    pts.push_back({parse_num(a, line_no), parse_num(b, line_no)});
  }
  const ScalingFit f = fit_scaling_curve(pts);
  const double p12 = scaling_predict(f, 1e12);
  const double p13 = scaling_predict(f, 1e13);
  std::cout << fmt("a=%.10g b=%.10g c=%.10g asymptote=%.10g rms=%.6g\n", f.a,
                   f.b, f.c, f.a, f.rms)
            << fmt("drop_1e12_to_1e13_pct=%.4f\n",
                   100.0 * (p12 - p13) / p12);
  io.config({{"points", pts.size()}});
  io.finish();
}

// ---------------------------------------------------------------------------
// command registration
// ---------------------------------------------------------------------------

constexpr const char* kCorpusFmt =
    "Corpus files hold one normalized sentence per line, tokens separated by "
    "single spaces.";
constexpr const char* kIdsFmt =
    "Id files hold space-separated integer word ids; each sentence starts "
    "with bos id 1 and ends its line with eos id 2.";
constexpr const char* kModelFmt =
    "Model files are binary: 'RNLM' (standard), 'RNBL' (bottleneck), or "
    "'RNQZ' (quantized; dequantized on load).";

void setup_normalize(CLI::App& app, const Global& g) {
  auto o = std::make_shared<NormalizeOpts>();
  auto* c = app.add_subcommand(
      "normalize",
      std::string("Lowercase raw text, spell out digits, and split "
                  "sentences.\nInput: raw UTF-8 text. Output: ") +
          kCorpusFmt);
  c->fallthrough();
  c->add_option("--in", o->in, "raw text file, or - for stdin")
      ->capture_default_str();
  c->add_option("--out", o->out, "normalized corpus, or - for stdout")
      ->capture_default_str();
  c->callback([&g, o] { run_normalize(*o, g); });
}

void setup_gen(CLI::App& app, const Global& g) {
  auto o = std::make_shared<GenOpts>();
  auto* c = app.add_subcommand(
      "gen-corpus",
      "Generate a synthetic topical corpus of raw text (the desk-scale "
      "stand-in for a real corpus).\nOutput: raw text with casing, "
      "punctuation, digits, and occasional exact duplicate runs.");
  c->fallthrough();
  c->add_option("--tokens", o->tokens, "approximate normalized token count")
      ->required()
      ->check(CLI::PositiveNumber);
  c->add_option("--out", o->out, "raw text file, or - for stdout")
      ->capture_default_str();
  c->add_option("--stream-seed", o->stream_seed,
                "seed for the sentence stream (vocabulary tables come from "
                "the global --seed)")
      ->capture_default_str();
  c->add_option("--topic", o->topic,
                "generate from a single topic (-1 = mixture over all)")
      ->capture_default_str();
  c->add_option("--topics", o->topics, "number of latent topics")
      ->capture_default_str();
  c->add_option("--dup-p", o->dup_p,
                "per-buffer probability of planting an exact duplicate")
      ->capture_default_str();
  c->callback([&g, o] { run_gen(*o, g); });
}

void setup_dedup(CLI::App& app, const Global& g) {
  auto o = std::make_shared<DedupOpts>();
  auto* c = app.add_subcommand(
      "dedup",
      std::string("Drop exact duplicate buffers of sentences with a Bloom "
                  "filter.\nInput/output: ") +
          kCorpusFmt);
  c->fallthrough();
  c->add_option("--in", o->in, "corpus file, or - for stdin")
      ->capture_default_str();
  c->add_option("--out", o->out, "deduplicated corpus, or - for stdout")
      ->capture_default_str();
  c->add_option("--min-buffer-chars", o->min_buffer_chars,
                "flush a buffer once it reaches this many characters")
      ->capture_default_str();
  c->add_option("--num-hashes", o->num_hashes, "Bloom filter hash count")
      ->capture_default_str();
  c->add_option("--filter-bits", o->filter_bits,
                "Bloom filter size in bits (0 = size for ~1e-3 false "
                "positives)")
      ->capture_default_str();
  c->callback([&g, o] { run_dedup(*o, g); });
}

void setup_vocab(CLI::App& app, const Global& g) {
  auto o = std::make_shared<VocabOpts>();
  auto* c = app.add_subcommand(
      "vocab",
      std::string("Build a frequency-ranked vocabulary with <unk>, <s>, "
                  "</s> reserved at ids 0, 1, 2.\nInput: ") +
          kCorpusFmt + " Output: binary vocabulary file.");
  c->fallthrough();
  c->add_option("--in", o->in, "corpus file, or - for stdin")
      ->capture_default_str();
  c->add_option("--out", o->out, "vocabulary file, or - for stdout")
      ->capture_default_str();
  c->add_option("--size", o->size, "total vocabulary size including specials")
      ->capture_default_str();
  c->callback([&g, o] { run_vocab(*o, g); });
}

void setup_encode(CLI::App& app, const Global& g) {
  auto o = std::make_shared<EncodeOpts>();
  auto* c = app.add_subcommand(
      "encode", std::string("Encode a corpus as word ids under a "
                            "vocabulary.\nInput: ") +
                    kCorpusFmt + " Output: " + kIdsFmt);
  c->fallthrough();
  c->add_option("--in", o->in, "corpus file, or - for stdin")
      ->capture_default_str();
  c->add_option("--vocab", o->vocab, "vocabulary file")->required();
  c->add_option("--out", o->out, "id stream, or - for stdout")
      ->capture_default_str();
  c->callback([&g, o] { run_encode(*o, g); });
}

void setup_ngram_train(CLI::App& app, const Global& g) {
  auto o = std::make_shared<NgramTrainOpts>();
  auto* c = app.add_subcommand(
      "ngram-train",
      std::string("Estimate an interpolated modified Kneser-Ney n-gram "
                  "model and write it as ARPA text.\nInput: ") +
          kIdsFmt + " Output: standard ARPA backoff file.");
  c->fallthrough();
  c->add_option("--ids", o->ids, "training id stream")->required();
  c->add_option("--vocab", o->vocab, "vocabulary file")->required();
  c->add_option("--order", o->order, "model order")
      ->capture_default_str()
      ->check(CLI::Range(1, 8));
  c->add_option("--out", o->out, "ARPA output, or - for stdout")
      ->capture_default_str();
  auto* pc = c->add_option("--prune-count", o->prune_count,
                           "drop n-grams (n>1) with adjusted count below "
                           "this, then repair backoff weights");
  auto* pl = c->add_option("--prune-logp", o->prune_logp,
                           "drop n-grams (n>1) with log10 probability below "
                           "this, then repair backoff weights");
  pc->excludes(pl);
  pl->excludes(pc);
  c->callback([&g, o] { run_ngram_train(*o, g); });
}

void setup_ngram_ppl(CLI::App& app, const Global& g) {
  auto o = std::make_shared<NgramPplOpts>();
  auto* c = app.add_subcommand(
      "ngram-ppl",
      std::string("Perplexity of text under an ARPA n-gram model; prints "
                  "one number.\nModel: ARPA file. ") +
          "--text is raw text (normalized first); --ids is " + kIdsFmt);
  c->fallthrough();
  c->add_option("--model", o->model, "ARPA model file")->required();
  auto* t = c->add_option("--text", o->text, "raw text to score");
  auto* i = c->add_option("--ids", o->ids, "pre-encoded id stream to score");
  t->excludes(i);
  i->excludes(t);
  c->callback([&g, o] {
    if (o->text.empty() && o->ids.empty())
      throw CLI::RequiredError("--text or --ids");
    run_ngram_ppl(*o, g);
  });
}

void setup_filter(CLI::App& app, const Global& g) {
  auto o = std::make_shared<FilterOpts>();
  auto* c = app.add_subcommand(
      "filter",
      std::string("Select in-domain sentences by cross-entropy difference "
                  "over sliding buffers of sentences.\nInput/output: ") +
          kCorpusFmt + " Models: ARPA files.");
  c->fallthrough();
  c->add_option("--in", o->in, "corpus to filter, or - for stdin")
      ->capture_default_str();
  c->add_option("--out", o->out, "kept sentences, or - for stdout")
      ->capture_default_str();
  c->add_option("--in-lm", o->in_lm, "in-domain ARPA model")->required();
  c->add_option("--gen-lm", o->gen_lm, "general-domain ARPA model")
      ->required();
  c->add_option("--buffer", o->buffer, "sentences per scoring window")
      ->capture_default_str();
  auto* th = c->add_option("--threshold", o->threshold,
                           "keep sentences in any window scoring strictly "
                           "below this (nats per word)");
  auto* fr = c->add_option("--fraction", o->fraction,
                           "instead, search for the threshold keeping this "
                           "fraction of sentences");
  th->excludes(fr);
  fr->excludes(th);
  c->add_option("--tol", o->tol, "fraction tolerance for the search")
      ->capture_default_str();
  c->callback([&g, o] {
    if (!o->threshold && !o->fraction)
      throw CLI::RequiredError("--threshold or --fraction");
    run_filter(*o, g);
  });
}

void setup_filter_threshold(CLI::App& app, const Global& g) {
  auto o = std::make_shared<FilterOpts>();
  auto* c = app.add_subcommand(
      "filter-threshold",
      std::string("Report selection thresholds against kept fraction as "
                  "CSV.\nInput: ") +
          kCorpusFmt +
          " Output: CSV 'threshold,fraction' (sweep) or "
          "'threshold,fraction,within_tol' (targeted search).");
  c->fallthrough();
  c->add_option("--in", o->in, "corpus to score, or - for stdin")
      ->capture_default_str();
  c->add_option("--out", o->out, "CSV output, or - for stdout")
      ->capture_default_str();
  c->add_option("--in-lm", o->in_lm, "in-domain ARPA model")->required();
  c->add_option("--gen-lm", o->gen_lm, "general-domain ARPA model")
      ->required();
  c->add_option("--buffer", o->buffer, "sentences per scoring window")
      ->capture_default_str();
  c->add_option("--target", o->fraction,
                "search for the threshold keeping this fraction (omit for a "
                "full sweep)");
  c->add_option("--tol", o->tol, "fraction tolerance for the search")
      ->capture_default_str();
  c->callback([&g, o] { run_filter_threshold(*o, g); });
}

void setup_rnn_train(CLI::App& app, const Global& g) {
  auto o = std::make_shared<RnnTrainOpts>();
  auto* c = app.add_subcommand(
      "rnn-train",
      std::string("Train a bias-free recurrent language model with "
                  "noise-contrastive estimation or an exact softmax.\n"
                  "Inputs: ") +
          kIdsFmt + " " + kModelFmt +
          "\nTraining reads the corpus as offset parallel streams; the "
          "learning rate halves after a non-improving epoch and training "
          "stops after two.");
  c->fallthrough();
  c->add_option("--train", o->train, "training id stream")->required();
  c->add_option("--valid", o->valid, "validation id stream")->required();
  c->add_option("--vocab", o->vocab, "vocabulary file")->required();
  c->add_option("--out", o->out, "trained model output")->required();
  c->add_option("--checkpoint", o->checkpoint,
                "also write a resumable trainer checkpoint here");
  c->add_option("--resume", o->resume,
                "resume from a checkpoint written by an identical "
                "configuration (only --max-epochs may differ)");
  c->add_option("--log", o->log, "write per-epoch CSV here");
  c->add_option("--nstate", o->nstate, "hidden units H")
      ->capture_default_str();
  c->add_option("--nproj", o->nproj,
                "bottleneck width P (0 = standard model; >0 trains the "
                "tied-embedding bottleneck model)")
      ->capture_default_str();
  c->add_option("--noffset", o->noffset, "offset stream groups per round")
      ->capture_default_str();
  c->add_option("--minibatch", o->minibatch, "parallel streams per group")
      ->capture_default_str();
  c->add_option("--unroll", o->unroll, "truncated backpropagation length")
      ->capture_default_str();
  c->add_option("--eta", o->eta, "initial learning rate")
      ->capture_default_str();
  c->add_option("--rho", o->rho, "rmsprop accumulator decay")
      ->capture_default_str();
  c->add_option("--eps", o->eps, "rmsprop damping")->capture_default_str();
  c->add_option("--clip", o->clip, "elementwise gradient clip")
      ->capture_default_str();
  c->add_option("--mode", o->mode, "loss: nce or softmax")
      ->capture_default_str()
      ->check(CLI::IsMember({"nce", "softmax"}));
  c->add_option("--nce-k", o->nce_k, "noise samples per position")
      ->capture_default_str();
  c->add_option("--noise-floor", o->noise_floor,
                "minimum unigram noise probability before renormalization")
      ->capture_default_str();
  c->add_option("--max-epochs", o->max_epochs, "epoch cap")
      ->capture_default_str();
  c->add_option("--act", o->act, "activation: sigmoid or tanh")
      ->capture_default_str()
      ->check(CLI::IsMember({"sigmoid", "tanh"}));
  c->add_option("--divergence-factor", o->divergence_factor,
                "abort if validation perplexity exceeds this multiple of "
                "the initial value")
      ->capture_default_str();
  c->add_option("--valid-limit", o->valid_limit,
                "cap validation to this many tokens (0 = all)")
      ->capture_default_str();
  c->add_option("--valid-shards", o->valid_shards,
                "validation slices evaluated with fresh state")
      ->capture_default_str();
  c->add_option("--init-range", o->init_range,
                "uniform initialization half-width")
      ->capture_default_str();
  c->callback([&g, o] { run_rnn_train(*o, g); });
}

void setup_rnn_ppl(CLI::App& app, const Global& g) {
  auto o = std::make_shared<RnnPplOpts>();
  auto* c = app.add_subcommand(
      "rnn-ppl",
      std::string("Exact-softmax perplexity of text under a recurrent "
                  "model; prints one number.\n") +
          kModelFmt + " --text is raw text (normalized first); --ids is " +
          kIdsFmt);
  c->fallthrough();
  c->add_option("--model", o->model, "model file")->required();
  auto* t = c->add_option("--text", o->text, "raw text to score");
  auto* i = c->add_option("--ids", o->ids, "pre-encoded id stream to score");
  t->excludes(i);
  i->excludes(t);
  c->add_option("--shards", o->shards,
                "evaluate this many stream slices with fresh hidden state "
                "(parallel with --threads; 1 = single exact pass)")
      ->capture_default_str();
  c->callback([&g, o] {
    if (o->text.empty() && o->ids.empty())
      throw CLI::RequiredError("--text or --ids");
    run_rnn_ppl(*o, g);
  });
}

void setup_interp_ppl(CLI::App& app, const Global& g) {
  auto o = std::make_shared<InterpOpts>();
  auto* c = app.add_subcommand(
      "interp-ppl",
      std::string("Perplexity of the sentence-level mixture lambda*rnn + "
                  "(1-lambda)*ngram; prints one number.\n") +
          kModelFmt +
          " The evaluation stream is encoded under the n-gram vocabulary; "
          "words outside the recurrent model's vocabulary fall back to its "
          "unk mass, renormalized exactly.");
  c->fallthrough();
  c->add_option("--model", o->model, "recurrent model file")->required();
  c->add_option("--arpa", o->arpa, "ARPA n-gram model")->required();
  auto* t = c->add_option("--text", o->text, "raw text to score");
  auto* i = c->add_option("--ids", o->ids,
                          "pre-encoded id stream (under the n-gram "
                          "vocabulary) to score");
  t->excludes(i);
  i->excludes(t);
  c->add_option("--lambda", o->lambda, "mixture weight on the recurrent "
                                       "model")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  auto* tt = c->add_option("--tune-text", o->tune_text,
                           "tune lambda on this raw text first");
  auto* ti = c->add_option("--tune-ids", o->tune_ids,
                           "tune lambda on this id stream first");
  tt->excludes(ti);
  ti->excludes(tt);
  c->callback([&g, o] {
    if (o->text.empty() && o->ids.empty())
      throw CLI::RequiredError("--text or --ids");
    run_interp_ppl(*o, g);
  });
}

void setup_hit_rate(CLI::App& app, const Global& g) {
  auto o = std::make_shared<HitRateOpts>();
  auto* c = app.add_subcommand(
      "hit-rate",
      std::string("Fraction of positions (in percent) where the target "
                  "word lands in the top-k after reranking an n-gram "
                  "shortlist.\n") +
          kIdsFmt + " " + kModelFmt);
  c->fallthrough();
  c->add_option("--ids", o->ids, "evaluation id stream")->required();
  c->add_option("--shortlist-arpa", o->shortlist_arpa,
                "ARPA model (typically pruned) that proposes the shortlist")
      ->required();
  c->add_option("--scorer", o->scorer, "reranker: rnn or ngram")
      ->capture_default_str()
      ->check(CLI::IsMember({"rnn", "ngram"}));
  c->add_option("--model", o->model,
                "recurrent model file (required with --scorer rnn)");
  c->add_option("--arpa", o->arpa,
                "score with this ARPA model instead of the shortlist model "
                "(--scorer ngram)");
  c->add_option("--shortlist", o->shortlist, "shortlist size")
      ->capture_default_str();
  c->add_option("--top", o->top, "top-k counted as a hit")
      ->capture_default_str();
  c->callback([&g, o] { run_hit_rate(*o, g); });
}

void setup_rescore(CLI::App& app, const Global& g) {
  auto o = std::make_shared<RescoreOpts>();
  auto* c = app.add_subcommand(
      "rescore",
      std::string("Rescore n-best hypothesis lists with a recurrent model, "
                  "optionally interpolated with an n-gram model.\n") +
          "N-best lines: 'utt<TAB>acoustic<TAB>old-lm<TAB>w1 w2 ...'; "
          "consecutive lines with one utt id form an utterance. Output "
          "appends new-lm, new-total, and rank columns, best hypothesis "
          "first. " +
          kModelFmt);
  c->fallthrough();
  c->add_option("--nbest", o->nbest, "n-best list, or - for stdin")
      ->required();
  c->add_option("--model", o->model, "recurrent model file")->required();
  c->add_option("--arpa", o->arpa, "optional ARPA model to interpolate");
  c->add_option("--out", o->out, "rescored list, or - for stdout")
      ->capture_default_str();
  c->add_option("--lambda", o->lambda,
                "mixture weight on the recurrent model (with --arpa)")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  c->add_option("--lm-scale", o->lm_scale, "language-model scale")
      ->capture_default_str();
  c->add_option("--wip", o->wip, "per-word insertion bonus")
      ->capture_default_str();
  c->add_flag("--fast", o->fast,
              "treat raw recurrent scores as normalized (skips the "
              "softmax; relies on self-normalized training)");
  c->callback([&g, o] { run_rescore(*o, g); });
}

void setup_compress(CLI::App& app, const Global& g) {
  auto o = std::make_shared<CompressOpts>();
  auto* c = app.add_subcommand(
      "compress",
      "Quantize a bottleneck model ('RNBL') to fixed-point codes and write "
      "a compact 'RNQZ' file; prints its size in bytes.\nEach matrix is "
      "quantized linearly over its own [min, max] range; codes are packed "
      "contiguously, least significant bit first.");
  c->fallthrough();
  c->add_option("--model", o->model, "bottleneck model file")->required();
  c->add_option("--out", o->out, "quantized model, or - for stdout")
      ->capture_default_str();
  c->add_option("--bits", o->bits, "code width in bits")
      ->capture_default_str()
      ->check(CLI::Range(1, 16));
  c->callback([&g, o] { run_compress(*o, g); });
}

void setup_quantize_sweep(CLI::App& app, const Global& g) {
  auto o = std::make_shared<SweepOpts>();
  auto* c = app.add_subcommand(
      "quantize-sweep",
      "Quantize a bottleneck model at several bit widths and report CSV "
      "'bits,bytes'; with --ids and --shortlist-arpa, also the shortlist "
      "hit rate (percent) after dequantization.");
  c->fallthrough();
  c->add_option("--model", o->model, "bottleneck model file")->required();
  c->add_option("--out", o->out, "CSV output, or - for stdout")
      ->capture_default_str();
  c->add_option("--bits", o->bits, "bit widths to evaluate")
      ->delimiter(',')
      ->capture_default_str();
  c->add_option("--ids", o->ids, "evaluation id stream for hit rate");
  c->add_option("--shortlist-arpa", o->shortlist_arpa,
                "ARPA model proposing the shortlist");
  c->add_option("--shortlist", o->shortlist, "shortlist size")
      ->capture_default_str();
  c->add_option("--top", o->top, "top-k counted as a hit")
      ->capture_default_str();
  c->callback([&g, o] { run_quantize_sweep(*o, g); });
}

void setup_fit_curve(CLI::App& app, const Global& g) {
  auto o = std::make_shared<FitOpts>();
  auto* c = app.add_subcommand(
      "fit-curve",
      "Fit ppl(w) = a*exp(b*w^-c) to CSV points 'words,ppl' (header "
      "optional) and print the coefficients, the asymptote a, the residual "
      "RMS, and the predicted relative perplexity drop from 1e12 to 1e13 "
      "words.");
  c->fallthrough();
  c->add_option("csv", o->csv, "CSV file of points, or - for stdin")
      ->required();
  c->callback([&g, o] { run_fit_curve(*o, g); });
}

}  // namespace

int main(int argc, char** argv) {
  std::ios::sync_with_stdio(false);
  CLI::App app{
      "desklm: corpus preparation, Kneser-Ney and recurrent language "
      "models, data selection, evaluation, and compression.\nEvery "
      "successful run writes desklm-manifest-<subcommand>.json into "
      "--outdir with the resolved configuration and checksums of all "
      "inputs and outputs."};
  app.require_subcommand(1);
  Global g;
  app.add_option("--seed", g.seed, "seed for all randomized steps")
      ->capture_default_str();
  app.add_option("--threads", g.threads,
                 "worker threads (results do not depend on this)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_option("--outdir", g.outdir, "directory for run manifests")
      ->capture_default_str();
  app.add_flag("--quiet", g.quiet, "suppress progress notes on stderr");

  setup_normalize(app, g);
  setup_gen(app, g);
  setup_dedup(app, g);
  setup_vocab(app, g);
  setup_encode(app, g);
  setup_ngram_train(app, g);
  setup_ngram_ppl(app, g);
  setup_filter(app, g);
  setup_filter_threshold(app, g);
  setup_rnn_train(app, g);
  setup_rnn_ppl(app, g);
  setup_interp_ppl(app, g);
  setup_hit_rate(app, g);
  setup_rescore(app, g);
  setup_compress(app, g);
  setup_quantize_sweep(app, g);
  setup_fit_curve(app, g);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const desklm::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
