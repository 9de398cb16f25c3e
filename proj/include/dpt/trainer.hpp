#pragma once

// Training loop, evaluation and the experiment drivers behind the CLI.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpt/checkpoint.hpp"
#include "dpt/config.hpp"
#include "dpt/data.hpp"
#include "dpt/decode.hpp"
#include "dpt/model.hpp"
#include "dpt/optim.hpp"
#include "dpt/rouge.hpp"
#include "dpt/spectrum.hpp"

namespace dpt {

// Shortest round-trip decimal form; keeps CSV output byte-stable.
inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  return detail::format_double(v);
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// ---------------------------------------------------------------- data

// Held-out splits never repeat a training example; synthetic duplicates are
// redrawn from a continuation of the split's generator.
inline DataSplits make_synthetic_splits(const SyntheticTaskSpec& spec, std::size_t n_train, std::size_t n_val,
                                        std::size_t n_test) {
  DataSplits s;
  SyntheticTaskSpec train_spec = spec;
  s.train = generate_synthetic(train_spec, n_train);
  std::set<std::vector<int>> seen;
  for (const auto& ex : s.train) seen.insert(ex.source);
  auto held_out = [&](std::uint64_t salt, std::size_t n) {
    SyntheticTaskSpec sp = spec;
    sp.seed = CounterRng::mix(spec.seed ^ salt);
    Corpus out;
    while (out.size() < n) {
      for (auto& ex : generate_synthetic(sp, n)) {
        if (out.size() == n) break;
        if (seen.insert(ex.source).second) out.push_back(std::move(ex));
      }
      sp.seed = CounterRng::mix(sp.seed);
    }
    return out;
  };
  s.validation = held_out(0x7661ULL, n_val);
  s.test = held_out(0x7465ULL, n_test);
  return s;
}

inline DataSplits load_splits(const TrainConfig& cfg, Vocab& vocab) {
  if (cfg.data == DataSource::Synthetic) {
    vocab = synthetic_vocab(cfg.synth);
    return make_synthetic_splits(cfg.synth, static_cast<std::size_t>(cfg.n_train), static_cast<std::size_t>(cfg.n_val),
                                 static_cast<std::size_t>(cfg.n_test));
  }
  vocab = Vocab();
  DataSplits s;
  s.train = load_jsonl(cfg.train_path, vocab, true);
  s.validation = load_jsonl(cfg.val_path, vocab, false);
  s.test = load_jsonl(cfg.test_path, vocab, false);
  if (s.train.empty() || s.validation.empty() || s.test.empty()) throw InputError("every data split needs examples");
  return s;
}

struct Batch {
  std::vector<SequencePair> pairs;
  std::vector<int> labels;
  std::size_t tokens() const { return labels.size(); }
};

inline SequencePair to_pair(const Example& ex) {
  SequencePair p{ex.source, ex.segment_starts, {kBos}};
  p.decoder_input.insert(p.decoder_input.end(), ex.target.begin(), ex.target.end());
  return p;
}

inline Batch make_batch(const Corpus& corpus, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end) {
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    const auto& ex = corpus[order[i]];
    b.pairs.push_back(to_pair(ex));
    b.labels.insert(b.labels.end(), ex.target.begin(), ex.target.end());
    b.labels.push_back(kEos);
  }
  return b;
}

// Decoder positions are split into segments over this length.
inline std::size_t decoder_reference_length(const Corpus& train) {
  std::size_t n = 1;
  for (const auto& ex : train) n = std::max(n, ex.target.size() + 1);
  return n;
}

inline AttentionPlan make_plan(const TrainConfig& cfg, const Corpus& train) {
  return {cfg.design, cfg.block_spec(), cfg.sparsity(), decoder_reference_length(train)};
}

// ---------------------------------------------------------------- training

inline double train_step(Seq2SeqTransformer& model, Adam& optimizer, const Batch& batch, const AttentionPlan& plan,
                         const ForwardContext& ctx) {
  optimizer.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sequence_loss(model, batch.pairs, batch.labels, plan, ctx);
  const double value = loss.item();
  if (!std::isfinite(value)) throw DivergenceError(static_cast<long>(ctx.step), "loss is " + fmt(value));
  tape.backward(loss);
  optimizer.step();
  return value;
}

// Token-averaged teacher-forced cross-entropy, noise-free.
inline double corpus_loss(const Seq2SeqTransformer& model, const Corpus& corpus, const AttentionPlan& plan,
                          std::size_t batch_size = 32) {
  if (corpus.empty()) throw InputError("loss over an empty corpus");
  NoGradScope no_grad;
  ForwardContext ctx;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t b = 0; b < corpus.size(); b += batch_size) {
    const Batch batch = make_batch(corpus, order, b, std::min(corpus.size(), b + batch_size));
    total += sequence_loss(model, batch.pairs, batch.labels, plan, ctx).item() * static_cast<double>(batch.tokens());
    tokens += batch.tokens();
  }
  return total / static_cast<double>(tokens);
}

struct EvalResult {
  std::vector<std::string> candidates, references;
  RougeSummary rouge;
};

inline EvalResult score_texts(std::vector<std::string> candidates, std::vector<std::string> references) {
  if (candidates.size() != references.size()) throw DimensionError("candidate and reference counts differ");
  EvalResult r;
  std::vector<RougeScore> scores;
  for (std::size_t i = 0; i < candidates.size(); ++i) scores.push_back(rouge(candidates[i], references[i]));
  r.candidates = std::move(candidates);
  r.references = std::move(references);
  r.rouge = summarize(std::move(scores));
  return r;
}

inline EvalResult evaluate(const Seq2SeqTransformer& model, const Corpus& corpus, const Vocab& vocab,
                           const AttentionPlan& plan, std::size_t beam, std::size_t max_len) {
  std::vector<std::string> cands, refs;
  for (const auto& ex : corpus) {
    const SequencePair src{ex.source, ex.segment_starts, {}};
    cands.push_back(vocab.decode(decode_sequence(model, src, plan, beam, max_len).output()));
    refs.push_back(vocab.decode(ex.target));
  }
  return score_texts(std::move(cands), std::move(refs));
}

inline void write_eval_csv(const std::string& path, const EvalResult& r) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "index,rouge1_f1,rouge2_f1,rougeL_f1,candidate,reference\n";
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& s = r.rouge.per_example[i];
    os << i << ',' << fmt(s.rouge1.f1) << ',' << fmt(s.rouge2.f1) << ',' << fmt(s.rougeL.f1) << ','
       << csv_quote(r.candidates[i]) << ',' << csv_quote(r.references[i]) << '\n';
  }
  os << "mean," << fmt(r.rouge.mean_r1) << ',' << fmt(r.rouge.mean_r2) << ',' << fmt(r.rouge.mean_rl) << ",,\n";
}

struct EpochStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_rouge_l = std::numeric_limits<double>::quiet_NaN();
};

struct TrainOutcome {
  std::vector<EpochStat> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t backbone_params = 0;
  std::size_t prefix_params = 0;
  std::size_t trainable_params = 0;
  double backbone_max_delta = 0.0;
  std::size_t backbone_changed = 0;
  long steps = 0;
  double wall_seconds = 0.0;
};

struct TrainOptions {
  std::ostream* log = nullptr;
};

inline Seq2SeqTransformer build_model(const TrainConfig& cfg, std::size_t vocab_size, std::uint64_t seed,
                                      const std::vector<Parameter>* backbone) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab_size);
  Seq2SeqTransformer model(mc, cfg.prefix_config(), seed);
  if (backbone != nullptr) assign_parameters(model, *backbone, true);
  model.set_train_mode(cfg.mode);
  return model;
}

// Trains `model` in place and leaves it holding the best-validation weights.
inline TrainOutcome train_model(Seq2SeqTransformer& model, const TrainConfig& cfg, const DataSplits& data,
                                const Vocab& vocab, const AttentionPlan& plan, std::uint64_t seed,
                                const TrainOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  model.check_plan(plan);
  model.set_train_mode(cfg.mode);
  TrainOutcome out;
  out.backbone_params = model.count(ParamRole::Backbone);
  out.prefix_params = model.count(ParamRole::Prefix);
  std::vector<Tensor> trainable = model.trainable();
  for (const auto& t : trainable) out.trainable_params += t.numel();
  std::vector<std::vector<double>> backbone_before;
  for (const auto& p : model.parameters())
    if (p.role == ParamRole::Backbone) backbone_before.push_back(p.value.values());

  const bool by_rouge = cfg.select_by == "rouge";
  const auto max_len = static_cast<std::size_t>(cfg.max_decode_len);
  auto validate = [&](EpochStat& st) {
    st.val_loss = corpus_loss(model, data.validation, plan);
    if (by_rouge) st.val_rouge_l = evaluate(model, data.validation, vocab, plan, 1, max_len).rouge.mean_rl;
  };
  auto better = [&](const EpochStat& a, const EpochStat& best) {
    return by_rouge ? a.val_rouge_l > best.val_rouge_l : a.val_loss < best.val_loss;
  };

  EpochStat initial;
  initial.train_loss = corpus_loss(model, data.train, plan);
  validate(initial);
  out.epochs.push_back(initial);
  EpochStat best = initial;
  std::vector<std::vector<double>> best_values;
  for (const auto& t : trainable) best_values.push_back(t.values());

  Adam optimizer(trainable, AdamConfig{cfg.lr});
  std::mt19937_64 shuffle_rng(CounterRng::mix(seed ^ 0x5u));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const Batch batch = make_batch(data.train, order, b, std::min(order.size(), b + bs));
      ForwardContext ctx{Phase::Train, seed, static_cast<std::uint64_t>(out.steps), nullptr, false};
      total += train_step(model, optimizer, batch, plan, ctx) * static_cast<double>(batch.tokens());
      tokens += batch.tokens();
      ++out.steps;
    }
    EpochStat st;
    st.epoch = epoch;
    st.train_loss = total / static_cast<double>(tokens);
    validate(st);
    out.epochs.push_back(st);
    if (better(st, best)) {
      best = st;
      for (std::size_t i = 0; i < trainable.size(); ++i) best_values[i] = trainable[i].values();
    }
    if (opts.log != nullptr)
      *opts.log << "  epoch " << epoch << " train_loss " << fmt(st.train_loss) << " val_loss " << fmt(st.val_loss)
                << (by_rouge ? " val_rougeL " + fmt(st.val_rouge_l) : "") << '\n';
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i].values() = best_values[i];
  out.best_epoch = best.epoch;
  out.best_val_loss = best.val_loss;

  std::size_t bi = 0;
  for (const auto& p : model.parameters()) {
    if (p.role != ParamRole::Backbone) continue;
    const auto& before = backbone_before[bi++];
    for (std::size_t j = 0; j < before.size(); ++j) {
      const double d = std::abs(p.value[j] - before[j]);
      out.backbone_max_delta = std::max(out.backbone_max_delta, d);
      if (p.value[j] != before[j]) ++out.backbone_changed;
    }
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// Backbone pretraining on a corpus with its own targets: all parameters
// trained, no prefixes, dense attention.
inline std::vector<Parameter> pretrain_backbone(const TrainConfig& cfg, const Corpus& corpus, const Vocab& vocab,
                                                const TrainOptions& opts = {}) {
  if (corpus.size() < 2) throw InputError("pretraining needs at least two examples");
  TrainConfig pc = cfg;
  pc.mode = TrainMode::Finetune;
  pc.design = AttentionDesign::Dense;
  pc.lr = cfg.pretrain_lr;
  pc.epochs = cfg.pretrain_epochs;
  pc.select_by = "val_loss";
  DataSplits d;
  const std::size_t n_val = std::max<std::size_t>(1, corpus.size() / 10);
  d.train = Corpus(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(n_val));
  d.validation = Corpus(corpus.end() - static_cast<std::ptrdiff_t>(n_val), corpus.end());
  Seq2SeqTransformer model = build_model(pc, vocab.size(), cfg.pretrain_seed, nullptr);
  if (opts.log != nullptr) *opts.log << "pretraining backbone for " << pc.epochs << " epochs on " << corpus.size() << " examples\n";
  train_model(model, pc, d, vocab, make_plan(pc, d.train), cfg.pretrain_seed, opts);
  std::vector<Parameter> out;
  for (const auto& p : model.parameters())
    if (p.role == ParamRole::Backbone) out.push_back(p);
  return out;
}

// Backbone to start every run from: a checkpoint, a freshly pretrained
// backbone, or none (random initialization). Synthetic runs pretrain on the
// cued multi-task corpus; file corpora pretrain on source reconstruction.
inline std::optional<std::vector<Parameter>> initial_backbone(const TrainConfig& cfg, const Vocab& vocab,
                                                              const TrainOptions& opts = {}) {
  if (!cfg.init_checkpoint.empty()) {
    Checkpoint ck = read_checkpoint(cfg.init_checkpoint);
    if (!(ck.vocab == vocab)) throw InputError("init checkpoint vocabulary differs from the corpus vocabulary");
    std::vector<Parameter> out;
    for (auto& p : ck.tensors)
      if (p.role == ParamRole::Backbone) out.push_back(std::move(p));
    return out;
  }
  if (cfg.pretrain_epochs <= 0) return std::nullopt;
  Corpus corpus;
  if (cfg.data == DataSource::Synthetic) {
    corpus = pretraining_corpus(cfg.synth, static_cast<std::size_t>(cfg.n_train),
                                CounterRng::mix(cfg.synth.seed ^ cfg.pretrain_seed ^ 0x7072ULL));
  } else {
    Vocab v = vocab;
    corpus = load_jsonl(cfg.train_path, v, false);
    for (auto& ex : corpus) {
      ex.target.clear();
      for (int t : ex.source)
        if (t != kSeg) ex.target.push_back(t);
    }
  }
  return pretrain_backbone(cfg, corpus, vocab, opts);
}

// ---------------------------------------------------------------- reports

struct SeedResult {
  std::uint64_t seed = 0;
  TrainOutcome train;
  EvalResult test;
};

struct ExperimentReport {
  TrainConfig config;
  std::vector<SeedResult> runs;
  double mean_r1 = 0.0, mean_r2 = 0.0, mean_rl = 0.0;
  double wall_seconds = 0.0;
};

inline void write_report_csv(const std::string& path, const ExperimentReport& rep) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "seed,mode,design,best_epoch,best_val_loss,test_rouge1,test_rouge2,test_rougeL,trainable_params,"
        "backbone_params,prefix_params,backbone_max_delta\n";
  for (const auto& r : rep.runs)
    os << r.seed << ',' << to_string(rep.config.mode) << ',' << to_string(rep.config.design) << ',' << r.train.best_epoch
       << ',' << fmt(r.train.best_val_loss) << ',' << fmt(r.test.rouge.mean_r1) << ',' << fmt(r.test.rouge.mean_r2)
       << ',' << fmt(r.test.rouge.mean_rl) << ',' << r.train.trainable_params << ',' << r.train.backbone_params << ','
       << r.train.prefix_params << ',' << fmt(r.train.backbone_max_delta) << '\n';
  os << "mean," << to_string(rep.config.mode) << ',' << to_string(rep.config.design) << ",,," << fmt(rep.mean_r1) << ','
     << fmt(rep.mean_r2) << ',' << fmt(rep.mean_rl) << ",,,,\n";
}

inline void write_epochs_csv(const std::string& path, const ExperimentReport& rep) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os << "seed,epoch,train_loss,val_loss,val_rougeL\n";
  for (const auto& r : rep.runs)
    for (const auto& e : r.train.epochs)
      os << r.seed << ',' << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << ',' << fmt(e.val_rouge_l)
         << '\n';
}

inline std::string summary_text(const ExperimentReport& rep) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "mode " << to_string(rep.config.mode) << ", design " << to_string(rep.config.design) << '\n';
  for (const auto& r : rep.runs)
    os << "  seed " << r.seed << ": best epoch " << r.train.best_epoch << ", val loss " << r.train.best_val_loss
       << ", test ROUGE-1/2/L " << r.test.rouge.mean_r1 << " / " << r.test.rouge.mean_r2 << " / " << r.test.rouge.mean_rl
       << ", trainable " << r.train.trainable_params << " (backbone " << r.train.backbone_params << ", prefix "
       << r.train.prefix_params << "), backbone max delta " << r.train.backbone_max_delta << ", "
       << std::setprecision(1) << r.train.wall_seconds << " s\n"
       << std::setprecision(4);
  os << "  mean ROUGE-1/2/L " << rep.mean_r1 << " / " << rep.mean_r2 << " / " << rep.mean_rl << '\n';
  os << "  wall clock " << std::setprecision(1) << rep.wall_seconds << " s\n";
  return os.str();
}

struct ExperimentOptions {
  std::string out_dir;  // empty: no files written
  std::ostream* log = nullptr;
  bool save_checkpoints = true;
};

inline ExperimentReport run_experiment(const TrainConfig& cfg_in, const DataSplits& data, const Vocab& vocab,
                                       const std::optional<std::vector<Parameter>>& backbone,
                                       const ExperimentOptions& opts = {}) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  cfg.model.vocab_size = static_cast<int>(vocab.size());
  cfg.validate();
  ExperimentReport rep;
  rep.config = cfg;
  const AttentionPlan plan = make_plan(cfg, data.train);
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    std::ofstream(fs::path(opts.out_dir) / "config.ini") << cfg.to_ini();
  }
  for (auto seed : cfg.seeds) {
    if (opts.log != nullptr) *opts.log << to_string(cfg.mode) << '/' << to_string(cfg.design) << " seed " << seed << '\n';
    Seq2SeqTransformer model = build_model(cfg, vocab.size(), seed, backbone ? &*backbone : nullptr);
    SeedResult r;
    r.seed = seed;
    r.train = train_model(model, cfg, data, vocab, plan, seed, {opts.log});
    r.test = evaluate(model, data.test, vocab, plan, static_cast<std::size_t>(cfg.beam),
                      static_cast<std::size_t>(cfg.max_decode_len));
    if (!opts.out_dir.empty()) {
      write_eval_csv((fs::path(opts.out_dir) / ("test_seed" + std::to_string(seed) + ".csv")).string(), r.test);
      if (opts.save_checkpoints)
        save_checkpoint((fs::path(opts.out_dir) / ("ckpt_seed" + std::to_string(seed))).string(), model, cfg.mode, plan,
                        vocab);
    }
    rep.runs.push_back(std::move(r));
  }
  for (const auto& r : rep.runs) {
    rep.mean_r1 += r.test.rouge.mean_r1;
    rep.mean_r2 += r.test.rouge.mean_r2;
    rep.mean_rl += r.test.rouge.mean_rl;
  }
  const double n = static_cast<double>(rep.runs.size());
  rep.mean_r1 /= n;
  rep.mean_r2 /= n;
  rep.mean_rl /= n;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!opts.out_dir.empty()) {
    write_report_csv((fs::path(opts.out_dir) / "report.csv").string(), rep);
    write_epochs_csv((fs::path(opts.out_dir) / "epochs.csv").string(), rep);
    std::ofstream(fs::path(opts.out_dir) / "summary.txt") << summary_text(rep);
  }
  return rep;
}

// ---------------------------------------------------------------- low resource

struct LowResourceRow {
  double k = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  double best_val_loss = 0.0;
  double r1 = 0.0, r2 = 0.0, rl = 0.0;
};

struct LowResourceReport {
  std::vector<LowResourceRow> rows;
  std::vector<double> ks;
  std::vector<double> mean_rl, mean_val_loss;
};

inline std::uint64_t subsample_seed(std::uint64_t seed, double k) {
  return CounterRng::keyed({seed, static_cast<std::uint64_t>(std::llround(k * 1000.0))}).key();
}

inline LowResourceReport run_lowresource(const TrainConfig& cfg_in, const DataSplits& data, const Vocab& vocab,
                                         const std::vector<double>& ks,
                                         const std::optional<std::vector<Parameter>>& backbone,
                                         const ExperimentOptions& opts = {}) {
  namespace fs = std::filesystem;
  if (ks.empty()) throw ConfigError("low-resource sweep needs at least one k");
  TrainConfig cfg = cfg_in;
  cfg.model.vocab_size = static_cast<int>(vocab.size());
  cfg.validate();
  LowResourceReport rep;
  rep.ks = ks;
  // The plan comes from the full training split so every k shares it.
  const AttentionPlan plan = make_plan(cfg, data.train);
  for (double k : ks) {
    double sum_rl = 0.0, sum_loss = 0.0;
    for (auto seed : cfg.seeds) {
      DataSplits sub{subsample(data.train, k, subsample_seed(seed, k)), data.validation, data.test};
      if (opts.log != nullptr) *opts.log << "k=" << k << "% seed " << seed << ": " << sub.train.size() << " examples\n";
      Seq2SeqTransformer model = build_model(cfg, vocab.size(), seed, backbone ? &*backbone : nullptr);
      const TrainOutcome t = train_model(model, cfg, sub, vocab, plan, seed, {opts.log});
      const EvalResult e = evaluate(model, data.test, vocab, plan, static_cast<std::size_t>(cfg.beam),
                                    static_cast<std::size_t>(cfg.max_decode_len));
      rep.rows.push_back({k, seed, sub.train.size(), t.best_val_loss, e.rouge.mean_r1, e.rouge.mean_r2, e.rouge.mean_rl});
      sum_rl += e.rouge.mean_rl;
      sum_loss += t.best_val_loss;
    }
    rep.mean_rl.push_back(sum_rl / static_cast<double>(cfg.seeds.size()));
    rep.mean_val_loss.push_back(sum_loss / static_cast<double>(cfg.seeds.size()));
  }
  if (!opts.out_dir.empty()) {
    fs::create_directories(opts.out_dir);
    std::ofstream(fs::path(opts.out_dir) / "config.ini") << cfg.to_ini();
    std::ofstream sweep(fs::path(opts.out_dir) / "lowres.csv");
    sweep << "k,seed,n_train,best_val_loss,test_rouge1,test_rouge2,test_rougeL\n";
    for (const auto& r : rep.rows)
      sweep << fmt(r.k) << ',' << r.seed << ',' << r.n_train << ',' << fmt(r.best_val_loss) << ',' << fmt(r.r1) << ','
            << fmt(r.r2) << ',' << fmt(r.rl) << '\n';
    std::ofstream curve(fs::path(opts.out_dir) / "lowres_curve.csv");
    curve << "k,mean_test_rougeL,mean_best_val_loss\n";
    for (std::size_t i = 0; i < ks.size(); ++i)
      curve << fmt(ks[i]) << ',' << fmt(rep.mean_rl[i]) << ',' << fmt(rep.mean_val_loss[i]) << '\n';
  }
  return rep;
}

// ---------------------------------------------------------------- diagnostics

// Head-averaged encoder attention [T, P+T] per layer for one example.
inline std::vector<Tensor> encoder_attention_maps(const Seq2SeqTransformer& model, const Example& ex,
                                                  const AttentionPlan& plan, std::vector<AttentionMask>* masks = nullptr) {
  NoGradScope no_grad;
  ForwardContext ctx;
  ctx.keep_attention = true;
  AttentionTrace trace;
  model.encode({SequencePair{ex.source, ex.segment_starts, {}}}, plan, ctx, &trace);
  const int n = model.config().n_layers_enc;
  std::vector<Tensor> maps;
  for (int l = 1; l <= n; ++l) {
    Tensor avg;
    int heads = 0;
    for (const auto& rec : trace.records) {
      if (rec.side != StackSide::Encoder || rec.layer != l) continue;
      if (!avg.defined()) avg = Tensor(rec.probs.shape());
      for (std::size_t i = 0; i < avg.numel(); ++i) avg[i] += rec.probs[i];
      ++heads;
    }
    for (double& v : avg.data()) v /= heads;
    maps.push_back(avg);
  }
  if (masks != nullptr) {
    masks->clear();
    for (const auto& m : trace.masks)
      if (m.queries == ex.source.size() && m.inputs == ex.source.size() && masks->size() < static_cast<std::size_t>(n))
        masks->push_back(m);
  }
  return maps;
}

inline void write_matrix_csv(const std::string& path, const std::vector<double>& cells, std::size_t rows, std::size_t cols) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) os << (c ? "," : "") << fmt(cells[r * cols + c]);
    os << '\n';
  }
}

inline SpectrumReport run_spectrum(const Checkpoint& ck, const Corpus& corpus, const SpectrumOptions& sopts,
                                   const std::string& out_dir) {
  namespace fs = std::filesystem;
  Seq2SeqTransformer model = load_model(ck);
  SpectrumReport rep = band_spectrum(model, corpus, ck.plan, sopts);
  fs::create_directories(out_dir);
  write_spectrum_csv((fs::path(out_dir) / "spectrum.csv").string(), rep);
  // Heatmaps of the first example, one image per encoder layer.
  const auto maps = encoder_attention_maps(model, corpus.front(), ck.plan);
  for (std::size_t l = 0; l < maps.size(); ++l)
    write_heatmap_ppm((fs::path(out_dir) / ("attn_layer" + std::to_string(l + 1) + ".ppm")).string(), maps[l]);
  return rep;
}

inline void run_attn_dump(const Checkpoint& ck, const Example& ex, const std::string& out_dir) {
  namespace fs = std::filesystem;
  Seq2SeqTransformer model = load_model(ck);
  std::vector<AttentionMask> masks;
  const auto maps = encoder_attention_maps(model, ex, ck.plan, &masks);
  fs::create_directories(out_dir);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const std::string tag = "layer" + std::to_string(l + 1);
    write_heatmap_ppm((fs::path(out_dir) / ("attn_" + tag + ".ppm")).string(), maps[l]);
    write_matrix_csv((fs::path(out_dir) / ("attn_" + tag + ".csv")).string(), maps[l].values(), maps[l].rows(),
                     maps[l].cols());
    if (l < masks.size())
      write_matrix_csv((fs::path(out_dir) / ("mask_" + tag + ".csv")).string(), masks[l].cells, masks[l].queries,
                       masks[l].cols());
  }
}

}  // namespace dpt
