// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero when a criterion fails that was not listed with --expect-fail.

#include <Eigen/Dense>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dpt/gradcheck.hpp"
#include "dpt/optim.hpp"
#include "dpt/trainer.hpp"

using namespace dpt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path workdir;
  std::ostream* log = nullptr;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<int> random_ids(std::size_t n, int vocab, std::mt19937_64& rng) {
  std::vector<int> ids(n);
  for (int& v : ids) v = kReservedTokens + static_cast<int>(rng() % static_cast<unsigned>(vocab - kReservedTokens));
  return ids;
}

// ------------------------------------------------------------ criterion 1

Outcome gradient_integrity(const Env&) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::string worst_name = "none";
  std::size_t checks = 0, entries = 0;
  auto check = [&](const std::string& name, const std::function<Tensor()>& fn, std::vector<Tensor> inputs,
                   GradCheckOptions opts = {}) {
    const auto r = gradcheck(fn, std::move(inputs), opts);
    ++checks;
    entries += r.checked;
    const double err = r.checked == 0 ? std::numeric_limits<double>::infinity() : r.max_rel_error;
    if (!(err <= worst)) {
      worst = err;
      worst_name = name;
    }
  };
  auto probe = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

  Tensor a = uniform({3, 4}, rng), b = uniform({3, 4}, rng), w34 = uniform({3, 4}, rng);
  check("add", [&] { return probe(add(a, b), w34); }, {a, b});
  check("sub", [&] { return probe(sub(a, b), w34); }, {a, b});
  check("mul", [&] { return probe(mul(a, b), w34); }, {a, b});
  check("scale", [&] { return probe(scale(a, -1.3), w34); }, {a});
  check("sum", [&] { return sum(a); }, {a});
  check("mean", [&] { return mean(mul(a, a)); }, {a});
  Tensor row = uniform({4}, rng);
  check("add_row", [&] { return probe(add_row(a, row), w34); }, {a, row});
  Tensor m45 = uniform({4, 5}, rng), m54 = uniform({5, 4}, rng), w35 = uniform({3, 5}, rng);
  check("matmul", [&] { return probe(matmul(a, m45), w35); }, {a, m45});
  check("matmul_nt", [&] { return probe(matmul_nt(a, m54), w35); }, {a, m54});
  Tensor w43 = uniform({4, 3}, rng), w26 = uniform({2, 6}, rng), w22 = uniform({2, 2}, rng);
  check("transpose", [&] { return probe(transpose(a), w43); }, {a});
  check("reshape", [&] { return probe(reshape(a, {2, 6}), w26); }, {a});
  check("slice", [&] { return probe(slice(a, 1, 2, 1, 2), w22); }, {a});
  Tensor c24 = uniform({2, 4}, rng), c32 = uniform({3, 2}, rng);
  Tensor w54 = uniform({5, 4}, rng), w36 = uniform({3, 6}, rng);
  check("concat_rows", [&] { return probe(concat_rows({a, c24}), w54); }, {a, c24});
  check("concat_cols", [&] { return probe(concat_cols({a, c32}), w36); }, {a, c32});
  Tensor x = uniform({4, 6}, rng), g = uniform({6}, rng), bias = uniform({6}, rng), w46 = uniform({4, 6}, rng);
  check("layer_norm", [&] { return probe(layer_norm(x, g, bias), w46); }, {x, g, bias});
  check("gelu", [&] { return probe(gelu(x), w46); }, {x});
  Tensor table = uniform({6, 4}, rng), w54b = uniform({5, 4}, rng);
  const std::vector<int> ids{0, 3, 3, 5, 1};
  check("embedding", [&] { return probe(embedding(table, ids), w54b); }, {table});
  Tensor logits = uniform({5, 6}, rng);
  const std::vector<int> targets{1, 0, 5, 2, 2};
  check("cross_entropy", [&] { return cross_entropy(logits, targets); }, {logits});
  Tensor sm_logits = uniform({4, 6}, rng), sm_mask({4, 6});
  std::bernoulli_distribution keep(0.6);
  for (std::size_t i = 0; i < 4; ++i) {
    sm_mask.at(i, i) = 1.0;
    for (std::size_t j = 0; j < 6; ++j)
      if (keep(rng)) sm_mask.at(i, j) = 1.0;
  }
  check("masked_softmax", [&] { return probe(masked_softmax(sm_logits, sm_mask), w46); }, {sm_logits});
  Tensor pos = uniform({3, 4}, rng, 0.1, 2.0);
  check("row_normalize", [&] { return probe(row_normalize(pos), w34); }, {pos});
  Tensor probs = uniform({3, 4}, rng, 0.05, 0.95), noise = uniform({3, 4}, rng);
  check("relaxed_bernoulli_gate", [&] { return probe(relaxed_bernoulli_gate(probs, noise, 0.7), w34); }, {probs});
  {
    const std::size_t heads = 2, d = 4, p = 3;
    std::vector<std::size_t> ql{2, 3}, kl{3, 2};
    Tensor q = uniform({5, d}, rng), k = uniform({5, d}, rng), v = uniform({5, d}, rng);
    Tensor pk = uniform({p, d}, rng), pv = uniform({p, d}, rng), w = uniform({5, d}, rng);
    std::vector<Tensor> masks{Tensor({2, 6}, {1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0, 1}),
                              Tensor({3, 5}, {1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1})};
    check("multi_head_attention",
          [&] { return probe(multi_head_attention(q, k, v, pk, pv, masks, ql, kl, heads), w); }, {q, k, v, pk, pv});
  }
  Tensor attn = masked_softmax(uniform({3, 5}, rng), Tensor({3, 5}, 1.0));
  const std::vector<double> key_mask{1, 0, 1, 1, 0};
  Tensor w35b = uniform({3, 5}, rng);
  check("apply_truncation", [&] { return probe(apply_truncation(attn, key_mask, false), w35b); }, {attn});
  check("apply_truncation renormalized", [&] { return probe(apply_truncation(attn, key_mask, true), w35b); }, {attn});
  {
    Tensor site_logits = uniform({3, 5}, rng), ones({3, 5}, 1.0);
    SparsityConfig sc;
    sc.top_p = 0.8;
    sc.tau_soft = 0.7;
    const CounterRng site_noise(17);
    for (auto [design, name] : {std::pair{AttentionDesign::TruncSA, "truncation site (frozen mask)"},
                                std::pair{AttentionDesign::SoftSA, "gumbel site (frozen noise)"}}) {
      for (bool renorm : {false, true}) {
        sc.renormalize_after_mask = renorm;
        for (auto variant : {SoftVariant::RowGumbel, SoftVariant::CellBernoulli}) {
          sc.variant = variant;
          const SiteTransform tr = compose_design(design, StackSide::Encoder, 1, 1, {}, sc, Phase::Train);
          TruncationCache cache{true, {}};
          check(name, [&] { return probe(sparse_attention_probs(site_logits, ones, tr, site_noise, &cache, 1), w35b); },
                {site_logits});
        }
      }
    }
  }
  const std::size_t primitive_checks = checks;

  std::mt19937_64 brng(102);
  std::vector<SequencePair> batch;
  std::vector<int> labels;
  for (int e = 0; e < 2; ++e) {
    SequencePair p{random_ids(6 + e, 12, brng), {}, {kBos}};
    for (int t : random_ids(3, 12, brng)) p.decoder_input.push_back(t);
    labels.insert(labels.end(), p.decoder_input.begin() + 1, p.decoder_input.end());
    labels.push_back(kEos);
    batch.push_back(p);
  }
  for (auto design : {AttentionDesign::Dense, AttentionDesign::UniBlock, AttentionDesign::HierBlock,
                      AttentionDesign::TruncSA, AttentionDesign::SoftSA, AttentionDesign::HierBlockSoftSA}) {
    Seq2SeqTransformer model({2, 2, 2, 8, 16, 12, 16}, {4, {}, 0.5}, 12);
    model.set_train_mode(TrainMode::Finetune);
    SparsityConfig sc;
    sc.top_p = 0.9;
    const AttentionPlan plan{design, {2, 2, 1}, sc, 5};
    TruncationCache cache{true, {}};
    const ForwardContext ctx{Phase::Train, 3, 1, &cache};
    GradCheckOptions opts;
    opts.probes = 0;
    check(std::string("model/") + to_string(design),
          [&] { return sequence_loss(model, batch, labels, plan, ctx); }, model.trainable(), opts);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          std::to_string(primitive_checks) + " primitive checks + " + std::to_string(checks - primitive_checks) +
              " model designs, " + std::to_string(entries) + " entries; max rel err " + num(worst, 3) + " (" +
              worst_name + ") < 1e-4; " + num(secs, 3) + " s < 60 s"};
}

// ------------------------------------------------------------ criterion 2

Outcome freeze_invariant(const Env&) {
  const auto t0 = Clock::now();
  TrainConfig cfg;
  cfg.n_train = 400;
  cfg.n_val = 8;
  cfg.n_test = 8;
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const AttentionPlan base_plan = make_plan(cfg, data.train);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  struct Run {
    std::size_t changed = 0, total = 0;
    bool identical = true;
  };
  auto run = [&](TrainMode mode, AttentionDesign design) {
    cfg.mode = mode;
    cfg.design = design;
    AttentionPlan plan = base_plan;
    plan.design = design;
    Seq2SeqTransformer model = build_model(cfg, vocab.size(), 5, nullptr);
    std::vector<std::vector<double>> before;
    for (const auto& p : model.parameters())
      if (p.role == ParamRole::Backbone) before.emplace_back(p.value.data().begin(), p.value.data().end());
    Adam opt(model.trainable(), {cfg.lr});
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t step = 0; step < 100; ++step) {
      const std::size_t begin = (step * bs) % order.size();
      train_step(model, opt, make_batch(data.train, order, begin, begin + bs), plan, {Phase::Train, 5, step});
    }
    Run r;
    std::size_t i = 0;
    for (const auto& p : model.parameters()) {
      if (p.role != ParamRole::Backbone) continue;
      const auto& old = before[i++];
      const auto now = p.value.data();
      r.identical = r.identical && same_bits(old, now);
      for (std::size_t j = 0; j < old.size(); ++j) r.changed += std::memcmp(&old[j], &now[j], sizeof(double)) != 0;
      r.total += old.size();
    }
    return r;
  };
  const Run dense = run(TrainMode::PrefixTune, AttentionDesign::Dense);
  const Run soft = run(TrainMode::PrefixTune, AttentionDesign::HierBlockSoftSA);
  const Run ft = run(TrainMode::Finetune, AttentionDesign::Dense);
  const double frac = double(ft.changed) / double(ft.total);
  const double secs = seconds_since(t0);
  const bool pass = dense.identical && soft.identical && frac >= 0.99 && secs < 30.0;
  return {pass, std::string("prefixtune 100 steps: backbone bit-identical (dense ") + (dense.identical ? "yes" : "NO") +
                    ", hierblocksoftsa " + (soft.identical ? "yes" : "NO") + "); finetune changed " +
                    std::to_string(ft.changed) + "/" + std::to_string(ft.total) + " = " + num(100.0 * frac) +
                    "% >= 99%; " + num(secs, 3) + " s < 30 s"};
}

// ------------------------------------------------------------ criterion 3

// Prefix columns visible to query t, as [first, last + 1); empty when none
// or when the visible set is not contiguous (reported as {1, 0}).
std::pair<std::size_t, std::size_t> visible_prefix_range(const AttentionMask& m, std::size_t t) {
  std::size_t first = m.prefix, last = 0, count = 0;
  for (std::size_t c = 0; c < m.prefix; ++c)
    if (m.at(t, c) == 1.0) {
      first = std::min(first, c);
      last = c;
      ++count;
    }
  if (count == 0) return {0, 0};
  if (last + 1 - first != count) return {1, 0};
  return {first, last + 1};
}

// Structural check of one mask against the blocking rules; returns an
// empty string on success.
std::string check_mask_structure(const AttentionMask& m, const AttentionRecord& rec, const SequencePair& ex,
                                 int band, std::size_t enc_segs, std::size_t dec_segs) {
  const bool blocked = rec.layer <= band && m.prefix > 0;
  for (std::size_t t = 0; t < m.queries; ++t)
    for (std::size_t j = 0; j < m.inputs; ++j) {
      const double expect = rec.side == StackSide::DecoderSelf && j > t ? 0.0 : 1.0;
      if (m.at(t, m.prefix + j) != expect) return "input column visibility";
    }
  if (!blocked) {
    for (std::size_t t = 0; t < m.queries; ++t)
      for (std::size_t c = 0; c < m.prefix; ++c)
        if (m.at(t, c) != 1.0) return "unblocked layer hides a prefix";
    return {};
  }
  const std::size_t segs = rec.side == StackSide::Encoder ? enc_segs : dec_segs;
  const std::size_t lo = m.prefix / segs, hi = (m.prefix + segs - 1) / segs;
  // Group queries: by the example's segment starts on the encoder, by runs
  // of identical visibility on the decoder.
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  if (rec.side == StackSide::Encoder) {
    std::vector<std::size_t> starts = ex.segment_starts;
    for (std::size_t s = 0; s < starts.size(); ++s) {
      const std::size_t end = s + 1 < starts.size() ? starts[s + 1] : m.queries;
      const auto range = visible_prefix_range(m, starts[s]);
      for (std::size_t t = starts[s]; t < end; ++t)
        if (visible_prefix_range(m, t) != range) return "queries of one segment see different prefixes";
      groups.push_back(range);
    }
  } else {
    for (std::size_t t = 0; t < m.queries; ++t) {
      const auto range = visible_prefix_range(m, t);
      if (groups.empty() || groups.back() != range) groups.push_back(range);
    }
    if (groups.size() > segs) return "more decoder blocks than segments";
  }
  std::size_t next = 0;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    const auto [b, e] = groups[s];
    if (e <= b) return "query with no or non-contiguous prefixes";
    if (b < next) return "prefix blocks overlap or run backwards";
    if (e - b != lo && e - b != hi) return "unbalanced prefix block";
    if (rec.side == StackSide::Encoder && b != next) return "encoder prefix blocks leave a gap";
    next = e;
  }
  if (rec.side == StackSide::Encoder && next != m.prefix) return "encoder prefix blocks do not cover every prefix";
  return {};
}

struct TraceRun {
  Tensor logits;
  AttentionTrace trace;
};

TraceRun traced_forward(const Seq2SeqTransformer& model, const std::vector<SequencePair>& batch,
                        const AttentionPlan& plan) {
  NoGradScope no_grad;
  ForwardContext ctx;
  ctx.keep_attention = true;
  TraceRun r;
  r.logits = model.forward(batch, plan, ctx, &r.trace);
  return r;
}

bool same_trace(const TraceRun& a, const TraceRun& b) {
  if (!same_bits(a.logits.data(), b.logits.data())) return false;
  if (a.trace.records.size() != b.trace.records.size() || a.trace.masks.size() != b.trace.masks.size()) return false;
  for (std::size_t i = 0; i < a.trace.masks.size(); ++i)
    if (!(a.trace.masks[i] == b.trace.masks[i])) return false;
  for (std::size_t i = 0; i < a.trace.records.size(); ++i)
    if (!same_bits(a.trace.records[i].probs.data(), b.trace.records[i].probs.data())) return false;
  return true;
}

Outcome mask_semantics(const Env&) {
  std::mt19937_64 rng(303);
  const int n_configs = 240;
  std::size_t blocked_cells = 0, sites = 0;
  std::string failure;
  std::set<std::tuple<int, int, int>> grid;
  for (int trial = 0; trial < n_configs && failure.empty(); ++trial) {
    const int enc = 1 + static_cast<int>(rng() % 3), dec = 1 + static_cast<int>(rng() % 2);
    const int layers = 1 + static_cast<int>(rng() % 4);
    const int band = static_cast<int>(rng() % static_cast<unsigned>(layers + 1));
    grid.insert({enc, dec, band});
    const int prefix = 3 + static_cast<int>(rng() % 4);
    const int heads = 2;
    Seq2SeqTransformer model({layers, layers, heads, 8, 16, 12, 32}, {prefix, {}, 1.0}, 1000 + trial);
    std::vector<SequencePair> batch;
    for (int e = 0; e < 2; ++e) {
      const std::size_t len = static_cast<std::size_t>(enc) + rng() % 7;
      std::vector<std::size_t> cut(len - 1);
      std::iota(cut.begin(), cut.end(), std::size_t{1});
      std::shuffle(cut.begin(), cut.end(), rng);
      std::vector<std::size_t> starts{0};
      starts.insert(starts.end(), cut.begin(), cut.begin() + (enc - 1));
      std::sort(starts.begin(), starts.end());
      SequencePair p{random_ids(len, 12, rng), starts, {kBos}};
      for (int t : random_ids(1 + rng() % 5, 12, rng)) p.decoder_input.push_back(t);
      batch.push_back(p);
    }
    const std::size_t dec_ref = 1 + rng() % 6;
    const AttentionPlan hier{AttentionDesign::HierBlock, {enc, dec, band}, {}, dec_ref};
    const TraceRun run = traced_forward(model, batch, hier);

    for (std::size_t mi = 0; mi < run.trace.masks.size() && failure.empty(); ++mi) {
      const AttentionMask& m = run.trace.masks[mi];
      const AttentionRecord& first = run.trace.records[mi * heads];
      const std::string why = check_mask_structure(m, first, batch[first.example], band, std::size_t(enc), std::size_t(dec));
      if (!why.empty()) {
        failure = "config " + std::to_string(trial) + ": " + why;
        break;
      }
      for (int h = 0; h < heads; ++h) {
        const Tensor& probs = run.trace.records[mi * heads + static_cast<std::size_t>(h)].probs;
        for (std::size_t k = 0; k < m.cells.size(); ++k)
          if (m.cells[k] == 0.0 && probs[k] != 0.0) failure = "config " + std::to_string(trial) + ": blocked cell with mass";
      }
      ++sites;
      // Gradient through the masked softmax must vanish on blocked cells.
      Tensor logits = uniform({m.queries, m.cols()}, rng, -3, 3), w = uniform({m.queries, m.cols()}, rng);
      logits.set_requires_grad(true);
      {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(mul(masked_softmax(logits, m.to_tensor()), w)));
      }
      for (std::size_t k = 0; k < m.cells.size(); ++k)
        if (m.cells[k] == 0.0) {
          ++blocked_cells;
          if (logits.grad()[k] != 0.0) failure = "config " + std::to_string(trial) + ": blocked cell with gradient";
        }
    }
    if (!failure.empty()) break;

    const TraceRun uni1 = traced_forward(model, batch, {AttentionDesign::UniBlock, {1, 1, band}, {}, dec_ref});
    const TraceRun dense = traced_forward(model, batch, {AttentionDesign::Dense, {enc, dec, band}, {}, dec_ref});
    if (!same_trace(uni1, dense)) failure = "config " + std::to_string(trial) + ": UniBlock with one segment differs from Dense";
    const TraceRun full_band = traced_forward(model, batch, {AttentionDesign::HierBlock, {enc, dec, layers}, {}, dec_ref});
    const TraceRun uni = traced_forward(model, batch, {AttentionDesign::UniBlock, {enc, dec, band}, {}, dec_ref});
    if (!same_trace(full_band, uni)) failure = "config " + std::to_string(trial) + ": HierBlock with band = L differs from UniBlock";
  }
  if (!failure.empty()) return {false, failure};
  return {true, std::to_string(n_configs) + " random configs (" + std::to_string(grid.size()) +
                    " distinct enc x dec x band), " + std::to_string(sites) + " attention sites, " +
                    std::to_string(blocked_cells) +
                    " blocked cells with zero mass and zero gradient; UniBlock(1 seg) == Dense and HierBlock(band L) == "
                    "UniBlock bit for bit"};
}

// ------------------------------------------------------------ criterion 4

Outcome top_p_oracle(const Env&) {
  std::mt19937_64 rng(404);
  double worst_impact = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng() % 8, c = 1 + rng() % 8;
    Tensor a({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += a.at(i, j) = std::uniform_real_distribution<double>(0, 1)(rng);
      for (std::size_t j = 0; j < c; ++j) a.at(i, j) /= s;
    }
    const auto k = key_impact(a);
    for (std::size_t j = 0; j < c; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < r; ++i) col += a.at(i, j);
      worst_impact = std::max(worst_impact, std::abs(k[j] - col / double(r)));
    }
  }

  // Every impact vector with entries on the 0.05 grid summing to one, for
  // lengths 1..6, against every p on the same grid. The oracle enumerates
  // all key subsets in exact integer units of 0.05.
  std::size_t vectors = 0, cases = 0, mismatches = 0, p_one_failures = 0;
  for (std::size_t n = 1; n <= 6; ++n) {
    std::vector<int> units(n, 0);
    std::function<void(std::size_t, int)> rec = [&](std::size_t i, int left) {
      if (i + 1 < n) {
        for (int u = 0; u <= left; ++u) {
          units[i] = u;
          rec(i + 1, left - u);
        }
        return;
      }
      units[i] = left;
      ++vectors;
      std::vector<double> impact(n);
      for (std::size_t j = 0; j < n; ++j) impact[j] = units[j] * 0.05;
      for (int pu = 1; pu <= 20; ++pu) {
        const auto got = top_p_mask(impact, pu == 20 ? 1.0 : pu * 0.05);
        ++cases;
        std::vector<double> expect(n, 1.0);
        if (pu < 20) {
          // Smallest subset reaching the mass whose members all outrank
          // every non-member (ties favor the lower index).
          std::size_t best_size = n + 1;
          unsigned best_mask = 0;
          for (unsigned mask = 1; mask < (1u << n); ++mask) {
            int mass = 0;
            std::size_t size = 0;
            bool prefix = true;
            for (std::size_t x = 0; x < n; ++x) {
              if (!(mask & (1u << x))) continue;
              mass += units[x];
              ++size;
              for (std::size_t y = 0; y < n; ++y) {
                if (mask & (1u << y)) continue;
                if (units[y] > units[x] || (units[y] == units[x] && y < x)) prefix = false;
              }
            }
            if (mass >= pu && prefix && size < best_size) {
              best_size = size;
              best_mask = mask;
            }
          }
          for (std::size_t x = 0; x < n; ++x) expect[x] = (best_mask & (1u << x)) ? 1.0 : 0.0;
        } else {
          p_one_failures += got != expect;
        }
        mismatches += got != expect;
      }
    };
    rec(0, 20);
  }
  const bool pass = worst_impact <= 1e-12 && mismatches == 0 && p_one_failures == 0;
  return {pass, "key_impact vs column means on 1000 matrices: max err " + num(worst_impact, 3) +
                    " <= 1e-12; top_p_mask vs exhaustive subset search: " + std::to_string(mismatches) +
                    " mismatches in " + std::to_string(cases) + " cases (" + std::to_string(vectors) +
                    " vectors, length <= 6, 0.05 grid); p = 1 all-ones failures " + std::to_string(p_one_failures)};
}

// ------------------------------------------------------------ criterion 5

Outcome gumbel_law(const Env&) {
  const std::vector<double> pi{0.5, 0.3, 0.15, 0.05};
  std::vector<double> logits;
  for (double p : pi) logits.push_back(std::log(p));
  const int n = 100'000;

  CounterRng rng(2024);
  std::vector<int> counts(pi.size(), 0);
  for (int s = 0; s < n; ++s) {
    const auto y = gumbel_softmax_row(logits, 1.0, rng);
    ++counts[static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin())];
  }
  double worst_freq = 0.0;
  std::string freqs;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    const double f = counts[i] / double(n);
    worst_freq = std::max(worst_freq, std::abs(f - pi[i]));
    freqs += (i ? "/" : "") + num(f, 4);
  }

  CounterRng cold(2025);
  int hot = 0;
  for (int s = 0; s < n; ++s) {
    const auto y = gumbel_softmax_row(logits, 0.01, cold);
    if (*std::max_element(y.begin(), y.end()) >= 0.99) ++hot;
  }
  const double hot_rate = hot / double(n);

  std::mt19937_64 r(505);
  double worst_softmax = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> l(1 + r() % 10);
    for (double& v : l) v = std::uniform_real_distribution<double>(-10, 10)(r);
    const std::vector<double> zero(l.size(), 0.0);
    const auto y = gumbel_softmax_row(l, zero, 1.0);
    const double mx = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double v : l) z += std::exp(v - mx);
    for (std::size_t i = 0; i < l.size(); ++i) worst_softmax = std::max(worst_softmax, std::abs(y[i] - std::exp(l[i] - mx) / z));
  }
  const bool pass = worst_freq <= 0.01 && hot_rate >= 0.99 && worst_softmax <= 1e-12;
  return {pass, "pi = 0.5/0.3/0.15/0.05: tau=1 argmax freqs " + freqs + ", max dev " + num(worst_freq, 3) +
                    " <= 0.01; tau=0.01 share with max >= 0.99: " + num(hot_rate, 5) +
                    " (needs >= 0.99); zero-noise vs softmax max err " + num(worst_softmax, 3) + " <= 1e-12"};
}

// ------------------------------------------------------------ criterion 6

std::vector<double> gram_singular_values(const Tensor& m) {
  Eigen::MatrixXd a(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) a(Eigen::Index(i), Eigen::Index(j)) = m.at(i, j);
  const Eigen::MatrixXd g = m.rows() >= m.cols() ? Eigen::MatrixXd(a.transpose() * a) : Eigen::MatrixXd(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> out;
  for (Eigen::Index i = es.eigenvalues().size() - 1; i >= 0; --i) out.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  return out;
}

Outcome spectrum_oracle(const Env&) {
  std::mt19937_64 rng(606);
  double worst_sigma = 0.0, worst_terminal = 0.0;
  std::size_t non_monotone = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t r = 1 + rng() % 8, c = 1 + rng() % 8;
    const Tensor m = uniform({r, c}, rng, -1, 1);
    const auto sigma = singular_values(m);
    const auto oracle = gram_singular_values(m);
    if (sigma.size() != oracle.size()) return {false, "singular value count differs"};
    for (std::size_t i = 0; i < sigma.size(); ++i) worst_sigma = std::max(worst_sigma, std::abs(sigma[i] - oracle[i]));
    const auto curve = cumulative_spectrum(sigma);
    for (std::size_t i = 1; i < curve.size(); ++i) non_monotone += curve[i] < curve[i - 1];
    worst_terminal = std::max(worst_terminal, std::abs(curve.back() - 1.0));
  }
  std::size_t step_failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 2 + rng() % 7, c = 2 + rng() % 7;
    const Tensor u = uniform({r, 1}, rng, 0.1, 1), v = uniform({1, c}, rng, 0.1, 1);
    const auto curve = cumulative_spectrum(singular_values(matmul(u, v)));
    for (double x : curve) step_failures += std::abs(x - 1.0) > 1e-9;
  }
  const bool pass = worst_sigma <= 1e-8 && non_monotone == 0 && worst_terminal <= 1e-9 && step_failures == 0;
  return {pass, "1000 random matrices (dims <= 8): max |sigma - gram oracle| " + num(worst_sigma, 3) +
                    " <= 1e-8; non-monotone steps " + std::to_string(non_monotone) + "; max |terminal - 1| " +
                    num(worst_terminal, 3) + " <= 1e-9; rank-1 step-curve failures " + std::to_string(step_failures) +
                    " / 100"};
}

// ------------------------------------------------------------ criterion 7

Outcome rouge_oracle(const Env&) {
  const auto t0 = Clock::now();
  constexpr std::size_t kMaxLen = 8;
  // All sequences over {0,1,2} up to kMaxLen, shortest first.
  std::vector<std::vector<int>> seqs{{}};
  for (std::size_t len = 1, from = 0; len <= kMaxLen; ++len) {
    const std::size_t to = seqs.size();
    for (std::size_t i = from; i < to; ++i)
      for (int a = 0; a < 3; ++a) {
        auto s = seqs[i];
        s.push_back(a);
        seqs.push_back(std::move(s));
      }
    from = to;
  }
  // For every sequence and k, a bitset over the base-3 codes of all its
  // length-k subsequences, built by enumerating index subsets.
  std::vector<std::size_t> words(kMaxLen + 1), offset(kMaxLen + 2, 0);
  std::size_t pow3 = 1;
  for (std::size_t k = 1; k <= kMaxLen; ++k) {
    pow3 *= 3;
    words[k] = (pow3 + 63) / 64;
    offset[k + 1] = offset[k] + words[k];
  }
  const std::size_t stride = offset[kMaxLen + 1];
  std::vector<std::uint64_t> bits(seqs.size() * stride, 0);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& q = seqs[s];
    for (unsigned mask = 1; mask < (1u << q.size()); ++mask) {
      std::size_t code = 0, k = 0;
      for (std::size_t i = 0; i < q.size(); ++i)
        if (mask & (1u << i)) {
          code = code * 3 + static_cast<std::size_t>(q[i]);
          ++k;
        }
      bits[s * stride + offset[k] + code / 64] |= std::uint64_t{1} << (code % 64);
    }
  }
  // A common subsequence of length k implies one of every shorter length,
  // so scanning k upwards until the sets stop intersecting gives the LCS.
  auto oracle = [&](std::size_t a, std::size_t b) {
    const std::size_t kmax = std::min(seqs[a].size(), seqs[b].size());
    std::size_t best = 0;
    for (std::size_t k = 1; k <= kmax; ++k) {
      const std::uint64_t* x = &bits[a * stride + offset[k]];
      const std::uint64_t* y = &bits[b * stride + offset[k]];
      bool hit = false;
      for (std::size_t w = 0; w < words[k] && !hit; ++w) hit = (x[w] & y[w]) != 0;
      if (!hit) break;
      best = k;
    }
    return best;
  };
  std::size_t pairs = 0, mismatches = 0;
  for (std::size_t a = 0; a < seqs.size(); ++a)
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      ++pairs;
      mismatches += lcs_length(seqs[a], seqs[b]) != oracle(a, b);
    }

  struct Fixture {
    std::string cand, ref;
    double r1p, r1r, r1f, r2f, rlf;
  };
  const std::vector<Fixture> fixtures{
      {"the cat sat", "the cat ran", 2.0 / 3, 2.0 / 3, 2.0 / 3, 0.5, 2.0 / 3},
      {"a b c d", "a c b d", 1.0, 1.0, 1.0, 0.0, 0.75},
      {"the the the", "the cat", 1.0 / 3, 0.5, 0.4, 0.0, 0.4},
      {"police killed the gunman", "police kill the gunman", 0.75, 0.75, 0.75, 1.0 / 3, 0.75},
      {"The Cat, sat!", "the cat ran.", 2.0 / 3, 2.0 / 3, 2.0 / 3, 0.5, 2.0 / 3},
      {"", "the cat", 0.0, 0.0, 0.0, 0.0, 0.0},
  };
  std::size_t fixture_failures = 0;
  std::string first_failure;
  for (const auto& f : fixtures) {
    const auto s = rouge(f.cand, f.ref);
    const bool ok = s.rouge1.precision == f.r1p && s.rouge1.recall == f.r1r && s.rouge1.f1 == f.r1f &&
                    s.rouge2.f1 == f.r2f && s.rougeL.f1 == f.rlf;
    if (!ok) {
      ++fixture_failures;
      if (first_failure.empty())
        first_failure = " (first: \"" + f.cand + "\" R1 " + num(s.rouge1.f1, 17) + " R2 " + num(s.rouge2.f1, 17) +
                        " RL " + num(s.rougeL.f1, 17) + ")";
    }
  }
  const bool pass = mismatches == 0 && fixture_failures == 0;
  return {pass, "LCS vs subsequence-set oracle on all " + std::to_string(pairs) + " pairs (length <= 8, 3 symbols): " +
                    std::to_string(mismatches) + " mismatches; " + std::to_string(fixtures.size() - fixture_failures) +
                    "/" + std::to_string(fixtures.size()) + " fixtures exact" + first_failure + "; " +
                    num(seconds_since(t0), 3) + " s"};
}

// ------------------------------------------------------------ criterion 8

Outcome learning_signal(const Env& env) {
  const auto t0 = Clock::now();
  TrainConfig cfg;  // desk-scale defaults: 2,000 examples, 4+4 layers, P = 16, lr 5e-5, 30 epochs, 3 seeds
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const auto backbone = initial_backbone(cfg, vocab, {env.log});
  auto run = [&](TrainMode mode, AttentionDesign design, const std::string& name) {
    TrainConfig c = cfg;
    c.mode = mode;
    c.design = design;
    return run_experiment(c, data, vocab, backbone, {(env.workdir / "learning" / name).string(), env.log, false});
  };
  const auto ft = run(TrainMode::Finetune, AttentionDesign::Dense, "finetune");
  const auto dense = run(TrainMode::PrefixTune, AttentionDesign::Dense, "prefix_dense");
  const auto hier = run(TrainMode::PrefixTune, AttentionDesign::HierBlock, "prefix_hierblock");
  const double secs = seconds_since(t0);
  auto per_seed = [](const ExperimentReport& r) {
    std::string s;
    for (const auto& run : r.runs) s += (s.empty() ? "" : "/") + num(run.test.rouge.mean_rl, 3);
    return s;
  };
  const double ratio = ft.mean_rl > 0 ? dense.mean_rl / ft.mean_rl : 0.0;
  const bool pass = dense.mean_rl >= 0.8 * ft.mean_rl && secs < 900.0;
  return {pass, "test ROUGE-L finetune " + num(ft.mean_rl) + " [" + per_seed(ft) + "], prefix Dense " +
                    num(dense.mean_rl) + " [" + per_seed(dense) + "] = " + num(ratio, 3) +
                    "x finetune (needs >= 0.8x); HierBlock " + num(hier.mean_rl) + " [" + per_seed(hier) +
                    "], HierBlock " + (hier.mean_rl >= dense.mean_rl ? ">=" : "<") + " Dense (directional, recorded); " +
                    num(secs, 4) + " s < 900 s"};
}

// ------------------------------------------------------------ criterion 9

std::map<std::string, std::string> csv_files(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

Outcome determinism(const Env& env) {
  auto pipeline = [&](const fs::path& dir) {
    fs::remove_all(dir);
    TrainConfig cfg;
    cfg.model = {2, 2, 2, 16, 32, 0, 64};
    cfg.n_train = 60;
    cfg.n_val = 10;
    cfg.n_test = 10;
    cfg.epochs = 2;
    cfg.beam = 2;
    cfg.seeds = {3, 4};
    cfg.lr = 1e-2;
    cfg.prefix_length = 4;
    cfg.pretrain_epochs = 1;
    Vocab vocab;
    const DataSplits data = load_splits(cfg, vocab);
    const auto backbone = initial_backbone(cfg, vocab);
    for (auto design : {AttentionDesign::HSoftSA, AttentionDesign::HTruncSA, AttentionDesign::HierBlockSoftSA}) {
      cfg.design = design;
      const fs::path out = dir / to_string(design);
      run_experiment(cfg, data, vocab, backbone, {out.string(), nullptr, true});
      run_spectrum(read_checkpoint((out / "ckpt_seed3").string()), data.test, {}, (out / "spectrum").string());
    }
    run_lowresource(cfg, data, vocab, {25, 50}, backbone, {(dir / "lowres").string(), nullptr, false});
    return csv_files(dir);
  };
  const auto a = pipeline(env.workdir / "determinism" / "run_a");
  const auto b = pipeline(env.workdir / "determinism" / "run_b");
  std::size_t bytes = 0, differing = 0;
  for (const auto& [name, content] : a) {
    bytes += content.size();
    auto it = b.find(name);
    differing += it == b.end() || it->second != content;
  }
  const bool pass = !a.empty() && a.size() == b.size() && differing == 0;
  return {pass, std::to_string(a.size()) + " CSV files (" + std::to_string(bytes) +
                    " bytes) from two identical runs (training, spectrum, low-resource sweep): " +
                    std::to_string(differing) + " differ"};
}

// ------------------------------------------------------------ criterion 10

Outcome lowres_mechanics(const Env& env) {
  std::size_t count_failures = 0;
  const std::vector<double> ks{5, 10, 25, 50};
  for (std::size_t n = 1; n <= 3000; ++n)
    for (double k : ks) count_failures += subsample_count(n, k) != n * static_cast<std::size_t>(k) / 100;

  TrainConfig cfg;
  cfg.model = {2, 2, 2, 16, 32, 0, 64};
  cfg.n_train = 200;
  cfg.n_val = 20;
  cfg.n_test = 20;
  cfg.epochs = 1;
  cfg.beam = 1;
  cfg.seeds = {3, 4, 5};
  cfg.prefix_length = 4;
  cfg.pretrain_epochs = 0;
  Vocab vocab;
  const DataSplits data = load_splits(cfg, vocab);
  const fs::path out = env.workdir / "lowres";
  fs::remove_all(out);
  const auto rep = run_lowresource(cfg, data, vocab, ks, std::nullopt, {out.string(), nullptr, false});

  std::set<std::vector<int>> held_out, train;
  for (const auto& ex : data.validation) held_out.insert(ex.source);
  for (const auto& ex : data.test) held_out.insert(ex.source);
  for (const auto& ex : data.train) train.insert(ex.source);
  std::size_t leaks = 0, outside = 0, size_failures = 0, drawn = 0;
  for (const auto& row : rep.rows) {
    const Corpus sub = subsample(data.train, row.k, subsample_seed(row.seed, row.k));
    size_failures += sub.size() != row.n_train || row.n_train != 200 * static_cast<std::size_t>(row.k) / 100;
    for (const auto& ex : sub) {
      ++drawn;
      leaks += held_out.count(ex.source);
      outside += !train.count(ex.source);
    }
  }

  std::ifstream is(out / "lowres.csv");
  std::string line;
  std::getline(is, line);
  std::set<std::pair<std::string, std::string>> keys;
  std::size_t rows = 0, bad_fields = 0;
  while (std::getline(is, line)) {
    ++rows;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    bad_fields += fields.size() != 7;
    if (fields.size() >= 2) keys.insert({fields[0], fields[1]});
  }
  const std::size_t expected = ks.size() * cfg.seeds.size();
  const bool pass = count_failures == 0 && size_failures == 0 && leaks == 0 && outside == 0 && rows == expected &&
                    keys.size() == expected && bad_fields == 0;
  return {pass, "floor(k% N) mismatches for N <= 3000: " + std::to_string(count_failures) + "; sweep rows with wrong size " +
                    std::to_string(size_failures) + "; " + std::to_string(drawn) + " drawn examples, " +
                    std::to_string(leaks) + " in val/test, " + std::to_string(outside) + " outside train; lowres.csv " +
                    std::to_string(rows) + " rows x 7 fields (" + std::to_string(keys.size()) + " distinct k,seed) for " +
                    std::to_string(ks.size()) + " ks x " + std::to_string(cfg.seeds.size()) + " seeds"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::string workdir = "acceptance_work";
  std::vector<int> only, expect_fail;
  bool verbose = false;
  app.add_option("--workdir", workdir, "scratch directory for training outputs");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_option("--expect-fail", expect_fail, "criteria whose FAIL does not change the exit code")->delimiter(',');
  app.add_flag("-v,--verbose", verbose, "training logs on stderr");
  CLI11_PARSE(app, argc, argv);

  Env env{workdir, verbose ? &std::cerr : nullptr};
  fs::create_directories(env.workdir);
  const std::vector<std::pair<int, std::function<Outcome(const Env&)>>> criteria{
      {1, gradient_integrity}, {2, freeze_invariant}, {3, mask_semantics},    {4, top_p_oracle},
      {5, gumbel_law},         {6, spectrum_oracle},  {7, rouge_oracle},      {8, learning_signal},
      {9, determinism},        {10, lowres_mechanics}};
  int unexpected = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn(env);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  ["
              << num(seconds_since(t0), 3) << " s]" << std::endl;
    if (!o.pass && std::find(expect_fail.begin(), expect_fail.end(), id) == expect_fail.end()) ++unexpected;
  }
  return unexpected == 0 ? 0 : 1;
}
