#pragma once

// Encoder-decoder transformer whose attention sites prepend trainable prefix
// keys and values. The positions [0, P) of every key/value sequence are the
// prefix parameters themselves; the remaining positions come from the layer's
// own projections.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dpt/masks.hpp"
#include "dpt/ops.hpp"
#include "dpt/rng.hpp"
#include "dpt/sparse.hpp"

namespace dpt {

struct ModelConfig {
  int n_layers_enc = 4;
  int n_layers_dec = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 128;
  int vocab_size = 0;
  int max_seq_len = 64;

  int d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers_enc < 1 || n_layers_dec < 1) throw ConfigError("model needs at least one encoder and one decoder layer");
    if (n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1)
      throw ConfigError("model dimensions must be >= 1");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }
};

enum class ParamRole { Backbone, Prefix };

inline const char* to_string(ParamRole r) { return r == ParamRole::Backbone ? "backbone" : "prefix"; }

struct Parameter {
  std::string name;
  ParamRole role;
  Tensor value;
};

enum class TrainMode { Finetune, PrefixTune };

inline const char* to_string(TrainMode m) { return m == TrainMode::Finetune ? "finetune" : "prefixtune"; }

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "finetune") return TrainMode::Finetune;
  if (s == "prefixtune") return TrainMode::PrefixTune;
  throw ConfigError("unknown training mode '" + s + "' (finetune | prefixtune)");
}

struct PrefixConfig {
  int prefix_length = 0;
  ScheduleSpec schedule;
  double init_std = 1.0;
};

// Prefix keys/values for every attention site. Each slot stores all heads
// side by side: keys and values are [P, d_model], head h owns columns
// [h*d_head, (h+1)*d_head).
class PrefixBank {
 public:
  struct Slot {
    Tensor keys;
    Tensor values;
    std::size_t length = 0;
  };

  PrefixBank() = default;
  PrefixBank(int n_enc, int n_dec) : enc_(n_enc), dec_self_(n_dec), dec_cross_(n_dec) {}

  Slot& slot(StackSide side, int layer) { return stack(side).at(static_cast<std::size_t>(layer - 1)); }
  const Slot& slot(StackSide side, int layer) const {
    return const_cast<PrefixBank*>(this)->stack(side).at(static_cast<std::size_t>(layer - 1));
  }
  std::size_t length(StackSide side, int layer) const { return slot(side, layer).length; }

  // Σ over sites of 2 · P · d_model.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* s : {&enc_, &dec_self_, &dec_cross_})
      for (const auto& slot : *s)
        if (slot.length > 0) n += slot.keys.numel() + slot.values.numel();
    return n;
  }

  LayerSchedule enc_schedule;
  LayerSchedule dec_schedule;

 private:
  std::vector<Slot>& stack(StackSide side) {
    switch (side) {
      case StackSide::Encoder: return enc_;
      case StackSide::DecoderSelf: return dec_self_;
      case StackSide::DecoderCross: return dec_cross_;
    }
    return enc_;
  }
  std::vector<Slot> enc_, dec_self_, dec_cross_;
};

// Design choices for one model evaluation.
struct AttentionPlan {
  AttentionDesign design = AttentionDesign::Dense;
  BlockSpec blocks;
  SparsityConfig sparsity;
  // Decoder positions are split into dec_segments over this many positions.
  std::size_t dec_reference_len = 1;
};

struct ForwardContext {
  Phase phase = Phase::Eval;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  TruncationCache* truncation = nullptr;
  // When set, every attention probability matrix is retained.
  bool keep_attention = false;
};

struct SequencePair {
  std::vector<int> source;
  // First token of each source segment; empty means equal-length spans.
  std::vector<std::size_t> segment_starts;
  // Decoder input (BOS + target); labels are scored separately.
  std::vector<int> decoder_input;
};

struct AttentionRecord {
  std::size_t example = 0;
  StackSide side = StackSide::Encoder;
  int layer = 0;
  int head = 0;
  std::size_t prefix = 0;
  Tensor probs;
};

struct AttentionTrace {
  std::vector<AttentionRecord> records;
  std::vector<AttentionMask> masks;
};

struct AttentionOutput {
  Tensor out;
  Tensor attn;
};

// Single-head attention over concat(prefix, inputs). prefix_keys and
// prefix_values may be undefined when P = 0.
inline AttentionOutput attention_with_prefix(const Tensor& q, const Tensor& k_in, const Tensor& v_in,
                                             const Tensor& prefix_keys, const Tensor& prefix_values,
                                             const Tensor& mask, const SiteTransform& transform = {},
                                             const CounterRng& noise = CounterRng{}, TruncationCache* cache = nullptr,
                                             std::uint64_t site_key = 0) {
  const std::size_t p = prefix_keys.defined() ? prefix_keys.rows() : 0;
  if (mask.rank() != 2 || mask.dim(0) != q.rows() || mask.dim(1) != p + k_in.rows())
    throw DimensionError("attention mask " + shape_str(mask.shape()) + " does not match [" + std::to_string(q.rows()) +
                         ", " + std::to_string(p + k_in.rows()) + "]");
  Tensor keys = p > 0 ? concat_rows({prefix_keys, k_in}) : k_in;
  Tensor values = p > 0 ? concat_rows({prefix_values, v_in}) : v_in;
  Tensor logits = scale(matmul_nt(q, keys), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor attn = sparse_attention_probs(logits, mask, transform, noise, cache, site_key);
  return {matmul(attn, values), attn};
}

inline Tensor sinusoidal_positions(std::size_t length, std::size_t d) {
  Tensor out({length, d});
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      out.at(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) out.at(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  return out;
}

class Seq2SeqTransformer {
 public:
  struct Projection {
    Tensor weight;
    Tensor bias;
  };
  struct AttentionWeights {
    Projection q, k, v, o;
  };
  struct LayerNormWeights {
    Tensor gain;
    Tensor bias;
  };
  struct FeedForward {
    Projection in, out;
  };
  struct EncoderLayer {
    LayerNormWeights ln_attn, ln_ff;
    AttentionWeights self;
    FeedForward ff;
  };
  struct DecoderLayer {
    LayerNormWeights ln_self, ln_cross, ln_ff;
    AttentionWeights self, cross;
    FeedForward ff;
  };

  Seq2SeqTransformer(const ModelConfig& config, const PrefixConfig& prefix, std::uint64_t init_seed)
      : config_(config), prefix_config_(prefix) {
    config_.validate();
    if (prefix.prefix_length < 0) throw ConfigError("prefix length must be >= 0");
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto ff = static_cast<std::size_t>(config_.d_ff);
    std::mt19937_64 rng(init_seed);
    const double depth_scale = 1.0 / std::sqrt(2.0 * (config_.n_layers_enc + config_.n_layers_dec));

    embedding_ = add_param("embed", ParamRole::Backbone, normal({static_cast<std::size_t>(config_.vocab_size), d}, 1.0, rng));
    for (int l = 1; l <= config_.n_layers_enc; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      EncoderLayer layer;
      layer.ln_attn = layer_norm_params(p + "ln_attn");
      layer.self = attention_params(p + "self", rng, depth_scale);
      layer.ln_ff = layer_norm_params(p + "ln_ff");
      layer.ff = ff_params(p + "ff", rng, depth_scale, d, ff);
      encoder_.push_back(std::move(layer));
    }
    enc_final_ = layer_norm_params("enc.final");
    for (int l = 1; l <= config_.n_layers_dec; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      DecoderLayer layer;
      layer.ln_self = layer_norm_params(p + "ln_self");
      layer.self = attention_params(p + "self", rng, depth_scale);
      layer.ln_cross = layer_norm_params(p + "ln_cross");
      layer.cross = attention_params(p + "cross", rng, depth_scale);
      layer.ln_ff = layer_norm_params(p + "ln_ff");
      layer.ff = ff_params(p + "ff", rng, depth_scale, d, ff);
      decoder_.push_back(std::move(layer));
    }
    dec_final_ = layer_norm_params("dec.final");
    lm_head_.weight = add_param("lm_head.weight", ParamRole::Backbone,
                                normal({d, static_cast<std::size_t>(config_.vocab_size)}, 1.0 / std::sqrt(double(d)), rng));
    lm_head_.bias = add_param("lm_head.bias", ParamRole::Backbone, Tensor({static_cast<std::size_t>(config_.vocab_size)}));

    bank_ = PrefixBank(config_.n_layers_enc, config_.n_layers_dec);
    if (prefix.prefix_length > 0) {
      bank_.enc_schedule = prefix.schedule.resolve(config_.n_layers_enc);
      bank_.dec_schedule = prefix.schedule.resolve(config_.n_layers_dec);
      std::mt19937_64 prefix_rng(init_seed ^ 0x5eedULL);
      const auto plen = static_cast<std::size_t>(prefix.prefix_length);
      auto make_slots = [&](StackSide side, const char* tag, const LayerSchedule& schedule, int n) {
        for (int l = 1; l <= n; ++l) {
          if (!schedule.has(l)) continue;
          auto& slot = bank_.slot(side, l);
          const std::string base = std::string("prefix.") + tag + "." + std::to_string(l);
          slot.length = plen;
          slot.keys = add_param(base + ".keys", ParamRole::Prefix, normal({plen, d}, prefix.init_std, prefix_rng));
          slot.values = add_param(base + ".values", ParamRole::Prefix, normal({plen, d}, prefix.init_std, prefix_rng));
        }
      };
      make_slots(StackSide::Encoder, "enc", bank_.enc_schedule, config_.n_layers_enc);
      make_slots(StackSide::DecoderSelf, "dec_self", bank_.dec_schedule, config_.n_layers_dec);
      make_slots(StackSide::DecoderCross, "dec_cross", bank_.dec_schedule, config_.n_layers_dec);
    }
    positions_ = sinusoidal_positions(static_cast<std::size_t>(config_.max_seq_len), d);
  }

  // Copies are independent replicas.
  Seq2SeqTransformer(const Seq2SeqTransformer& other) = delete;
  Seq2SeqTransformer& operator=(const Seq2SeqTransformer&) = delete;
  Seq2SeqTransformer(Seq2SeqTransformer&&) = default;
  Seq2SeqTransformer& operator=(Seq2SeqTransformer&&) = default;

  const ModelConfig& config() const { return config_; }
  const PrefixConfig& prefix_config() const { return prefix_config_; }
  const PrefixBank& prefixes() const { return bank_; }
  PrefixBank& prefixes() { return bank_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t count(ParamRole role) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.role == role) n += p.value.numel();
    return n;
  }

  // Finetune trains every parameter; prefixtune trains prefixes only.
  void set_train_mode(TrainMode mode) {
    for (auto& p : params_) p.value.set_requires_grad(mode == TrainMode::Finetune || p.role == ParamRole::Prefix);
  }

  std::vector<Tensor> trainable() const {
    std::vector<Tensor> out;
    for (const auto& p : params_)
      if (p.value.requires_grad()) out.push_back(p.value);
    return out;
  }

  // Validates a plan against this model (segment counts vs prefix lengths).
  void check_plan(const AttentionPlan& plan) const {
    plan.blocks.validate(config_.n_layers_enc);
    plan.blocks.validate(config_.n_layers_dec);
    plan.sparsity.validate();
    if (plan.dec_reference_len == 0) throw ConfigError("decoder reference length must be >= 1");
    if (!uses_blocking(plan.design)) return;
    for (int l = 1; l <= config_.n_layers_enc; ++l) {
      const auto p = bank_.length(StackSide::Encoder, l);
      if (p > 0 && p < static_cast<std::size_t>(plan.blocks.enc_segments))
        throw ConfigError("prefix length below encoder segment count");
    }
    for (int l = 1; l <= config_.n_layers_dec; ++l) {
      const auto p = bank_.length(StackSide::DecoderSelf, l);
      if (p > 0 && p < static_cast<std::size_t>(plan.blocks.dec_segments))
        throw ConfigError("prefix length below decoder segment count");
    }
  }

  struct Encoded {
    Tensor memory;
    std::vector<std::size_t> lengths;
  };

  Encoded encode(const std::vector<SequencePair>& batch, const AttentionPlan& plan, const ForwardContext& ctx,
                 AttentionTrace* trace = nullptr) const {
    Encoded enc;
    std::vector<Tensor> rows;
    for (const auto& ex : batch) {
      check_length(ex.source.size(), "source");
      rows.push_back(add(embedding(embedding_, ex.source), positions(ex.source.size())));
      enc.lengths.push_back(ex.source.size());
    }
    Tensor x = rows.size() == 1 ? rows.front() : concat_rows(rows);
    const int n = config_.n_layers_enc;
    for (int l = 1; l <= n; ++l) {
      const auto& layer = encoder_[static_cast<std::size_t>(l - 1)];
      const SiteTransform tr = compose_design(plan.design, StackSide::Encoder, l, n, plan.blocks, plan.sparsity, ctx.phase);
      const std::size_t p = bank_.length(StackSide::Encoder, l);
      std::vector<AttentionMask> masks;
      for (const auto& ex : batch) {
        const std::size_t t = ex.source.size();
        AttentionMask mask = dense_mask(t, p, t, l);
        if (tr.blocked && p > 0) {
          const auto segs = static_cast<std::size_t>(plan.blocks.enc_segments);
          const SegmentMap seg_map = ex.segment_starts.size() == segs ? SegmentMap::from_starts(t, ex.segment_starts)
                                                                      : SegmentMap::equal_spans(t, segs);
          mask = uniform_block_mask(seg_map, allocate_prefixes(p, segs), p, t, l);
        }
        masks.push_back(std::move(mask));
      }
      Tensor h = layer_norm(x, layer.ln_attn.gain, layer.ln_attn.bias);
      x = add(x, attention_site(StackSide::Encoder, l, layer.self, h, enc.lengths, h, enc.lengths, masks, tr, ctx, trace));
      x = add(x, feed_forward(layer.ff, layer_norm(x, layer.ln_ff.gain, layer.ln_ff.bias)));
    }
    enc.memory = layer_norm(x, enc_final_.gain, enc_final_.bias);
    return enc;
  }

  // Teacher-forced logits for packed decoder inputs, [Σ T_tgt, vocab].
  Tensor decode(const Encoded& enc, const std::vector<std::vector<int>>& decoder_inputs, const AttentionPlan& plan,
                const ForwardContext& ctx, AttentionTrace* trace = nullptr) const {
    if (decoder_inputs.size() != enc.lengths.size()) throw DimensionError("decoder batch differs from encoder batch");
    std::vector<Tensor> rows;
    std::vector<std::size_t> lengths;
    for (const auto& ids : decoder_inputs) {
      check_length(ids.size(), "target");
      rows.push_back(add(embedding(embedding_, ids), positions(ids.size())));
      lengths.push_back(ids.size());
    }
    Tensor y = rows.size() == 1 ? rows.front() : concat_rows(rows);
    const int n = config_.n_layers_dec;
    const auto segs = static_cast<std::size_t>(plan.blocks.dec_segments);
    for (int l = 1; l <= n; ++l) {
      const auto& layer = decoder_[static_cast<std::size_t>(l - 1)];
      // Sparsity is encoder-only, so the phase never changes decoder sites.
      const SiteTransform tr_self =
          compose_design(plan.design, StackSide::DecoderSelf, l, n, plan.blocks, plan.sparsity, ctx.phase);
      const SiteTransform tr_cross =
          compose_design(plan.design, StackSide::DecoderCross, l, n, plan.blocks, plan.sparsity, ctx.phase);
      const std::size_t p_self = bank_.length(StackSide::DecoderSelf, l);
      const std::size_t p_cross = bank_.length(StackSide::DecoderCross, l);
      std::vector<AttentionMask> self_masks, cross_masks;
      for (std::size_t e = 0; e < lengths.size(); ++e) {
        const std::size_t t = lengths[e];
        const SegmentMap seg_map = SegmentMap::over_reference(t, plan.dec_reference_len, segs);
        AttentionMask self = tr_self.blocked && p_self > 0
                                 ? uniform_block_mask(seg_map, allocate_prefixes(p_self, segs), p_self, t, l)
                                 : dense_mask(t, p_self, t, l);
        apply_causal(self);
        self_masks.push_back(std::move(self));
        cross_masks.push_back(tr_cross.blocked && p_cross > 0
                                  ? uniform_block_mask(seg_map, allocate_prefixes(p_cross, segs), p_cross, enc.lengths[e], l)
                                  : dense_mask(t, p_cross, enc.lengths[e], l));
      }
      Tensor h = layer_norm(y, layer.ln_self.gain, layer.ln_self.bias);
      y = add(y, attention_site(StackSide::DecoderSelf, l, layer.self, h, lengths, h, lengths, self_masks, tr_self, ctx, trace));
      h = layer_norm(y, layer.ln_cross.gain, layer.ln_cross.bias);
      y = add(y, attention_site(StackSide::DecoderCross, l, layer.cross, h, lengths, enc.memory, enc.lengths, cross_masks,
                                tr_cross, ctx, trace));
      y = add(y, feed_forward(layer.ff, layer_norm(y, layer.ln_ff.gain, layer.ln_ff.bias)));
    }
    Tensor out = layer_norm(y, dec_final_.gain, dec_final_.bias);
    return add_row(matmul(out, lm_head_.weight), lm_head_.bias);
  }

  Tensor forward(const std::vector<SequencePair>& batch, const AttentionPlan& plan, const ForwardContext& ctx,
                 AttentionTrace* trace = nullptr) const {
    Encoded enc = encode(batch, plan, ctx, trace);
    std::vector<std::vector<int>> inputs;
    inputs.reserve(batch.size());
    for (const auto& ex : batch) inputs.push_back(ex.decoder_input);
    return decode(enc, inputs, plan, ctx, trace);
  }

 private:
  static Tensor normal(Shape shape, double std, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (double& v : t.data()) v = dist(rng);
    return t;
  }

  Tensor add_param(const std::string& name, ParamRole role, Tensor value) {
    params_.push_back({name, role, value});
    return value;
  }

  LayerNormWeights layer_norm_params(const std::string& name) {
    const auto d = static_cast<std::size_t>(config_.d_model);
    return {add_param(name + ".gain", ParamRole::Backbone, Tensor({d}, 1.0)),
            add_param(name + ".bias", ParamRole::Backbone, Tensor({d}, 0.0))};
  }

  Projection projection(const std::string& name, std::size_t in, std::size_t out, double std, std::mt19937_64& rng) {
    return {add_param(name + ".weight", ParamRole::Backbone, normal({in, out}, std, rng)),
            add_param(name + ".bias", ParamRole::Backbone, Tensor({out}, 0.0))};
  }

  AttentionWeights attention_params(const std::string& name, std::mt19937_64& rng, double depth_scale) {
    const auto d = static_cast<std::size_t>(config_.d_model);
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    return {projection(name + ".q", d, d, std, rng), projection(name + ".k", d, d, std, rng),
            projection(name + ".v", d, d, std, rng), projection(name + ".o", d, d, std * depth_scale, rng)};
  }

  FeedForward ff_params(const std::string& name, std::mt19937_64& rng, double depth_scale, std::size_t d, std::size_t ff) {
    return {projection(name + ".in", d, ff, 1.0 / std::sqrt(static_cast<double>(d)), rng),
            projection(name + ".out", ff, d, depth_scale / std::sqrt(static_cast<double>(ff)), rng)};
  }

  void check_length(std::size_t n, const char* what) const {
    if (n == 0) throw InputError(std::string("empty ") + what + " sequence");
    if (n > static_cast<std::size_t>(config_.max_seq_len))
      throw InputError(std::string(what) + " length " + std::to_string(n) + " exceeds max_seq_len " +
                       std::to_string(config_.max_seq_len));
  }

  Tensor positions(std::size_t n) const {
    return Tensor({n, static_cast<std::size_t>(config_.d_model)},
                  std::vector<double>(positions_.data().begin(),
                                      positions_.data().begin() + static_cast<std::ptrdiff_t>(n * positions_.cols())));
  }

  static Tensor linear(const Tensor& x, const Projection& p) { return add_row(matmul(x, p.weight), p.bias); }

  static Tensor feed_forward(const FeedForward& ff, const Tensor& x) { return linear(gelu(linear(x, ff.in)), ff.out); }

  // Multi-head attention for a packed batch. Queries of example e occupy
  // rows [qoff_e, qoff_e + q_lengths[e]) of `queries`; likewise for keys.
  Tensor attention_site(StackSide side, int layer, const AttentionWeights& w, const Tensor& queries,
                        const std::vector<std::size_t>& q_lengths, const Tensor& keys,
                        const std::vector<std::size_t>& k_lengths, const std::vector<AttentionMask>& masks,
                        const SiteTransform& tr, const ForwardContext& ctx, AttentionTrace* trace) const {
    const auto heads = static_cast<std::size_t>(config_.n_heads);
    const auto dh = static_cast<std::size_t>(config_.d_head());
    Tensor q = linear(queries, w.q);
    Tensor k = linear(keys, w.k);
    Tensor v = linear(keys, w.v);
    const auto& slot = bank_.slot(side, layer);
    const std::size_t p = slot.length;
    const bool tracing = trace != nullptr && ctx.keep_attention;
    if (tr.sparsity == SiteTransform::Sparsity::None) {
      std::vector<Tensor> mask_tensors;
      mask_tensors.reserve(masks.size());
      for (const auto& m : masks) mask_tensors.push_back(m.to_tensor());
      std::vector<Tensor> probs;
      Tensor merged = multi_head_attention(q, k, v, slot.keys, slot.values, mask_tensors, q_lengths, k_lengths, heads,
                                           tracing ? &probs : nullptr);
      if (tracing) {
        for (std::size_t e = 0; e < masks.size(); ++e) {
          for (std::size_t h = 0; h < heads; ++h)
            trace->records.push_back({e, side, layer, static_cast<int>(h), p, probs[e * heads + h]});
          trace->masks.push_back(masks[e]);
        }
      }
      return linear(merged, w.o);
    }
    std::vector<Tensor> pk(heads), pv(heads);
    if (p > 0)
      for (std::size_t h = 0; h < heads; ++h) {
        pk[h] = slice(slot.keys, 0, p, h * dh, dh);
        pv[h] = slice(slot.values, 0, p, h * dh, dh);
      }
    std::vector<Tensor> per_example;
    std::size_t qoff = 0, koff = 0;
    for (std::size_t e = 0; e < q_lengths.size(); ++e) {
      const std::size_t tq = q_lengths[e], tk = k_lengths[e];
      const Tensor mask = masks[e].to_tensor();
      std::vector<Tensor> head_out;
      for (std::size_t h = 0; h < heads; ++h) {
        const CounterRng noise =
            CounterRng::keyed({ctx.seed, static_cast<std::uint64_t>(side), static_cast<std::uint64_t>(layer), h, ctx.step, e});
        const std::uint64_t site_key = (static_cast<std::uint64_t>(side) << 56) ^ (static_cast<std::uint64_t>(layer) << 48) ^
                                       (static_cast<std::uint64_t>(h) << 40) ^ static_cast<std::uint64_t>(e);
        auto res = attention_with_prefix(slice(q, qoff, tq, h * dh, dh), slice(k, koff, tk, h * dh, dh),
                                         slice(v, koff, tk, h * dh, dh), pk[h], pv[h], mask, tr, noise, ctx.truncation,
                                         site_key);
        if (tracing)
          trace->records.push_back({e, side, layer, static_cast<int>(h), p, res.attn});
        head_out.push_back(std::move(res.out));
      }
      if (tracing) trace->masks.push_back(masks[e]);
      per_example.push_back(heads == 1 ? head_out.front() : concat_cols(head_out));
      qoff += tq;
      koff += tk;
    }
    Tensor merged = per_example.size() == 1 ? per_example.front() : concat_rows(per_example);
    return linear(merged, w.o);
  }

  ModelConfig config_;
  PrefixConfig prefix_config_;
  std::vector<Parameter> params_;
  PrefixBank bank_;
  Tensor embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  LayerNormWeights enc_final_, dec_final_;
  Projection lm_head_;
  Tensor positions_;
};

// Mean token cross-entropy of a packed batch; labels are concatenated in the
// same order as the decoder inputs.
inline Tensor sequence_loss(const Seq2SeqTransformer& model, const std::vector<SequencePair>& batch,
                            const std::vector<int>& labels, const AttentionPlan& plan, const ForwardContext& ctx) {
  Tensor logits = model.forward(batch, plan, ctx);
  return cross_entropy(logits, labels);
}

}  // namespace dpt
