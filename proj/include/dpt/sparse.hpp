#pragma once

// Truncated (top-p) and Gumbel-softmax sparse attention over attention rows
// of shape [T, P+T], plus the per-layer composition of blocking and sparsity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dpt/masks.hpp"
#include "dpt/ops.hpp"
#include "dpt/rng.hpp"

namespace dpt {

enum class SoftVariant { RowGumbel, CellBernoulli };

inline const char* to_string(SoftVariant v) { return v == SoftVariant::RowGumbel ? "row_gumbel" : "cell_bernoulli"; }

inline SoftVariant parse_soft_variant(const std::string& s) {
  if (s == "row_gumbel") return SoftVariant::RowGumbel;
  if (s == "cell_bernoulli") return SoftVariant::CellBernoulli;
  throw ConfigError("unknown softsa variant '" + s + "' (row_gumbel | cell_bernoulli)");
}

struct SparsityConfig {
  double top_p = 0.95;
  double tau_trunc = 1.0;
  double tau_soft = 1.0;
  bool renormalize_after_mask = false;
  SoftVariant variant = SoftVariant::RowGumbel;

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
    if (!(tau_trunc > 0.0) || !(tau_soft > 0.0)) throw ConfigError("temperatures must be positive");
  }
};

enum class Phase { Train, Eval };

// Normalized per-key attention mass, one entry per prefix or input key.
using KeyImpactVector = std::vector<double>;

// Column sums of A over all queries, normalized to a probability vector.
inline KeyImpactVector key_impact(const Tensor& attn) {
  const std::size_t n = attn.cols();
  const std::size_t m = attn.numel() / n;
  KeyImpactVector out(n, 0.0);
  auto a = attn.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (!(total > 0.0)) throw DegenerateError("key_impact: attention matrix carries no mass");
  for (double& v : out) v /= total;
  return out;
}

// Selects the smallest set of highest-impact keys whose cumulative mass
// reaches p (within 1e-12); ties go to the lower key index. 1 = keep.
inline std::vector<double> top_p_mask(std::span<const double> impact, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("top_p_mask: p must lie in (0, 1]");
  // Full mass keeps every key, zero-impact keys included.
  if (p == 1.0) return std::vector<double>(impact.size(), 1.0);
  std::vector<std::size_t> order(impact.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return impact[a] > impact[b]; });
  std::vector<double> mask(impact.size(), 0.0);
  double cumulative = 0.0;
  for (std::size_t idx : order) {
    mask[idx] = 1.0;
    cumulative += impact[idx];
    if (cumulative >= p - 1e-12) break;
  }
  return mask;
}

// Ã = key_mask ⊙ A with the key mask broadcast over query rows. The mask is a
// constant: surviving cells pass gradient straight through, masked cells pass
// none.
inline Tensor apply_truncation(const Tensor& attn, std::span<const double> key_mask, bool renormalize) {
  const std::size_t n = attn.cols();
  if (key_mask.size() != n) throw DimensionError("apply_truncation: key mask width differs from attention width");
  const std::size_t m = attn.numel() / n;
  Tensor broadcast(attn.shape());
  auto b = broadcast.data();
  for (std::size_t i = 0; i < m; ++i) std::copy(key_mask.begin(), key_mask.end(), b.begin() + static_cast<std::ptrdiff_t>(i * n));
  Tensor out = mul(attn, broadcast);
  return renormalize ? row_normalize(out) : out;
}

// Inverse-transform Gumbel(0,1) sample; u is clamped to [1e-12, 1 - 1e-12].
inline double gumbel_noise(double u) {
  constexpr double kEps = 1e-12;
  u = std::clamp(u, kEps, 1.0 - kEps);
  return -std::log(-std::log(u));
}

inline double logistic_noise(double u) {
  constexpr double kEps = 1e-12;
  u = std::clamp(u, kEps, 1.0 - kEps);
  return std::log(u) - std::log1p(-u);
}

// softmax((log π + g) / τ) with log π the log-softmax of `logits`.
inline std::vector<double> gumbel_softmax_row(std::span<const double> logits, std::span<const double> noise, double tau) {
  if (!(tau > 0.0)) throw ConfigError("gumbel_softmax_row: temperature must be positive");
  if (logits.size() != noise.size() || logits.empty()) throw DimensionError("gumbel_softmax_row: size mismatch");
  const double top = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - top);
  const double log_z = std::log(z) + top;
  std::vector<double> y(logits.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (logits[i] - log_z + noise[i]) / tau;
  const double ymax = *std::max_element(y.begin(), y.end());
  double s = 0.0;
  for (double& v : y) {
    v = std::exp(v - ymax);
    s += v;
  }
  for (double& v : y) v /= s;
  return y;
}

inline std::vector<double> gumbel_softmax_row(std::span<const double> logits, double tau, CounterRng& rng) {
  std::vector<double> noise(logits.size());
  for (double& g : noise) g = gumbel_noise(rng.uniform());
  return gumbel_softmax_row(logits, noise, tau);
}

inline Tensor gumbel_noise_matrix(const CounterRng& rng, std::size_t rows, std::size_t cols) {
  Tensor out({rows, cols});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = gumbel_noise(rng.uniform_at(i));
  return out;
}

inline Tensor logistic_noise_matrix(const CounterRng& rng, std::size_t rows, std::size_t cols) {
  Tensor out({rows, cols});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = logistic_noise(rng.uniform_at(i));
  return out;
}

enum class StackSide { Encoder, DecoderSelf, DecoderCross };

// What one attention site does to its logits for a given design and layer.
struct SiteTransform {
  enum class Sparsity { None, Truncate, Soft };
  bool blocked = false;
  Sparsity sparsity = Sparsity::None;
  SparsityConfig config;
  bool noise_active = false;

  bool operator==(const SiteTransform& o) const {
    return blocked == o.blocked && sparsity == o.sparsity && noise_active == o.noise_active &&
           (sparsity == Sparsity::None ||
            (config.top_p == o.config.top_p && config.tau_trunc == o.config.tau_trunc &&
             config.tau_soft == o.config.tau_soft && config.renormalize_after_mask == o.config.renormalize_after_mask &&
             config.variant == o.config.variant));
  }
};

// Blocking follows UniBlock (every layer) or the hierarchical band (layers
// 1..band). Sparsity acts on encoder self-attention only: TruncSA/SoftSA at
// every layer, the hierarchical variants on the lower band. Gumbel noise is
// live only while training.
inline SiteTransform compose_design(AttentionDesign design, StackSide side, int layer, int n_layers,
                                    const BlockSpec& blocks, const SparsityConfig& sparsity, Phase phase) {
  if (layer < 1 || layer > n_layers) throw ConfigError("compose_design: layer outside the stack");
  const int band = blocks.band_for(n_layers);
  if (band < 0 || band > n_layers)
    throw ConfigError("compose_design: lower band " + std::to_string(band) + " inconsistent with " +
                      std::to_string(n_layers) + " layers");
  sparsity.validate();
  const bool lower = layer <= band;
  SiteTransform t;
  t.config = sparsity;
  switch (design) {
    case AttentionDesign::Dense:
    case AttentionDesign::TruncSA:
    case AttentionDesign::SoftSA:
    case AttentionDesign::HTruncSA:
    case AttentionDesign::HSoftSA:
      break;
    case AttentionDesign::UniBlock:
      t.blocked = true;
      break;
    case AttentionDesign::HierBlock:
    case AttentionDesign::HierBlockSoftSA:
      t.blocked = lower;
      break;
  }
  if (side == StackSide::Encoder) {
    switch (design) {
      case AttentionDesign::TruncSA: t.sparsity = SiteTransform::Sparsity::Truncate; break;
      case AttentionDesign::SoftSA: t.sparsity = SiteTransform::Sparsity::Soft; break;
      case AttentionDesign::HTruncSA:
        if (lower) t.sparsity = SiteTransform::Sparsity::Truncate;
        break;
      case AttentionDesign::HSoftSA:
      case AttentionDesign::HierBlockSoftSA:
        if (lower) t.sparsity = SiteTransform::Sparsity::Soft;
        break;
      default: break;
    }
  }
  t.noise_active = t.sparsity == SiteTransform::Sparsity::Soft && phase == Phase::Train;
  return t;
}

// Truncation masks keyed by attention site. With `freeze` set, the first mask
// computed for a site is reused on later passes, which makes the transform a
// smooth function for finite-difference checks.
struct TruncationCache {
  bool freeze = false;
  std::map<std::uint64_t, std::vector<double>> masks;
};

// Attention probabilities for one site: blocked masked softmax followed by
// the site's sparsity transform. `noise` keys the Gumbel/logistic draws.
inline Tensor sparse_attention_probs(const Tensor& logits, const Tensor& mask, const SiteTransform& tr,
                                     const CounterRng& noise, TruncationCache* cache = nullptr,
                                     std::uint64_t site_key = 0) {
  const auto& cfg = tr.config;
  using S = SiteTransform::Sparsity;
  if (tr.sparsity == S::Truncate) {
    Tensor probs = masked_softmax(cfg.tau_trunc == 1.0 ? logits : scale(logits, 1.0 / cfg.tau_trunc), mask);
    std::vector<double> key_mask;
    if (cache != nullptr && cache->freeze) {
      auto it = cache->masks.find(site_key);
      if (it == cache->masks.end()) it = cache->masks.emplace(site_key, top_p_mask(key_impact(probs), cfg.top_p)).first;
      key_mask = it->second;
    } else {
      key_mask = top_p_mask(key_impact(probs), cfg.top_p);
      if (cache != nullptr) cache->masks[site_key] = key_mask;
    }
    return apply_truncation(probs, key_mask, cfg.renormalize_after_mask);
  }
  if (tr.sparsity == S::Soft && cfg.variant == SoftVariant::RowGumbel) {
    Tensor perturbed = tr.noise_active ? add(logits, gumbel_noise_matrix(noise, logits.rows(), logits.cols())) : logits;
    return masked_softmax(scale(perturbed, 1.0 / cfg.tau_soft), mask);
  }
  Tensor probs = masked_softmax(logits, mask);
  if (tr.sparsity == S::Soft) {
    Tensor eps = tr.noise_active ? logistic_noise_matrix(noise, logits.rows(), logits.cols()) : Tensor(logits.shape(), 0.0);
    Tensor gated = mul(probs, relaxed_bernoulli_gate(probs, eps, cfg.tau_soft));
    return cfg.renormalize_after_mask ? row_normalize(gated) : gated;
  }
  return probs;
}

}  // namespace dpt
