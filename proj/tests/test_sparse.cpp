#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dpt/gradcheck.hpp"
#include "dpt/sparse.hpp"

using namespace dpt;

namespace {

Tensor random_stochastic(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Tensor a({rows, cols});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += a.at(i, j) = u(rng);
    for (std::size_t j = 0; j < cols; ++j) a.at(i, j) /= s;
  }
  return a;
}

// Shortest prefix of the stable descending order whose mass reaches p; full
// mass keeps everything.
std::vector<double> exhaustive_top_p(const std::vector<double>& a, double p) {
  const std::size_t n = a.size();
  if (p >= 1.0) return std::vector<double>(n, 1.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x] > a[y]; });
  for (std::size_t k = 1; k <= n; ++k) {
    double mass = 0.0;
    for (std::size_t i = 0; i < k; ++i) mass += a[order[i]];
    if (mass >= p - 1e-12) {
      std::vector<double> mask(n, 0.0);
      for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1.0;
      return mask;
    }
  }
  return std::vector<double>(n, 1.0);
}

}  // namespace

TEST(KeyImpact, Examples) {
  Tensor uniform({3, 4}, 0.25);
  for (double v : key_impact(uniform)) EXPECT_NEAR(v, 0.25, 1e-15);
  auto point = key_impact(Tensor({2, 2}, {1, 0, 1, 0}));
  EXPECT_EQ(point, (std::vector<double>{1.0, 0.0}));
  EXPECT_THROW(key_impact(Tensor({2, 2}, 0.0)), DegenerateError);
}

TEST(KeyImpact, EqualsColumnMeans) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = random_stochastic(3, 5, rng);
    auto k = key_impact(a);
    double total = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < 3; ++i) col += a.at(i, j);
      EXPECT_NEAR(k[j], col / 3.0, 1e-12);
      EXPECT_GE(k[j], 0.0);
      total += k[j];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(TopPMask, Examples) {
  std::vector<double> a{0.5, 0.3, 0.2};
  EXPECT_EQ(top_p_mask(a, 0.75), (std::vector<double>{1, 1, 0}));
  EXPECT_EQ(top_p_mask(a, 1.0), (std::vector<double>{1, 1, 1}));
  std::vector<double> flat(4, 0.25);
  EXPECT_EQ(top_p_mask(flat, 0.95), (std::vector<double>{1, 1, 1, 1}));
  EXPECT_EQ(top_p_mask(flat, 0.5), (std::vector<double>{1, 1, 0, 0}));
  EXPECT_EQ(top_p_mask(std::vector<double>{0.6, 0.0, 0.4}, 1.0), (std::vector<double>{1, 1, 1}));
  EXPECT_EQ(top_p_mask(std::vector<double>{0.6, 0.0, 0.4}, 0.95), (std::vector<double>{1, 0, 1}));
  EXPECT_THROW(top_p_mask(a, 0.0), ConfigError);
}

TEST(TopPMask, MonotoneInP) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor a = random_stochastic(1, 6, rng);
    auto imp = key_impact(a);
    std::vector<double> prev(6, 0.0);
    for (double p = 0.05; p <= 1.0 + 1e-9; p += 0.05) {
      auto m = top_p_mask(imp, std::min(p, 1.0));
      for (std::size_t j = 0; j < 6; ++j) EXPECT_GE(m[j], prev[j]);
      prev = m;
    }
  }
}

TEST(TopPMask, MatchesExhaustiveSearchOnGrid) {
  // Every impact vector of length <= 4 on a 0.1 grid; the acceptance binary
  // runs the full length <= 6, 0.05 grid.
  for (std::size_t n = 1; n <= 4; ++n) {
    std::vector<int> units(n, 0);
    std::function<void(std::size_t, int)> rec = [&](std::size_t i, int left) {
      if (i + 1 == n) {
        units[i] = left;
        std::vector<double> a(n);
        for (std::size_t j = 0; j < n; ++j) a[j] = units[j] / 10.0;
        for (int pi = 1; pi <= 10; ++pi) EXPECT_EQ(top_p_mask(a, pi / 10.0), exhaustive_top_p(a, pi / 10.0));
        return;
      }
      for (int u = 0; u <= left; ++u) {
        units[i] = u;
        rec(i + 1, left - u);
      }
    };
    rec(0, 10);
  }
}

TEST(ApplyTruncation, Examples) {
  Tensor a({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.1, 0.3});
  std::vector<double> ones(3, 1.0), drop{1, 1, 0};
  EXPECT_EQ(apply_truncation(a, ones, false).values(), a.values());
  Tensor t = apply_truncation(a, drop, false);
  EXPECT_EQ(t.at(0, 2), 0.0);
  EXPECT_EQ(t.at(1, 2), 0.0);
  EXPECT_EQ(t.at(0, 0), 0.2);
  Tensor r = apply_truncation(a, drop, true);
  EXPECT_NEAR(r.at(0, 0) + r.at(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(r.at(1, 0), 0.6 / 0.7, 1e-15);
  EXPECT_THROW(apply_truncation(Tensor({1, 3}, {0, 0, 1}), drop, true), DegenerateError);
}

TEST(Gumbel, ClosedFormValues) {
  EXPECT_NEAR(gumbel_noise(std::exp(-1.0)), 0.0, 1e-15);
  EXPECT_NEAR(gumbel_noise(std::exp(-std::exp(1.0))), -1.0, 1e-14);
  EXPECT_TRUE(std::isfinite(gumbel_noise(0.0)));
  EXPECT_TRUE(std::isfinite(gumbel_noise(1.0)));
}

TEST(Gumbel, MeanIsEulerMascheroni) {
  CounterRng rng(77);
  double s = 0.0;
  const int n = 1'000'000;
  for (int i = 0; i < n; ++i) s += gumbel_noise(rng.uniform());
  EXPECT_NEAR(s / n, 0.5772156649, 0.01);
}

TEST(GumbelSoftmax, ZeroNoiseIsSoftmax) {
  std::vector<double> logits{0.3, -1.2, 2.0, 0.0};
  std::vector<double> zero(4, 0.0);
  auto y = gumbel_softmax_row(logits, zero, 1.0);
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], std::exp(logits[i]) / z, 1e-12);
}

TEST(GumbelSoftmax, ArgmaxFrequenciesMatchCategorical) {
  std::vector<double> pi{0.5, 0.3, 0.15, 0.05};
  std::vector<double> logits;
  for (double p : pi) logits.push_back(std::log(p));
  CounterRng rng(2024);
  std::vector<int> counts(4, 0);
  const int n = 100'000;
  for (int s = 0; s < n; ++s) {
    auto y = gumbel_softmax_row(logits, 1.0, rng);
    ++counts[static_cast<std::size_t>(std::max_element(y.begin(), y.end()) - y.begin())];
  }
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(counts[i] / double(n), pi[i], 0.01);
}

TEST(GumbelSoftmax, OneHotRateMatchesLogisticClosedForm) {
  // Two classes: the output max reaches 0.99 exactly when the perturbed logit
  // gap exceeds tau * log(99), and the Gumbel difference is standard logistic.
  auto logistic_cdf = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  const double tau = 0.01, delta = tau * std::log(99.0);
  for (double p0 : {0.5, 0.9}) {
    std::vector<double> logits{std::log(p0), std::log(1.0 - p0)};
    const double c = logits[1] - logits[0];
    const double exact = 1.0 - (logistic_cdf(c + delta) - logistic_cdf(c - delta));
    CounterRng rng(31);
    int hot = 0;
    const int n = 100'000;
    for (int s = 0; s < n; ++s) {
      auto y = gumbel_softmax_row(logits, tau, rng);
      if (std::max(y[0], y[1]) >= 0.99) ++hot;
    }
    EXPECT_NEAR(hot / double(n), exact, 0.003) << "p0=" << p0;
  }
}

TEST(GumbelSoftmax, ApproachesOneHotAsTemperatureFalls) {
  std::vector<double> logits{0.1, 0.7, -0.4, 0.2, 0.0};
  double previous = 0.0;
  for (double tau : {1.0, 0.1, 0.01, 0.001}) {
    CounterRng rng(9);
    int hot = 0;
    const int n = 10'000;
    for (int s = 0; s < n; ++s) {
      auto y = gumbel_softmax_row(logits, tau, rng);
      ASSERT_NEAR(std::accumulate(y.begin(), y.end(), 0.0), 1.0, 1e-12);
      if (*std::max_element(y.begin(), y.end()) >= 0.99) ++hot;
    }
    EXPECT_GE(hot / double(n), previous);
    previous = hot / double(n);
  }
  EXPECT_GE(previous, 0.99);
}

TEST(GumbelSoftmax, SeedReproducible) {
  std::vector<double> logits{1, 2, 3};
  CounterRng a(5), b(5);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(gumbel_softmax_row(logits, 0.5, a), gumbel_softmax_row(logits, 0.5, b));
}

TEST(GumbelSoftmax, GradientWithFrozenNoise) {
  std::mt19937_64 rng(3);
  Tensor logits({3, 5});
  for (double& v : logits.data()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  Tensor mask({3, 5}, 1.0);
  mask.at(0, 4) = 0.0;
  Tensor w({3, 5});
  for (double& v : w.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  SiteTransform tr = compose_design(AttentionDesign::SoftSA, StackSide::Encoder, 1, 2, {}, {}, Phase::Train);
  tr.config.tau_soft = 0.7;
  ASSERT_TRUE(tr.noise_active);
  const CounterRng noise(11);
  auto res = gradcheck([&] { return sum(mul(sparse_attention_probs(logits, mask, tr, noise), w)); }, {logits});
  EXPECT_LT(res.max_rel_error, 1e-4);
  tr.config.variant = SoftVariant::CellBernoulli;
  res = gradcheck([&] { return sum(mul(sparse_attention_probs(logits, mask, tr, noise), w)); }, {logits});
  EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(ComposeDesign, BandsAndPhases) {
  BlockSpec band0{1, 1, 0};
  for (int l = 1; l <= 4; ++l) {
    auto t = compose_design(AttentionDesign::HTruncSA, StackSide::Encoder, l, 4, band0, {}, Phase::Train);
    EXPECT_EQ(t, SiteTransform{});
  }
  BlockSpec band2{2, 1, 2};
  for (int l = 1; l <= 4; ++l) {
    auto hb = compose_design(AttentionDesign::HierBlock, StackSide::Encoder, l, 4, band2, {}, Phase::Train);
    auto hbs = compose_design(AttentionDesign::HierBlockSoftSA, StackSide::Encoder, l, 4, band2, {}, Phase::Train);
    EXPECT_EQ(hb.blocked, l <= 2);
    if (l > 2) {
      EXPECT_EQ(hbs, hb);
    } else {
      EXPECT_EQ(hbs.sparsity, SiteTransform::Sparsity::Soft);
      EXPECT_TRUE(hbs.blocked);
    }
    auto trunc = compose_design(AttentionDesign::TruncSA, StackSide::Encoder, l, 4, band2, {}, Phase::Eval);
    EXPECT_EQ(trunc.sparsity, SiteTransform::Sparsity::Truncate);
    auto soft_eval = compose_design(AttentionDesign::SoftSA, StackSide::Encoder, l, 4, band2, {}, Phase::Eval);
    EXPECT_FALSE(soft_eval.noise_active);
    auto dec = compose_design(AttentionDesign::SoftSA, StackSide::DecoderSelf, l, 4, band2, {}, Phase::Train);
    EXPECT_EQ(dec.sparsity, SiteTransform::Sparsity::None);
    auto uni = compose_design(AttentionDesign::UniBlock, StackSide::DecoderCross, l, 4, band2, {}, Phase::Train);
    EXPECT_TRUE(uni.blocked);
  }
  EXPECT_THROW(compose_design(AttentionDesign::Dense, StackSide::Encoder, 1, 4, BlockSpec{1, 1, 5}, {}, Phase::Eval),
               ConfigError);
  SparsityConfig bad;
  bad.top_p = 0.0;
  EXPECT_THROW(compose_design(AttentionDesign::TruncSA, StackSide::Encoder, 1, 4, {}, bad, Phase::Eval), ConfigError);
}

TEST(SparseAttention, TruncationEqualsManualPipeline) {
  std::mt19937_64 rng(8);
  Tensor logits({4, 6});
  for (double& v : logits.data()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  Tensor mask({4, 6}, 1.0);
  SparsityConfig cfg;
  cfg.top_p = 0.8;
  cfg.tau_trunc = 0.5;
  auto tr = compose_design(AttentionDesign::HTruncSA, StackSide::Encoder, 1, 4, BlockSpec{1, 1, 2}, cfg, Phase::Train);
  Tensor got = sparse_attention_probs(logits, mask, tr, CounterRng{});
  Tensor probs = masked_softmax(scale(logits, 1.0 / 0.5), mask);
  Tensor expected = apply_truncation(probs, top_p_mask(key_impact(probs), 0.8), false);
  EXPECT_EQ(got.values(), expected.values());
}

TEST(SparseAttention, EvalPhaseIsDeterministic) {
  std::mt19937_64 rng(4);
  Tensor logits({3, 4});
  for (double& v : logits.data()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
  Tensor mask({3, 4}, 1.0);
  for (auto variant : {SoftVariant::RowGumbel, SoftVariant::CellBernoulli}) {
    SparsityConfig cfg;
    cfg.variant = variant;
    auto tr = compose_design(AttentionDesign::SoftSA, StackSide::Encoder, 1, 2, {}, cfg, Phase::Eval);
    auto a = sparse_attention_probs(logits, mask, tr, CounterRng(1));
    auto b = sparse_attention_probs(logits, mask, tr, CounterRng(2));
    EXPECT_EQ(a.values(), b.values());
  }
}

TEST(SparseAttention, SoftRowsAreDistributions) {
  std::mt19937_64 rng(6);
  Tensor logits({5, 7});
  for (double& v : logits.data()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
  Tensor mask({5, 7}, 1.0);
  mask.at(2, 3) = 0.0;
  auto tr = compose_design(AttentionDesign::SoftSA, StackSide::Encoder, 1, 2, {}, {}, Phase::Train);
  Tensor p = sparse_attention_probs(logits, mask, tr, CounterRng(3));
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(p.at(2, 3), 0.0);
}

TEST(SparsityConfig, Validation) {
  SparsityConfig c;
  EXPECT_NO_THROW(c.validate());
  c.tau_soft = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_soft_variant("cell_bernoulli"), SoftVariant::CellBernoulli);
  EXPECT_THROW(parse_soft_variant("rows"), ConfigError);
}
