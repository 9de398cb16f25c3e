#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "dpt/masks.hpp"
#include "dpt/ops.hpp"

using namespace dpt;

TEST(AllocatePrefixes, FiftyFiftySplit) {
  auto r = allocate_prefixes(100, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], (PrefixRange{0, 50}));
  EXPECT_EQ(r[1], (PrefixRange{50, 100}));
}

TEST(AllocatePrefixes, SingleSegmentKeepsAll) {
  auto r = allocate_prefixes(10, 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0], (PrefixRange{0, 10}));
}

TEST(AllocatePrefixes, BalancedSizes) {
  auto r = allocate_prefixes(10, 3);
  std::vector<std::size_t> sizes;
  for (const auto& x : r) sizes.push_back(x.size());
  std::sort(sizes.begin(), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 4}));
  for (std::size_t p = 1; p <= 40; ++p)
    for (std::size_t s = 1; s <= std::min<std::size_t>(p, 6); ++s) {
      auto alloc = allocate_prefixes(p, s);
      ASSERT_EQ(alloc.size(), s);
      std::size_t at = 0, lo = p, hi = 0;
      for (const auto& x : alloc) {
        EXPECT_EQ(x.begin, at);
        at = x.end;
        lo = std::min(lo, x.size());
        hi = std::max(hi, x.size());
      }
      EXPECT_EQ(at, p);
      EXPECT_LE(hi - lo, 1u);
    }
}

TEST(AllocatePrefixes, TooFewPrefixes) { EXPECT_THROW(allocate_prefixes(2, 3), ConfigError); }

TEST(SegmentMap, Construction) {
  auto eq = SegmentMap::equal_spans(5, 2);
  EXPECT_EQ(eq.ids(), (std::vector<int>{0, 0, 0, 1, 1}));
  auto st = SegmentMap::from_starts(6, {0, 2, 5});
  EXPECT_EQ(st.ids(), (std::vector<int>{0, 0, 1, 1, 1, 2}));
  EXPECT_THROW(SegmentMap(std::vector<int>{0, 2}), InputError);
  EXPECT_THROW(SegmentMap(std::vector<int>{1, 1}), InputError);
  EXPECT_THROW(SegmentMap::from_starts(4, {0, 4}), InputError);
}

TEST(SegmentMap, OverReferenceIsPrefixStable) {
  const auto full = SegmentMap::over_reference(6, 6, 2);
  EXPECT_EQ(full.ids(), (std::vector<int>{0, 0, 0, 1, 1, 1}));
  for (std::size_t t = 1; t <= 9; ++t) {
    const auto part = SegmentMap::over_reference(t, 6, 2);
    for (std::size_t i = 0; i < t; ++i) EXPECT_EQ(part[i], i < 6 ? full[i] : 1);
  }
}

TEST(UniformBlockMask, SingleSegmentIsDense) {
  auto m = uniform_block_mask(SegmentMap::equal_spans(5, 1), allocate_prefixes(6, 1), 6);
  EXPECT_EQ(m, dense_mask(5, 6, 5));
}

TEST(UniformBlockMask, DesignatedPrefixesOnly) {
  auto m = uniform_block_mask(SegmentMap::equal_spans(4, 2), allocate_prefixes(4, 2), 4);
  // Direct construction: tokens 0,1 own prefixes {0,1}; tokens 2,3 own {2,3}.
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t c = 0; c < 8; ++c) {
      double expected = 1.0;
      if (c < 4) expected = ((t < 2) == (c < 2)) ? 1.0 : 0.0;
      EXPECT_EQ(m.at(t, c), expected) << t << "," << c;
    }
  EXPECT_EQ(m.at(0, 0), 1.0);
  EXPECT_EQ(m.at(0, 1), 1.0);
  EXPECT_EQ(m.at(0, 2), 0.0);
}

TEST(UniformBlockMask, RowSumsCount) {
  for (std::size_t segs = 1; segs <= 3; ++segs) {
    const std::size_t p = 12, t = 9;
    auto m = uniform_block_mask(SegmentMap::equal_spans(t, segs), allocate_prefixes(p, segs), p);
    for (std::size_t i = 0; i < t; ++i) EXPECT_EQ(m.row_sum(i), double(p / segs + t));
  }
}

TEST(HierarchicalBlockMask, BandEdges) {
  const auto seg = SegmentMap::equal_spans(6, 3);
  const auto alloc = allocate_prefixes(9, 3);
  for (int l = 1; l <= 4; ++l) {
    EXPECT_EQ(hierarchical_block_mask(l, 0, 4, seg, alloc, 9), dense_mask(6, 9, 6, l));
    EXPECT_EQ(hierarchical_block_mask(l, 4, 4, seg, alloc, 9), uniform_block_mask(seg, alloc, 9, 6, l));
  }
  EXPECT_THROW(hierarchical_block_mask(0, 2, 4, seg, alloc, 9), ConfigError);
}

TEST(HierarchicalBlockMask, TwelveLayerSevenBand) {
  EXPECT_EQ(default_lower_band(12), 7);
  const auto seg = SegmentMap::equal_spans(4, 2);
  const auto alloc = allocate_prefixes(4, 2);
  for (int l = 1; l <= 12; ++l) {
    auto m = hierarchical_block_mask(l, default_lower_band(12), 12, seg, alloc, 4);
    const bool blocked = m.at(0, 2) == 0.0;
    EXPECT_EQ(blocked, l <= 7) << "layer " << l;
  }
}

TEST(LayerSchedule, Modes) {
  EXPECT_EQ(layer_subset_schedule(LayerSchedule::Mode::All, 0, 12).count(), 12);
  auto single = layer_subset_schedule(LayerSchedule::Mode::Single, 12, 12);
  EXPECT_EQ(single.count(), 1);
  EXPECT_TRUE(single.has(12));
  auto top = layer_subset_schedule(LayerSchedule::Mode::Top, 5, 12);
  for (int l = 1; l <= 12; ++l) EXPECT_EQ(top.has(l), l >= 8);
  auto low = layer_subset_schedule(LayerSchedule::Mode::Low, 7, 12);
  for (int l = 1; l <= 12; ++l) EXPECT_EQ(low.has(l), l <= 7);
  EXPECT_THROW(layer_subset_schedule(LayerSchedule::Mode::Top, 0, 12), ConfigError);
  EXPECT_THROW(layer_subset_schedule(LayerSchedule::Mode::Single, 13, 12), ConfigError);
}

TEST(ScheduleSpec, ParseRoundTrip) {
  for (const char* s : {"all", "top:5", "low:7", "single:12"}) EXPECT_EQ(ScheduleSpec::parse(s).str(), s);
  EXPECT_THROW(ScheduleSpec::parse("top"), ConfigError);
  EXPECT_THROW(ScheduleSpec::parse("middle:3"), ConfigError);
}

TEST(Designs, ParseNames) {
  for (auto d : {AttentionDesign::Dense, AttentionDesign::UniBlock, AttentionDesign::HierBlock, AttentionDesign::TruncSA,
                 AttentionDesign::SoftSA, AttentionDesign::HTruncSA, AttentionDesign::HSoftSA,
                 AttentionDesign::HierBlockSoftSA})
    EXPECT_EQ(parse_design(to_string(d)), d);
  EXPECT_EQ(parse_design("HierBlock"), AttentionDesign::HierBlock);
  EXPECT_THROW(parse_design("blocky"), ConfigError);
}

// Property sweep over random segmentations, prefix lengths and bands.
TEST(MaskProperties, RandomConfigurations) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t segs = 1 + rng() % 3;
    const std::size_t t = segs + rng() % 8;
    const std::size_t p = segs + rng() % 10;
    const int n_layers = 1 + static_cast<int>(rng() % 6);
    const int band = static_cast<int>(rng() % static_cast<unsigned>(n_layers + 1));
    const auto seg = SegmentMap::equal_spans(t, segs);
    const auto alloc = allocate_prefixes(p, segs);
    for (int l = 1; l <= n_layers; ++l) {
      auto m = hierarchical_block_mask(l, band, n_layers, seg, alloc, p);
      for (std::size_t i = 0; i < t; ++i) {
        double prefixes_seen = 0.0;
        for (std::size_t c = 0; c < p; ++c) prefixes_seen += m.at(i, c);
        EXPECT_GE(prefixes_seen, 1.0);
        for (std::size_t j = 0; j < t; ++j) EXPECT_EQ(m.at(i, p + j), 1.0);
        for (std::size_t c : {alloc[static_cast<std::size_t>(seg[i])].begin, alloc[static_cast<std::size_t>(seg[i])].end - 1})
          EXPECT_EQ(m.at(i, c), 1.0);
      }
      // Blocked cells hold exactly zero probability after the softmax.
      Tensor logits({t, p + t});
      for (double& v : logits.data()) v = std::uniform_real_distribution<double>(-3, 3)(rng);
      Tensor probs = masked_softmax(logits, m.to_tensor());
      for (std::size_t k = 0; k < probs.numel(); ++k) {
        if (m.cells[k] == 0.0) {
          EXPECT_EQ(probs[k], 0.0);
        }
      }
    }
  }
}

TEST(CausalMask, PrefixColumnsStayVisible) {
  auto m = dense_mask(4, 3, 4);
  apply_causal(m);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(m.at(t, c), 1.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(m.at(t, 3 + j), j <= t ? 1.0 : 0.0);
  }
}
