#include <gtest/gtest.h>

#include <random>

#include "dpt/rouge.hpp"

using namespace dpt;

namespace {

std::vector<std::vector<int>> all_sequences(int alphabet, std::size_t max_len) {
  std::vector<std::vector<int>> out{{}};
  std::vector<std::vector<int>> frontier{{}};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& s : frontier)
      for (int a = 0; a < alphabet; ++a) {
        auto t = s;
        t.push_back(a);
        next.push_back(t);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

bool is_subsequence(const std::vector<int>& s, const std::vector<int>& of) {
  std::size_t j = 0;
  for (int x : of)
    if (j < s.size() && s[j] == x) ++j;
  return j == s.size();
}

// Longest subsequence of `a` (by bitmask enumeration) that also occurs in `b`.
std::size_t brute_force_lcs(const std::vector<int>& a, const std::vector<int>& b) {
  std::size_t best = 0;
  for (unsigned mask = 0; mask < (1u << a.size()); ++mask) {
    std::vector<int> s;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (mask & (1u << i)) s.push_back(a[i]);
    if (s.size() > best && is_subsequence(s, b)) best = s.size();
  }
  return best;
}

}  // namespace

TEST(Rouge, CatFixture) {
  auto s = rouge("the cat sat", "the cat ran");
  EXPECT_DOUBLE_EQ(s.rouge1.precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.rouge1.recall, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.rouge1.f1, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.rouge2.precision, 0.5);
  EXPECT_DOUBLE_EQ(s.rouge2.recall, 0.5);
  EXPECT_DOUBLE_EQ(s.rougeL.f1, 2.0 / 3.0);
}

TEST(Rouge, SwappedMiddleFixture) {
  auto s = rouge("a b c d", "a c b d");
  EXPECT_DOUBLE_EQ(s.rougeL.precision, 0.75);
  EXPECT_DOUBLE_EQ(s.rougeL.recall, 0.75);
  EXPECT_DOUBLE_EQ(s.rouge2.f1, 0.0);
  EXPECT_DOUBLE_EQ(s.rouge1.f1, 1.0);
}

TEST(Rouge, ClippedCountsAndUnequalLengths) {
  auto s = rouge("the the the", "the cat");
  EXPECT_DOUBLE_EQ(s.rouge1.precision, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.rouge1.recall, 0.5);
  EXPECT_DOUBLE_EQ(s.rouge1.f1, 0.4);
  auto t = rouge("police killed the gunman", "police kill the gunman");
  EXPECT_DOUBLE_EQ(t.rouge1.f1, 0.75);
  EXPECT_DOUBLE_EQ(t.rouge2.f1, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.rougeL.f1, 0.75);
}

TEST(Rouge, EmptyInputsGiveZero) {
  auto s = rouge("", "the cat");
  EXPECT_EQ(s.rouge1.f1, 0.0);
  EXPECT_EQ(s.rougeL.f1, 0.0);
  auto e = rouge("a b", "");
  EXPECT_EQ(e.rouge1.recall, 0.0);
  EXPECT_EQ(rouge_n(std::vector<int>{1}, std::vector<int>{1}, 2).f1, 0.0);
  EXPECT_THROW(rouge_n(std::vector<int>{1}, std::vector<int>{1}, 0), ConfigError);
}

TEST(Rouge, CaseAndPunctuationInvariant) {
  auto a = rouge("The  Cat, sat!", "the cat ran.");
  auto b = rouge("the cat sat", "the cat ran");
  EXPECT_EQ(a.rouge1.f1, b.rouge1.f1);
  EXPECT_EQ(a.rouge2.f1, b.rouge2.f1);
  EXPECT_EQ(a.rougeL.f1, b.rougeL.f1);
  EXPECT_EQ(rouge_tokenize("Hello,\tWORLD 42"), (std::vector<std::string>{"hello", "world", "42"}));
}

TEST(Rouge, IdentityScoresOne) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> x(2 + rng() % 10);
    for (int& v : x) v = static_cast<int>(rng() % 4);
    auto s = rouge_all(x, x);
    EXPECT_DOUBLE_EQ(s.rouge1.f1, 1.0);
    EXPECT_DOUBLE_EQ(s.rouge2.f1, 1.0);
    EXPECT_DOUBLE_EQ(s.rougeL.f1, 1.0);
  }
}

TEST(Rouge, ScoresAreSymmetricInF1AndBounded) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> a(rng() % 9), b(rng() % 9);
    for (int& v : a) v = static_cast<int>(rng() % 3);
    for (int& v : b) v = static_cast<int>(rng() % 3);
    auto ab = rouge_all(a, b), ba = rouge_all(b, a);
    EXPECT_DOUBLE_EQ(ab.rouge1.f1, ba.rouge1.f1);
    EXPECT_DOUBLE_EQ(ab.rougeL.f1, ba.rougeL.f1);
    EXPECT_DOUBLE_EQ(ab.rouge1.precision, ba.rouge1.recall);
    for (double v : {ab.rouge1.f1, ab.rouge2.f1, ab.rougeL.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_LE(ab.rougeL.f1, ab.rouge1.f1 + 1e-15);
  }
}

// All pairs up to length 5; the acceptance binary covers length 8.
TEST(Lcs, MatchesBruteForceExhaustively) {
  const auto seqs = all_sequences(3, 5);
  for (const auto& a : seqs)
    for (const auto& b : seqs) ASSERT_EQ(lcs_length(a, b), brute_force_lcs(a, b));
}

TEST(Summary, MeansOfF1) {
  auto sum = summarize({rouge("a b", "a b"), rouge("a", "b")});
  EXPECT_DOUBLE_EQ(sum.mean_r1, 0.5);
  EXPECT_DOUBLE_EQ(sum.mean_rl, 0.5);
  EXPECT_EQ(sum.per_example.size(), 2u);
  EXPECT_EQ(summarize({}).mean_r1, 0.0);
}
