#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <random>

#include "dpt/spectrum.hpp"

using namespace dpt;

namespace {

// Singular values as square roots of the eigenvalues of the Gram matrix.
std::vector<double> gram_oracle(const Tensor& m) {
  Eigen::MatrixXd a(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) a(Eigen::Index(i), Eigen::Index(j)) = m.at(i, j);
  Eigen::MatrixXd g = m.rows() >= m.cols() ? Eigen::MatrixXd(a.transpose() * a) : Eigen::MatrixXd(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g);
  std::vector<double> out;
  for (Eigen::Index i = es.eigenvalues().size() - 1; i >= 0; --i) out.push_back(std::sqrt(std::max(0.0, es.eigenvalues()(i))));
  return out;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  Tensor m({r, c});
  for (double& v : m.data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  return m;
}

}  // namespace

TEST(Svd, DiagonalMatrix) {
  Tensor d({3, 3}, {1, 0, 0, 0, 3, 0, 0, 0, 2});
  auto s = singular_values(d);
  EXPECT_NEAR(s[0], 3.0, 1e-14);
  EXPECT_NEAR(s[1], 2.0, 1e-14);
  EXPECT_NEAR(s[2], 1.0, 1e-14);
}

TEST(Svd, RankOneOuterProduct) {
  Tensor m({3, 2}, {1 * 4, 1 * 5, 2 * 4, 2 * 5, 3 * 4, 3 * 5});
  auto s = singular_values(m);
  EXPECT_NEAR(s[0], std::sqrt(14.0) * std::sqrt(41.0), 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
  auto curve = cumulative_spectrum(s);
  EXPECT_NEAR(curve[0], 1.0, 1e-12);
  EXPECT_EQ(curve[1], 1.0);
}

TEST(Svd, MatchesGramOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 1 + rng() % 8, c = 1 + rng() % 8;
    Tensor m = random_matrix(r, c, rng);
    auto s = svd_small(m);
    auto oracle = gram_oracle(m);
    ASSERT_EQ(s.sigma.size(), std::min(r, c));
    for (std::size_t i = 0; i < s.sigma.size(); ++i) EXPECT_NEAR(s.sigma[i], oracle[i], 1e-8);
    for (std::size_t i = 1; i < s.sigma.size(); ++i) EXPECT_GE(s.sigma[i - 1], s.sigma[i]);
  }
}

TEST(Svd, FactorsReconstructInput) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng() % 7, c = 1 + rng() % 7;
    Tensor m = random_matrix(r, c, rng);
    auto s = svd_small(m);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double v = 0.0;
        for (std::size_t k = 0; k < s.sigma.size(); ++k) v += s.u.at(i, k) * s.sigma[k] * s.v.at(j, k);
        EXPECT_NEAR(v, m.at(i, j), 1e-12);
      }
  }
}

TEST(Svd, RowStochasticAttentionShape) {
  std::mt19937_64 rng(14);
  Tensor a = random_matrix(6, 4, rng);
  for (double& v : a.data()) v = std::abs(v);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += a.at(i, j);
    for (std::size_t j = 0; j < 4; ++j) a.at(i, j) /= s;
  }
  auto sigma = singular_values(a);
  EXPECT_EQ(sigma.size(), 4u);
  EXPECT_GE(sigma[0], std::sqrt(6.0 / 4.0) - 1e-12);
}

TEST(CumulativeSpectrum, MonotoneEndsAtOne) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    auto curve = cumulative_spectrum(singular_values(random_matrix(1 + rng() % 8, 1 + rng() % 8, rng)));
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i], curve[i - 1]);
    EXPECT_NEAR(curve.back(), 1.0, 1e-9);
    EXPECT_GT(curve.front(), 0.0);
  }
}

TEST(CumulativeSpectrum, FlatAndDegenerate) {
  auto flat = cumulative_spectrum({1, 1, 1, 1});
  EXPECT_EQ(flat, (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  EXPECT_DOUBLE_EQ(spectrum_auc(flat), 5.0 / 8.0);
  EXPECT_DOUBLE_EQ(spectrum_auc(cumulative_spectrum({2, 0, 0})), 1.0);
  EXPECT_THROW(cumulative_spectrum({0, 0}), DegenerateError);
  EXPECT_THROW(spectrum_auc({}), DegenerateError);
}

TEST(CurveAccumulator, PadsShortCurvesWithOne) {
  CurveAccumulator acc;
  acc.add({0.5, 1.0});
  acc.add({0.25, 0.5, 0.75, 1.0});
  auto m = acc.mean();
  EXPECT_EQ(m, (std::vector<double>{0.375, 0.75, 0.875, 1.0}));
  EXPECT_EQ(acc.count(), 2u);
}

TEST(Heatmap, WritesBinaryPpm) {
  const auto path = std::filesystem::temp_directory_path() / "dpt_heatmap_test.ppm";
  write_heatmap_ppm(path.string(), Tensor({2, 3}, {0, 0.5, 1, 1, 0, 0.25}));
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  is.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxv, 255);
  std::vector<char> px((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  EXPECT_EQ(px.size(), 18u);
  std::filesystem::remove(path);
}
