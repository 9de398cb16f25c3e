#pragma once

// Singular-value spectra of encoder attention slices and their normalized
// cumulative curves, averaged per layer band.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "dpt/data.hpp"
#include "dpt/model.hpp"

namespace dpt {

struct SvdResult {
  std::vector<double> sigma;  // descending
  Tensor u;                   // [m, r], r = min(m, n)
  Tensor v;                   // [n, r]
  int sweeps = 0;
};

struct SvdOptions {
  int max_sweeps = 100;
  double tolerance = 1e-12;
};

// One-sided Jacobi: orthogonalize the columns of a working copy of M (or of
// Mᵀ when M is wide) by plane rotations accumulated into V.
inline SvdResult svd_small(const Tensor& m, const SvdOptions& opts = {}) {
  if (m.rank() != 2) throw DimensionError("svd_small expects a matrix");
  const bool wide = m.cols() > m.rows();
  const std::size_t rows = wide ? m.cols() : m.rows();
  const std::size_t cols = wide ? m.rows() : m.cols();
  // Column-major working storage: a[c * rows + r].
  std::vector<double> a(rows * cols), v(cols * cols, 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const double x = m.at(r, c);
      if (!std::isfinite(x)) throw NumericError("svd_small: non-finite input");
      if (wide) a[r * rows + c] = x;
      else a[c * rows + r] = x;
    }
  for (std::size_t i = 0; i < cols; ++i) v[i * cols + i] = 1.0;

  auto col = [&](std::size_t c) { return a.data() + c * rows; };
  int sweep = 0;
  double residual = 0.0;
  for (; sweep < opts.max_sweeps; ++sweep) {
    bool rotated = false;
    residual = 0.0;
    for (std::size_t i = 0; i + 1 < cols; ++i)
      for (std::size_t j = i + 1; j < cols; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* ci = col(i);
        const double* cj = col(j);
        for (std::size_t r = 0; r < rows; ++r) {
          alpha += ci[r] * ci[r];
          beta += cj[r] * cj[r];
          gamma += ci[r] * cj[r];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        const double off = std::abs(gamma) / std::sqrt(alpha * beta);
        residual = std::max(residual, off);
        if (off <= opts.tolerance) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        double* wi = col(i);
        double* wj = col(j);
        for (std::size_t r = 0; r < rows; ++r) {
          const double x = wi[r], y = wj[r];
          wi[r] = c * x - s * y;
          wj[r] = s * x + c * y;
        }
        for (std::size_t r = 0; r < cols; ++r) {
          const double x = v[i * cols + r], y = v[j * cols + r];
          v[i * cols + r] = c * x - s * y;
          v[j * cols + r] = s * x + c * y;
        }
      }
    if (!rotated) break;
  }
  if (sweep == opts.max_sweeps)
    throw NumericError("svd_small: no convergence after " + std::to_string(opts.max_sweeps) +
                       " sweeps (off-diagonal residual " + std::to_string(residual) + ")");

  std::vector<double> norms(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) s += col(c)[r] * col(c)[r];
    norms[c] = std::sqrt(s);
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // Left factor of the working matrix has columns a_c / σ_c; for a wide M
  // the roles of U and V swap.
  Tensor left({rows, cols}), right({cols, cols});
  SvdResult out;
  out.sweeps = sweep + 1;
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t c = order[k];
    out.sigma.push_back(norms[c]);
    for (std::size_t r = 0; r < rows; ++r) left.at(r, k) = norms[c] > 0 ? col(c)[r] / norms[c] : 0.0;
    for (std::size_t r = 0; r < cols; ++r) right.at(r, k) = v[c * cols + r];
  }
  out.u = wide ? right : left;
  out.v = wide ? left : right;
  return out;
}

inline std::vector<double> singular_values(const Tensor& m) { return svd_small(m).sigma; }

// c_k = Σ_{i≤k} σ_i / Σ σ_i.
inline std::vector<double> cumulative_spectrum(const std::vector<double>& sigma) {
  const double total = std::accumulate(sigma.begin(), sigma.end(), 0.0);
  if (sigma.empty() || !(total > 0.0)) throw DegenerateError("cumulative_spectrum: singular values sum to zero");
  std::vector<double> out(sigma.size());
  double run = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    run += sigma[i];
    out[i] = run / total;
  }
  out.back() = 1.0;
  return out;
}

// Mean of the curve: 1 for a rank-1 spectrum, (n+1)/(2n) for a flat one.
inline double spectrum_auc(const std::vector<double>& curve) {
  if (curve.empty()) throw DegenerateError("spectrum_auc: empty curve");
  return std::accumulate(curve.begin(), curve.end(), 0.0) / static_cast<double>(curve.size());
}

struct BandSpectrum {
  std::vector<double> curve;
  std::size_t samples = 0;
  std::size_t skipped = 0;  // slices with no attention mass
  double auc = 0.0;
};

struct SpectrumReport {
  int band = 0;  // layers 1..band are "lower"
  BandSpectrum lower, higher;
};

// Equal-weight mean of curves; shorter curves are extended with their
// terminal value 1 (the trailing singular values are zero).
class CurveAccumulator {
 public:
  void add(const std::vector<double>& curve) {
    if (curve.size() > sum_.size()) sum_.resize(curve.size(), static_cast<double>(count_));
    for (std::size_t i = 0; i < sum_.size(); ++i) sum_[i] += i < curve.size() ? curve[i] : 1.0;
    ++count_;
  }
  std::size_t count() const { return count_; }
  std::vector<double> mean() const {
    std::vector<double> out = sum_;
    for (double& v : out) v /= static_cast<double>(count_);
    return out;
  }

 private:
  std::vector<double> sum_;
  std::size_t count_ = 0;
};

struct SpectrumOptions {
  int band = -1;             // negative: the plan's lower band for the encoder
  bool prefix_only = true;   // false analyzes the full [T, P+T] matrix
  std::size_t max_examples = 200;
};

inline SpectrumReport band_spectrum(const Seq2SeqTransformer& model, const Corpus& corpus, const AttentionPlan& plan,
                                    const SpectrumOptions& opts = {}) {
  if (corpus.empty()) throw InputError("band_spectrum: empty corpus");
  const int n = model.config().n_layers_enc;
  SpectrumReport rep;
  rep.band = opts.band < 0 ? plan.blocks.band_for(n) : opts.band;
  if (rep.band > n) throw ConfigError("band_spectrum: band exceeds encoder depth");
  if (opts.prefix_only) {
    bool any = false;
    for (int l = 1; l <= n; ++l) any = any || model.prefixes().length(StackSide::Encoder, l) > 0;
    if (!any) throw ConfigError("prefix-slice spectrum requested but the encoder has no prefixes");
  }
  CurveAccumulator lower, higher;
  BandSpectrum lo, hi;
  NoGradScope no_grad;
  ForwardContext ctx;
  ctx.keep_attention = true;
  const std::size_t count = std::min(opts.max_examples, corpus.size());
  for (std::size_t e = 0; e < count; ++e) {
    const auto& ex = corpus[e];
    AttentionTrace trace;
    model.encode({SequencePair{ex.source, ex.segment_starts, {}}}, plan, ctx, &trace);
    for (const auto& rec : trace.records) {
      if (rec.side != StackSide::Encoder) continue;
      if (opts.prefix_only && rec.prefix == 0) continue;
      const std::size_t t = rec.probs.rows();
      const std::size_t width = opts.prefix_only ? rec.prefix : rec.probs.cols();
      Tensor slice_m({t, width});
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < width; ++j) slice_m.at(i, j) = rec.probs.at(i, j);
      const bool is_lower = rec.layer <= rep.band;
      auto sigma = singular_values(slice_m);
      if (std::accumulate(sigma.begin(), sigma.end(), 0.0) <= 0.0) {
        ++(is_lower ? lo : hi).skipped;
        continue;
      }
      (is_lower ? lower : higher).add(cumulative_spectrum(sigma));
    }
  }
  auto finish = [](CurveAccumulator& acc, BandSpectrum& b) {
    b.samples = acc.count();
    if (b.samples > 0) {
      b.curve = acc.mean();
      b.auc = spectrum_auc(b.curve);
    }
  };
  finish(lower, lo);
  finish(higher, hi);
  rep.lower = std::move(lo);
  rep.higher = std::move(hi);
  return rep;
}

inline void write_spectrum_csv(const std::string& path, const SpectrumReport& rep) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write " + path);
  os.precision(17);
  os << "k,lower,higher\n";
  const std::size_t n = std::max(rep.lower.curve.size(), rep.higher.curve.size());
  for (std::size_t k = 0; k < n; ++k) {
    os << k + 1 << ',';
    if (k < rep.lower.curve.size()) os << rep.lower.curve[k];
    os << ',';
    if (k < rep.higher.curve.size()) os << rep.higher.curve[k];
    os << '\n';
  }
  os << "auc," << rep.lower.auc << ',' << rep.higher.auc << '\n';
  os << "samples," << rep.lower.samples << ',' << rep.higher.samples << '\n';
}

// Binary PPM (P6) with equal RGB channels, one pixel per matrix cell,
// brightness proportional to the cell's share of the matrix maximum.
inline void write_heatmap_ppm(const std::string& path, const Tensor& matrix) {
  if (matrix.rank() != 2) throw DimensionError("heatmap expects a matrix");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path);
  const double top = *std::max_element(matrix.data().begin(), matrix.data().end());
  os << "P6\n" << matrix.cols() << ' ' << matrix.rows() << "\n255\n";
  for (double v : matrix.data()) {
    const auto g = static_cast<unsigned char>(top > 0 ? std::lround(255.0 * std::clamp(v / top, 0.0, 1.0)) : 0);
    os.put(static_cast<char>(g)).put(static_cast<char>(g)).put(static_cast<char>(g));
  }
}

}  // namespace dpt
