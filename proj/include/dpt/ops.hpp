#pragma once

// Differentiable primitives. Every op computes its forward value eagerly and,
// when a tape is active and an input requires gradients, records a backward
// closure that accumulates into the inputs' gradient buffers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap cmap(const Tensor& t, std::size_t r, std::size_t c) { return {t.data().data(), Eigen::Index(r), Eigen::Index(c)}; }
inline ConstMatMap cmap_grad(const Tensor& t, std::size_t r, std::size_t c) { return {t.grad().data(), Eigen::Index(r), Eigen::Index(c)}; }
inline MatMap map(Tensor& t, std::size_t r, std::size_t c) { return {t.data().data(), Eigen::Index(r), Eigen::Index(c)}; }
inline MatMap map_grad(const Tensor& t, std::size_t r, std::size_t c) { return {t.grad().data(), Eigen::Index(r), Eigen::Index(c)}; }

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class Backward>
void record(Tensor& out, std::initializer_list<const Tensor*> inputs, Backward&& fn) {
  Tape* tape = active_tape();
  if (tape == nullptr || !any_requires_grad(inputs)) return;
  out.set_requires_grad(true);
  tape->record(std::forward<Backward>(fn));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// Sentinel added to masked logits before normalization.
inline constexpr double kMaskedLogit = -1e30;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({m, n});
  detail::map(out, m, n).noalias() = detail::cmap(a, m, k) * detail::cmap(b, k, n);
  detail::record(out, {&a, &b}, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    auto g = detail::cmap_grad(out, m, n);
    if (a.requires_grad()) detail::map_grad(a, m, k).noalias() += g * detail::cmap(b, k, n).transpose();
    if (b.requires_grad()) detail::map_grad(b, k, n).noalias() += detail::cmap(a, m, k).transpose() * g;
  });
  return out;
}

// a · bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({m, n});
  detail::map(out, m, n).noalias() = detail::cmap(a, m, k) * detail::cmap(b, n, k).transpose();
  detail::record(out, {&a, &b}, [a, b, out, m, k, n]() mutable {
    if (!out.has_grad()) return;
    auto g = detail::cmap_grad(out, m, n);
    if (a.requires_grad()) detail::map_grad(a, m, k).noalias() += g * detail::cmap(b, n, k);
    if (b.requires_grad()) detail::map_grad(b, n, k).noalias() += g.transpose() * detail::cmap(a, m, k);
  });
  return out;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  detail::map(out, n, m) = detail::cmap(a, m, n).transpose();
  detail::record(out, {&a}, [a, out, m, n]() mutable {
    if (!out.has_grad()) return;
    detail::map_grad(a, m, n) += detail::cmap_grad(out, n, m).transpose();
  });
  return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), a.values());
  detail::record(out, {&a}, [a, out]() mutable {
    if (!out.has_grad()) return;
    auto ga = a.grad();
    auto go = out.grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
  });
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::record(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
  detail::record(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

// Elementwise product. A constant operand (requires_grad = false) acts as a
// fixed mask and receives no gradient.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::record(out, {&a, &b}, [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      auto y = b.data();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * y[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      auto x = a.data();
      for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * x[i];
    }
  });
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
  detail::record(out, {&a}, [a, out, s]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * s;
  });
  return out;
}

// out[i, :] = a[i, :] + row for every row i.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
  detail::require_rank2(a, "add_row");
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (row.numel() != n)
    throw DimensionError("add_row: row of shape " + shape_str(row.shape()) + " for matrix " + shape_str(a.shape()));
  Tensor out({m, n});
  auto o = out.data();
  auto x = a.data(), r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + r[j];
  detail::record(out, {&a, &row}, [a, row, out, m, n]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (row.requires_grad()) {
      auto gr = row.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += go[i * n + j];
    }
  });
  return out;
}

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::scalar(total);
  detail::record(out, {&a}, [a, out]() mutable {
    if (!out.has_grad()) return;
    const double g = out.grad()[0];
    for (double& v : a.grad()) v += g;
  });
  return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Row-wise layer normalization with learned gain and bias (biased variance).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n || bias.numel() != n) throw DimensionError("layer_norm: gain/bias width mismatch");
  Tensor out({m, n});
  std::vector<double> xhat(m * n), inv_std(m);
  auto xv = x.data();
  auto o = out.data();
  auto gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      o[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  detail::record(out, {&x, &gain, &bias},
                 [x, gain, bias, out, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
                   if (!out.has_grad()) return;
                   auto go = out.grad();
                   auto gv = gain.data();
                   if (gain.requires_grad() || bias.requires_grad()) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t j = 0; j < n; ++j) {
                         if (gain.requires_grad()) gain.grad()[j] += go[i * n + j] * xhat[i * n + j];
                         if (bias.requires_grad()) bias.grad()[j] += go[i * n + j];
                       }
                   }
                   if (!x.requires_grad()) return;
                   auto gx = x.grad();
                   const double inv_n = 1.0 / static_cast<double>(n);
                   for (std::size_t i = 0; i < m; ++i) {
                     double sum_g = 0.0, sum_gx = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       const double g = go[i * n + j] * gv[j];
                       sum_g += g;
                       sum_gx += g * xhat[i * n + j];
                     }
                     for (std::size_t j = 0; j < n; ++j) {
                       const double g = go[i * n + j] * gv[j];
                       gx[i * n + j] += inv_std[i] * (g - inv_n * sum_g - xhat[i * n + j] * inv_n * sum_gx);
                     }
                   }
                 });
  return out;
}

// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  std::vector<double> th(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = xv[i];
    // tanh(u) = 1 - 2 / (exp(2u) + 1)
    th[i] = 1.0 - 2.0 / (std::exp(2.0 * kC * (v + kA * v * v * v)) + 1.0);
    o[i] = 0.5 * v * (1.0 + th[i]);
  }
  detail::record(out, {&x}, [x, out, th = std::move(th)]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto gx = x.grad();
    auto xv = x.data();
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double v = xv[i];
      const double t = th[i];
      const double du = kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
  return out;
}

// Rows of `table` gathered by id.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  Tensor out({ids.size(), d});
  auto tv = table.data();
  auto o = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, o.begin() + static_cast<std::ptrdiff_t>(i * d));
  std::vector<int> id_copy(ids.begin(), ids.end());
  detail::record(out, {&table}, [table, out, d, id_copy = std::move(id_copy)]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto gt = table.grad();
    for (std::size_t i = 0; i < id_copy.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[id_copy[i] * d + j] += go[i * d + j];
  });
  return out;
}

// Stacks matrices along rows: the key axis when prefixes are prepended.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    m += p.rows();
  }
  Tensor out({m, n});
  auto o = out.data();
  std::size_t offset = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
    needs_grad = needs_grad || p.requires_grad();
  }
  Tape* tape = active_tape();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += go[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    n += p.cols();
  }
  Tensor out({m, n});
  auto o = out.data();
  std::size_t c0 = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    auto pv = p.data();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * w), w, o.begin() + static_cast<std::ptrdiff_t>(i * n + c0));
    c0 += w;
    needs_grad = needs_grad || p.requires_grad();
  }
  Tape* tape = active_tape();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out, m, n]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t c0 = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gp[i * w + j] += go[i * n + c0 + j];
        }
        c0 += w;
      }
    });
  }
  return out;
}

// Rectangular block [r0, r0+nr) x [c0, c0+nc).
inline Tensor slice(const Tensor& x, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
  detail::require_rank2(x, "slice");
  const std::size_t n = x.dim(1);
  if (r0 + nr > x.dim(0) || c0 + nc > n || nr == 0 || nc == 0)
    throw DimensionError("slice out of range for " + shape_str(x.shape()));
  Tensor out({nr, nc});
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < nr; ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((r0 + i) * n + c0), nc, o.begin() + static_cast<std::ptrdiff_t>(i * nc));
  detail::record(out, {&x}, [x, out, r0, nr, c0, nc, n]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < nr; ++i)
      for (std::size_t j = 0; j < nc; ++j) gx[(r0 + i) * n + c0 + j] += go[i * nc + j];
  });
  return out;
}

// Softmax over the last axis restricted to cells where mask != 0. Masked
// cells receive exactly zero probability and exactly zero gradient.
inline Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  detail::require_same_shape(logits, mask, "masked_softmax");
  const std::size_t n = logits.cols();
  const std::size_t m = logits.numel() / n;
  Tensor out(logits.shape());
  auto lv = logits.data();
  auto mv = mask.data();
  auto o = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mv[i * n + j] == 0.0) continue;
      any = true;
      top = std::max(top, lv[i * n + j]);
    }
    if (!any) throw DegenerateError("masked_softmax: row " + std::to_string(i) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double shifted = lv[i * n + j] + (mv[i * n + j] == 0.0 ? kMaskedLogit : 0.0) - top;
      const double e = std::exp(shifted);
      o[i * n + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = mv[i * n + j] == 0.0 ? 0.0 : o[i * n + j] / z;
  }
  detail::record(out, {&logits}, [logits, out, m, n]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto y = out.data();
    auto gl = logits.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * go[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
    }
  });
  return out;
}

// Mean token cross-entropy of logits [T, V] against integer targets.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) throw DimensionError("cross_entropy: target count differs from logit rows");
  std::vector<double> probs(t * v);
  auto lv = logits.data();
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) throw InputError("cross_entropy: target id out of range");
    double top = lv[i * v];
    for (std::size_t j = 1; j < v; ++j) top = std::max(top, lv[i * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(lv[i * v + j] - top);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += std::log(z) + top - lv[i * v + targets[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(t));
  std::vector<int> target_copy(targets.begin(), targets.end());
  detail::record(out, {&logits}, [logits, out, t, v, probs = std::move(probs), target_copy = std::move(target_copy)]() mutable {
    if (!out.has_grad()) return;
    const double g = out.grad()[0] / static_cast<double>(t);
    auto gl = logits.grad();
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
      gl[i * v + target_copy[i]] -= g;
    }
  });
  return out;
}

// Rescales each row to unit sum.
inline Tensor row_normalize(const Tensor& a) {
  const std::size_t n = a.cols();
  const std::size_t m = a.numel() / n;
  Tensor out(a.shape());
  std::vector<double> sums(m, 0.0);
  auto av = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) sums[i] += av[i * n + j];
    if (!(sums[i] > 0.0)) throw DegenerateError("row " + std::to_string(i) + " has no surviving mass to renormalize");
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = av[i * n + j] / sums[i];
  }
  detail::record(out, {&a}, [a, out, m, n, sums = std::move(sums)]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto y = out.data();
    auto ga = a.grad();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += (go[i * n + j] - dot) / sums[i];
    }
  });
  return out;
}

// Relaxed-Bernoulli gate per cell: sigmoid((logit(p) + noise) / tau), where p
// are probabilities in [0,1] and noise is logistic. Cells with p clamped to
// the boundary pass no gradient to p.
inline Tensor relaxed_bernoulli_gate(const Tensor& probs, const Tensor& logistic_noise, double tau) {
  detail::require_same_shape(probs, logistic_noise, "relaxed_bernoulli_gate");
  if (!(tau > 0.0)) throw ConfigError("relaxed_bernoulli_gate: temperature must be positive");
  constexpr double kEps = 1e-12;
  Tensor out(probs.shape());
  auto pv = probs.data();
  auto nv = logistic_noise.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double p = std::clamp(pv[i], kEps, 1.0 - kEps);
    const double z = (std::log(p) - std::log1p(-p) + nv[i]) / tau;
    o[i] = 1.0 / (1.0 + std::exp(-z));
  }
  detail::record(out, {&probs}, [probs, out, tau]() mutable {
    if (!out.has_grad()) return;
    auto go = out.grad();
    auto y = out.data();
    auto pv = probs.data();
    auto gp = probs.grad();
    for (std::size_t i = 0; i < go.size(); ++i) {
      const double p = pv[i];
      if (p <= kEps || p >= 1.0 - kEps) continue;
      gp[i] += go[i] * y[i] * (1.0 - y[i]) / tau * (1.0 / p + 1.0 / (1.0 - p));
    }
  });
  return out;
}

// Multi-head masked attention over a packed batch in one node. Example e
// owns query rows [qoff_e, qoff_e + q_lengths[e]) and key/value rows
// [koff_e, koff_e + k_lengths[e]); head h owns columns [h*dh, (h+1)*dh). The
// P prefix rows of prefix_keys/prefix_values precede every example's keys.
// masks[e] is [q_lengths[e], P + k_lengths[e]]. Numerically this is the
// per-head composition concat -> matmul_nt -> scale -> masked_softmax ->
// matmul, without the intermediate nodes.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& prefix_keys,
                                   const Tensor& prefix_values, const std::vector<Tensor>& masks,
                                   const std::vector<std::size_t>& q_lengths, const std::vector<std::size_t>& k_lengths,
                                   std::size_t heads, std::vector<Tensor>* probs_out = nullptr) {
  using Strided = Eigen::Map<const detail::RowMatrix, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<detail::RowMatrix, 0, Eigen::OuterStride<>>;
  detail::require_rank2(q, "multi_head_attention");
  detail::require_same_shape(k, v, "multi_head_attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0 || k.cols() != d) throw DimensionError("multi_head_attention: bad head split");
  const std::size_t dh = d / heads;
  const std::size_t p = prefix_keys.defined() ? prefix_keys.rows() : 0;
  if (p > 0 && (prefix_keys.cols() != d || !prefix_values.defined() || prefix_values.rows() != p))
    throw DimensionError("multi_head_attention: prefix shape mismatch");
  if (masks.size() != q_lengths.size() || k_lengths.size() != q_lengths.size())
    throw DimensionError("multi_head_attention: batch bookkeeping mismatch");
  std::size_t q_total = 0, k_total = 0;
  for (std::size_t e = 0; e < q_lengths.size(); ++e) {
    if (masks[e].rank() != 2 || masks[e].dim(0) != q_lengths[e] || masks[e].dim(1) != p + k_lengths[e])
      throw DimensionError("attention mask " + shape_str(masks[e].shape()) + " does not match [" +
                           std::to_string(q_lengths[e]) + ", " + std::to_string(p + k_lengths[e]) + "]");
    q_total += q_lengths[e];
    k_total += k_lengths[e];
  }
  if (q_total != q.rows() || k_total != k.rows()) throw DimensionError("multi_head_attention: packed lengths mismatch");

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({q_total, d});
  std::vector<detail::RowMatrix> probs(q_lengths.size() * heads);
  detail::RowMatrix keys, values;
  std::size_t qoff = 0, koff = 0;
  for (std::size_t e = 0; e < q_lengths.size(); ++e) {
    const auto tq = static_cast<Eigen::Index>(q_lengths[e]);
    const auto tk = static_cast<Eigen::Index>(k_lengths[e]);
    const auto cols = static_cast<Eigen::Index>(p) + tk;
    auto mv = masks[e].data();
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      keys.resize(cols, w);
      values.resize(cols, w);
      if (p > 0) {
        keys.topRows(p) = Strided(prefix_keys.data().data() + c0, Eigen::Index(p), w, Eigen::OuterStride<>(d));
        values.topRows(p) = Strided(prefix_values.data().data() + c0, Eigen::Index(p), w, Eigen::OuterStride<>(d));
      }
      keys.bottomRows(tk) = Strided(k.data().data() + koff * d + c0, tk, w, Eigen::OuterStride<>(d));
      values.bottomRows(tk) = Strided(v.data().data() + koff * d + c0, tk, w, Eigen::OuterStride<>(d));
      Strided qh(q.data().data() + qoff * d + c0, tq, w, Eigen::OuterStride<>(d));
      detail::RowMatrix& a = probs[e * heads + h];
      a.noalias() = (qh * keys.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < tq; ++i) {
        double top = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (Eigen::Index j = 0; j < cols; ++j)
          if (mv[i * cols + j] != 0.0) {
            any = true;
            top = std::max(top, a(i, j));
          }
        if (!any) throw DegenerateError("multi_head_attention: row " + std::to_string(i) + " is fully masked");
        double z = 0.0;
        for (Eigen::Index j = 0; j < cols; ++j) {
          const double ex = std::exp(a(i, j) + (mv[i * cols + j] == 0.0 ? kMaskedLogit : 0.0) - top);
          a(i, j) = ex;
          z += ex;
        }
        for (Eigen::Index j = 0; j < cols; ++j) a(i, j) = mv[i * cols + j] == 0.0 ? 0.0 : a(i, j) / z;
      }
      StridedMut(out.data().data() + qoff * d + c0, tq, w, Eigen::OuterStride<>(d)).noalias() = a * values;
      if (probs_out != nullptr)
        probs_out->push_back(Tensor({q_lengths[e], static_cast<std::size_t>(cols)},
                                    std::vector<double>(a.data(), a.data() + a.size())));
    }
    qoff += q_lengths[e];
    koff += k_lengths[e];
  }

  Tape* tape = active_tape();
  const bool needs = tape != nullptr && (q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                                         (p > 0 && (prefix_keys.requires_grad() || prefix_values.requires_grad())));
  if (!needs) return out;
  out.set_requires_grad(true);
  tape->record([q, k, v, prefix_keys, prefix_values, out, q_lengths, k_lengths, heads, d, dh, p, inv_sqrt,
                probs = std::move(probs)]() mutable {
    if (!out.has_grad()) return;
    const auto w = static_cast<Eigen::Index>(dh);
    const auto stride = Eigen::OuterStride<>(d);
    const bool g_pref = p > 0 && (prefix_keys.requires_grad() || prefix_values.requires_grad());
    detail::RowMatrix keys, values, d_attn, d_keys, d_values;
    std::size_t qoff = 0, koff = 0;
    for (std::size_t e = 0; e < q_lengths.size(); ++e) {
      const auto tq = static_cast<Eigen::Index>(q_lengths[e]);
      const auto tk = static_cast<Eigen::Index>(k_lengths[e]);
      const auto cols = static_cast<Eigen::Index>(p) + tk;
      for (std::size_t h = 0; h < heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh);
        keys.resize(cols, w);
        values.resize(cols, w);
        if (p > 0) {
          keys.topRows(p) = Strided(prefix_keys.data().data() + c0, Eigen::Index(p), w, stride);
          values.topRows(p) = Strided(prefix_values.data().data() + c0, Eigen::Index(p), w, stride);
        }
        keys.bottomRows(tk) = Strided(k.data().data() + koff * d + c0, tk, w, stride);
        values.bottomRows(tk) = Strided(v.data().data() + koff * d + c0, tk, w, stride);
        Strided qh(q.data().data() + qoff * d + c0, tq, w, stride);
        Strided g_out(out.grad().data() + qoff * d + c0, tq, w, stride);
        const detail::RowMatrix& a = probs[e * heads + h];
        d_attn.noalias() = g_out * values.transpose();
        for (Eigen::Index i = 0; i < tq; ++i) {
          const double dot = a.row(i).dot(d_attn.row(i));
          for (Eigen::Index j = 0; j < cols; ++j) d_attn(i, j) = a(i, j) * (d_attn(i, j) - dot) * inv_sqrt;
        }
        if (q.requires_grad())
          StridedMut(q.grad().data() + qoff * d + c0, tq, w, stride).noalias() += d_attn * keys;
        if (k.requires_grad() || g_pref) d_keys.noalias() = d_attn.transpose() * qh;
        if (v.requires_grad() || g_pref) d_values.noalias() = a.transpose() * g_out;
        if (k.requires_grad())
          StridedMut(k.grad().data() + koff * d + c0, tk, w, stride) += d_keys.bottomRows(tk);
        if (v.requires_grad())
          StridedMut(v.grad().data() + koff * d + c0, tk, w, stride) += d_values.bottomRows(tk);
        if (p > 0 && prefix_keys.requires_grad())
          StridedMut(prefix_keys.grad().data() + c0, Eigen::Index(p), w, stride) += d_keys.topRows(p);
        if (p > 0 && prefix_values.requires_grad())
          StridedMut(prefix_values.grad().data() + c0, Eigen::Index(p), w, stride) += d_values.topRows(p);
      }
      qoff += q_lengths[e];
      koff += k_lengths[e];
    }
  });
  return out;
}

}  // namespace dpt
