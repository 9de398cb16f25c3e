#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

struct GradCheckOptions {
  double step = 1e-5;
  // Total number of randomly chosen scalar entries to probe; 0 probes all.
  std::size_t probes = 0;
  std::uint64_t seed = 7;
  // Denominator floor of the relative error, so entries whose true gradient
  // is zero compare absolutely against this scale.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of loss_fn() with respect to `inputs`
// against central finite differences. loss_fn must be deterministic.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                                 const GradCheckOptions& opts = {}) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

  std::vector<std::pair<std::size_t, std::size_t>> sites;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) sites.emplace_back(i, j);
  if (opts.probes > 0 && opts.probes < sites.size()) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(sites.begin(), sites.end(), rng);
    sites.resize(opts.probes);
  }

  GradCheckResult result;
  NoGradScope no_grad;
  for (auto [i, j] : sites) {
    double& x = inputs[i][j];
    const double saved = x;
    x = saved + opts.step;
    const double up = loss_fn().item();
    x = saved - opts.step;
    const double down = loss_fn().item();
    x = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = analytic[i][j];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
    ++result.checked;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

}  // namespace dpt
