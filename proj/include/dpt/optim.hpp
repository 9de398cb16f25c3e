#pragma once

#include <cmath>
#include <vector>

#include "dpt/tensor.hpp"

namespace dpt {

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed list of parameter tensors.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig config = {}) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      const double* g = p.grad().data();
      double* x = p.data().data();
      double* m = m_[i].data();
      double* v = v_[i].data();
      const double b1 = config_.beta1, b2 = config_.beta2, lr = config_.lr, eps = config_.eps;
      const double inv_c1 = 1.0 / c1, inv_c2 = 1.0 / c2;
      const std::size_t n = p.numel();
      for (std::size_t j = 0; j < n; ++j) {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        x[j] -= lr * (m[j] * inv_c1) / (std::sqrt(v[j] * inv_c2) + eps);
      }
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace dpt
