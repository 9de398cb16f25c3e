#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpt/errors.hpp"

namespace dpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. Copies of a Tensor share storage (it is a
// handle); use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<Impl>()) {
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), fill);
  }

  Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
    if (values.size() != impl_->data.size())
      throw DimensionError("tensor of shape " + shape_str(impl_->shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    impl_->data = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const { return static_cast<bool>(impl_); }
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  // Matrix view helpers; rank-1 tensors act as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : impl_->shape[0]; }
  std::size_t cols() const { return impl_->shape.back(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zeroed accumulator on first use. The gradient buffer is
  // writable through a const handle, like the storage it belongs to.
  std::span<double> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  Tensor clone() const {
    Tensor out(shape(), impl_->data);
    return out;
  }

  bool all_finite() const {
    for (double v : impl_->data)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Ordered record of executed differentiable operations. Each entry is the
// backward closure of one op; execution order is a topological order, so
// replaying in reverse visits every node once after all of its consumers.
class Tape {
 public:
  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(Tensor loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss");
    if (!loss.requires_grad()) throw ContractError("loss is not connected to the tape");
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {
inline thread_local Tape* current_tape = nullptr;
}

inline Tape* active_tape() { return detail::current_tape; }

// Makes `tape` the recording target for ops on this thread while in scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::current_tape) { detail::current_tape = &tape; }
  ~TapeScope() { detail::current_tape = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording while in scope (inference, finite differences).
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::current_tape) { detail::current_tape = nullptr; }
  ~NoGradScope() { detail::current_tape = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

inline void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (tape == nullptr) throw ContractError("backward() called with no active tape");
  tape->backward(loss);
}

}  // namespace dpt
