#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace afd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when an operation receives operands of incompatible shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward or backward pass produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Dense row-major float64 array with an optional gradient.
///
/// Copies share storage: two Tensor handles built from the same tensor refer
/// to the same values and the same gradient. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  Tensor detach() const;
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable operations for one forward pass.
///
/// Each thread owns one tape. Operations record themselves when grad mode is
/// on and at least one input requires a gradient. backward() replays the
/// records in reverse and then empties the tape.
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  static Tape& current();

  void record(Node node);
  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  bool grad_enabled() const { return grad_enabled_; }

  void run_backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

/// Disables recording on the current thread's tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// While alive, piecewise-defined ops on this thread fold the branch each
/// element takes into a running digest. Two evaluations with equal digests
/// stayed on the same smooth piece of the function.
class BranchProbe {
 public:
  BranchProbe();
  ~BranchProbe();
  BranchProbe(const BranchProbe&) = delete;
  BranchProbe& operator=(const BranchProbe&) = delete;

  std::uint64_t digest() const { return digest_; }

  /// Records one branch decision if a probe is active on this thread.
  static void note(bool taken) {
    if (active_ != nullptr) active_->mix(taken);
  }

 private:
  void mix(bool taken) { digest_ = (digest_ ^ (taken ? 0x9E3779B97F4A7C15ULL : 0x632BE59BD9B4E019ULL)) * 0x100000001B3ULL; }

  std::uint64_t digest_ = 0xCBF29CE484222325ULL;
  BranchProbe* previous_;
  static thread_local BranchProbe* active_;
};

/// Populates grad() of every requires_grad tensor reachable from `loss`.
/// Gradients accumulate into existing grad buffers.
void backward(const Tensor& loss);

}  // namespace afd
