#include "afd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace afd {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {
void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
}
}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values.assign(shape_numel(shape), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({1}, value, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->values.size(); }

std::span<const double> Tensor::values() const { return impl_->values; }
std::span<double> Tensor::mutable_values() { return impl_->values; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->values[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { impl_->requires_grad = flag; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.assign(impl_->values.size(), 0.0); }
void Tensor::clear_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), impl_->values, false); }

Tensor Tensor::clone() const {
  auto t = from(shape(), impl_->values, impl_->requires_grad);
  t.impl_->grad = impl_->grad;
  return t;
}

// --- tape --------------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(Node node) { nodes_.push_back(std::move(node)); }

void Tape::run_backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward(): loss does not depend on any tensor that requires grad");
  }
  if (nodes_.empty()) throw std::logic_error("backward(): tape is empty");

  auto& root = *loss.impl();
  if (root.grad.empty()) root.grad.assign(1, 0.0);
  root.grad[0] += 1.0;

  // Detach the node list first so a throwing backward rule cannot leave a
  // half-replayed tape behind.
  std::vector<Node> nodes;
  nodes.swap(nodes_);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    for (auto& in : it->inputs) {
      if (in->requires_grad && in->grad.empty()) in->grad.assign(in->values.size(), 0.0);
    }
    it->backward();
    for (auto& in : it->inputs) {
      for (double g : in->grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient during backward");
      }
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(Tape::current().grad_enabled_) { Tape::current().grad_enabled_ = false; }
NoGradGuard::~NoGradGuard() { Tape::current().grad_enabled_ = previous_; }

thread_local BranchProbe* BranchProbe::active_ = nullptr;
BranchProbe::BranchProbe() : previous_(active_) { active_ = this; }
BranchProbe::~BranchProbe() { active_ = previous_; }

void backward(const Tensor& loss) { Tape::current().run_backward(loss); }

}  // namespace afd
