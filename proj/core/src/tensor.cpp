#include "pointcaps/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace pointcaps {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<real> data,
                                              bool requires_grad) {
  for (int64_t e : shape) {
    if (e <= 0) {
      throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
  }
  const int64_t n = shape_numel(shape);
  if (static_cast<int64_t>(data.size()) != n) {
    std::ostringstream os;
    os << "tensor data size " << data.size() << " does not match shape " << shape_str(shape);
    throw ShapeError(os.str());
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 1) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

void TensorImpl::accumulate(const std::vector<real>& g) {
  if (grad.empty()) grad.assign(data.size(), real(0));
  for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void TensorImpl::accumulate_at(int64_t index, real g) {
  if (grad.empty()) grad.assign(data.size(), real(0));
  grad[static_cast<size_t>(index)] += g;
}

void ensure_finite(const std::vector<real>& data, const char* op_name) {
  for (real v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name) + " produced a non-finite value");
    }
  }
}

int64_t leading_count(const Shape& shape, int trailing) {
  if (static_cast<int>(shape.size()) < trailing) {
    std::ostringstream os;
    os << "expected at least " << trailing << " axes, got shape " << shape_str(shape);
    throw ShapeError(os.str());
  }
  int64_t n = 1;
  for (size_t i = 0; i + trailing < shape.size(); ++i) n *= shape[i];
  return n;
}

void record_op(const std::shared_ptr<TensorImpl>& out, bool any_input_grad,
               std::function<void()> backward) {
  Tape* tape = Tape::current();
  if (tape == nullptr || !any_input_grad) return;
  out->requires_grad = true;
  out->producer = tape;
  tape->record(std::move(backward));
}

}  // namespace detail

Tensor Tensor::wrap(std::shared_ptr<detail::TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<real> data(static_cast<size_t>(shape_numel(shape)), real(0));
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  std::vector<real> data(static_cast<size_t>(shape_numel(shape)), value);
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<real> data, bool requires_grad) {
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, real low, real high, std::mt19937_64& rng,
                       bool requires_grad) {
  std::uniform_real_distribution<real> dist(low, high);
  std::vector<real> data(static_cast<size_t>(shape_numel(shape)));
  for (real& v : data) v = dist(rng);
  return wrap(make_impl(std::move(shape), std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!defined()) throw ContractError("use of an undefined tensor");
  return impl_->shape;
}

int64_t Tensor::extent(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis out of range for shape " + shape_str(s));
  }
  return s[axis];
}

int64_t Tensor::size() const { return shape_numel(shape()); }

const std::vector<real>& Tensor::values() const {
  if (!defined()) throw ContractError("use of an undefined tensor");
  return impl_->data;
}

real Tensor::item() const {
  if (!is_scalar()) {
    throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::vector<real>& Tensor::values_mut() {
  if (!defined()) throw ContractError("use of an undefined tensor");
  if (impl_->producer != nullptr) {
    throw ContractError("in-place mutation of a tape-produced tensor is not allowed");
  }
  return impl_->data;
}

bool Tensor::requires_grad() const { return defined() && impl_->requires_grad; }

bool Tensor::has_grad() const { return defined() && impl_->has_grad(); }

const std::vector<real>& Tensor::grad() const {
  if (!has_grad()) {
    throw ContractError("no gradient has been accumulated for this tensor");
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (defined()) impl_->grad.clear();
}

Tensor Tensor::detached() const {
  if (!defined()) throw ContractError("use of an undefined tensor");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;  // value copy; history and grad flag dropped
  return wrap(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detached();
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

void Tape::record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

void Tape::clear() { records_.clear(); }

Tape* Tape::current() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (loss.impl()->producer != this) {
    throw TapeError("backward() on a value that was not recorded on this tape");
  }
  loss.impl()->grad.assign(1, real(1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }

NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace pointcaps
