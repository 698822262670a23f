#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pointcaps/errors.hpp"

namespace pointcaps {

// Scalar type used throughout. Double keeps finite-difference checks tight;
// the code does not assume anything float would break, but only the double
// configuration is exercised by the test suites.
using real = double;

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // lazily allocated by the first accumulation
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the op creating this value

  void accumulate(const std::vector<real>& g);
  void accumulate_at(int64_t index, real g);
  bool has_grad() const { return !grad.empty(); }
};

}  // namespace detail

// Value handle over a reference-counted buffer. Tensors are immutable once
// created except through two sanctioned paths: recorded ops producing new
// tensors, and in-place parameter updates between forward/backward passes
// (optimizer steps, checkpoint loads) via values_mut().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> data, bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);
  // Uniform on [low, high); the usual init is uniform(shape, -s, s) with
  // s = 1/sqrt(fan_in).
  static Tensor uniform(Shape shape, real low, real high, std::mt19937_64& rng,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int64_t extent(int axis) const;
  int64_t size() const;
  bool is_scalar() const { return defined() && shape().empty(); }

  const std::vector<real>& values() const;
  real item() const;  // scalar tensors only

  // In-place access for leaf updates. Rejected for tape-produced tensors so
  // recorded history can never be silently invalidated.
  std::vector<real>& values_mut();

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<real>& grad() const;  // throws if nothing accumulated yet
  void zero_grad();

  // Value snapshot with history and the gradient flag dropped.
  Tensor detached() const;
  // Deep copy of the values (fresh leaf).
  Tensor clone() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape: an ordered list of backward closures recorded by ops.
// One tape per thread of forward work; replaying it in reverse order fills
// the .grad() of every requires_grad tensor that contributed to the loss.
// The tape never truncates itself; clear() is the only way to drop records.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays all records in reverse.
  // The loss must be a scalar recorded on this tape.
  void backward(const Tensor& loss);

  void record(std::function<void()> fn);
  void clear();
  size_t size() const { return records_.size(); }

  // Tape active on the current thread, or nullptr when not recording.
  static Tape* current();

 private:
  friend class TapeScope;
  friend class NoGradScope;
  std::vector<std::function<void()>> records_;
};

// Makes a tape the active recorder on this thread for the enclosing scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording (ops behave as pure functions) for the enclosing scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

// Shared by every op: checks the freshly computed buffer for NaN/Inf and
// throws NumericError naming the op.
void ensure_finite(const std::vector<real>& data, const char* op_name);

// Product of all extents before the trailing `trailing` axes.
int64_t leading_count(const Shape& shape, int trailing);

// Marks `out` as produced on the active tape and records the closure, but
// only when recording is on and some input requires grad.
void record_op(const std::shared_ptr<TensorImpl>& out, bool any_input_grad,
               std::function<void()> backward);

}  // namespace detail

}  // namespace pointcaps
