#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpg {

// Invalid sizes, incompatible shapes, bad hyperparameters.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files, out-of-range labels, non-finite values in inputs.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse (e.g. backward on a non-scalar).
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Broken internal assumption; a bug if it ever fires.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  long total() const { return static_cast<long>(n) * c * h * w; }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

template <typename T>
struct TensorImpl {
  Shape4 shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first needed; same length as value once allocated
  bool requires_grad = false;
};

// Dense rank-4 array handle. Copies share the underlying buffer, so a tensor
// keeps its identity (and its gradient) across the computation graph.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape4 s) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = s;
    t.impl_->value.assign(static_cast<size_t>(s.total()), T(0));
    return t;
  }

  static Tensor full(Shape4 s, T v) {
    Tensor t = zeros(s);
    for (auto& e : t.impl_->value) e = v;
    return t;
  }

  static Tensor from(Shape4 s, std::vector<T> v) {
    if (static_cast<long>(v.size()) != s.total())
      throw ConfigError("tensor data length " + std::to_string(v.size()) +
                        " does not match shape " + s.str());
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = s;
    t.impl_->value = std::move(v);
    return t;
  }

  static Tensor scalar(T v) { return full({1, 1, 1, 1}, v); }

  bool defined() const { return impl_ != nullptr; }
  const Shape4& shape() const { return impl_->shape; }
  long size() const { return impl_->shape.total(); }

  T* data() { return impl_->value.data(); }
  const T* data() const { return impl_->value.data(); }

  T& at(int n, int c, int y, int x) {
    const Shape4& s = impl_->shape;
    return impl_->value[((static_cast<long>(n) * s.c + c) * s.h + y) * s.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    const Shape4& s = impl_->shape;
    return impl_->value[((static_cast<long>(n) * s.c + c) * s.h + y) * s.w + x];
  }

  T item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape().str());
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), T(0));
  }

  T* grad() {
    ensure_grad();
    return impl_->grad.data();
  }
  const std::vector<T>& grad_vector() const { return impl_->grad; }

  void clear_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>(*impl_);
    return t;
  }

  bool finite() const {
    for (T v : impl_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Records one backward rule per forward op, in execution order. backward()
// replays the rules once, in reverse, then discards them. A tape and the
// tensors recorded on it belong to a single training context.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    static thread_local Tape* a = nullptr;
    return a;
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(Tensor<T>& loss) {
    if (loss.size() != 1)
      throw UsageError("backward requires a scalar loss, got shape " + loss.shape().str());
    if (nodes_.empty()) throw UsageError("backward on an empty tape");
    loss.ensure_grad();
    loss.grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

// RAII activation of a tape for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(Tape<T>::active()) { Tape<T>::active() = &t; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Named learnable tensor. Bias and batch-norm parameters are exempt from
// weight decay.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool weight_decay_exempt = false;
};

namespace detail {

template <typename T>
inline bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace mpg
