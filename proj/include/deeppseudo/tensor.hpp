#pragma once
// Dense row-major tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap shared handle onto flat storage (shape, values, and an
// optional gradient buffer). Operations in ops.hpp create fresh tensors and,
// while a GradientTape is active on the current thread, append a backward
// closure to it. Replaying the tape newest-first accumulates d(loss)/d(input)
// into every participating tensor exactly once per use.
//
// Scalar type is a template parameter: double for finite-difference test
// builds, float for training.

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deeppseudo {

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IndexError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class DataError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class IoError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
struct TensorStorage {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first touched by backward
  bool requires_grad = false;
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from_data(std::move(shape), {}, /*fill=*/true, S(0));
  }

  static Tensor full(Shape shape, S v) {
    return from_data(std::move(shape), {}, /*fill=*/true, v);
  }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    return from_data(std::move(shape), std::move(data), /*fill=*/false, S(0));
  }

  static Tensor scalar(S v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(st_); }

  const Shape& shape() const { return st_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(st_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(st_->value.size()); }

  std::int64_t dim(std::int64_t i) const { return st_->shape[static_cast<std::size_t>(i)]; }

  std::int64_t rows() const {
    require_rank(2, "rows()");
    return st_->shape[0];
  }
  std::int64_t cols() const {
    require_rank(2, "cols()");
    return st_->shape[1];
  }

  S* data() { return st_->value.data(); }
  const S* data() const { return st_->value.data(); }
  std::vector<S>& values() { return st_->value; }
  const std::vector<S>& values() const { return st_->value; }

  S& at(std::int64_t i) { return st_->value[static_cast<std::size_t>(i)]; }
  S at(std::int64_t i) const { return st_->value[static_cast<std::size_t>(i)]; }
  S& at(std::int64_t r, std::int64_t c) {
    return st_->value[static_cast<std::size_t>(r * cols() + c)];
  }
  S at(std::int64_t r, std::int64_t c) const {
    return st_->value[static_cast<std::size_t>(r * cols() + c)];
  }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    st_->requires_grad = b;
    return *this;
  }

  // Gradient buffer, allocated as zeros on first access.
  std::vector<S>& grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->value.size(), S(0));
    return st_->grad;
  }
  const std::vector<S>* grad_if() const {
    return st_->grad.empty() ? nullptr : &st_->grad;
  }
  void zero_grad() {
    if (!st_->grad.empty()) st_->grad.assign(st_->value.size(), S(0));
  }

  // Value copy without gradient tracking.
  Tensor detach() const {
    Tensor t;
    t.st_ = std::make_shared<TensorStorage<S>>();
    t.st_->shape = st_->shape;
    t.st_->value = st_->value;
    return t;
  }

  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

  void require_rank(std::int64_t r, const char* what) const {
    if (rank() != r) {
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) +
                       " tensor, got shape " + shape_str(st_->shape));
    }
  }

 private:
  static Tensor from_data(Shape shape, std::vector<S> data, bool fill, S v) {
    for (auto d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    auto st = std::make_shared<TensorStorage<S>>();
    st->shape = std::move(shape);
    if (fill) {
      st->value.assign(n, v);
    } else {
      if (data.size() != n) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(st->shape));
      }
      st->value = std::move(data);
    }
    Tensor t;
    t.st_ = std::move(st);
    return t;
  }

  std::shared_ptr<TensorStorage<S>> st_;
};

// Ordered record of executed operations. Append-only during a forward pass;
// cleared explicitly between steps. The append order is a topological order of
// the forward graph, so a single reverse replay propagates every gradient
// exactly once per recorded use.
template <typename S>
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // RAII activation on the current thread. Tapes never cross threads; nested
  // scopes restore the previous tape.
  class Scope {
   public:
    explicit Scope(GradientTape& t) : prev_(active_tape()) { active_tape() = &t; }
    ~Scope() { active_tape() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    GradientTape* prev_;
  };

  static GradientTape* active() { return active_tape(); }

  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Seeds d(output)/d(output) = seed and replays newest-first. The seed lets a
  // caller fold a batch-mean factor into one backward pass.
  void backward(Tensor<S>& output, S seed = S(1)) {
    if (output.numel() != 1) {
      throw ShapeError("backward() expects a scalar output, got shape " +
                       shape_str(output.shape()));
    }
    output.grad()[0] += seed;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  static GradientTape*& active_tape() {
    thread_local GradientTape* active = nullptr;
    return active;
  }

  std::vector<std::function<void()>> nodes_;
};

namespace detail {

// True when an active tape should record: some input on the grad path.
template <typename S>
inline bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
  if (GradientTape<S>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

}  // namespace deeppseudo
