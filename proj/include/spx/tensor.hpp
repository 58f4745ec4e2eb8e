#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "spx/core.hpp"
#include "spx/random.hpp"

namespace spx {

// Storage for one tensor. Values are immutable after construction except
// through the optimizer (which owns its parameters) and grad accumulation.
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Reverse-mode tape. Operations append their backward closure as they are
// built, so entry order is already topological; backward() replays the
// entries in reverse. One tape per forward pass; independent tapes on
// different threads share nothing.
template <typename T>
class Tensor;

template <typename T>
class Tape {
 public:
  // RAII activation of this tape on the current thread. Ops record onto the
  // active tape; with no active tape they run forward-only.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active_ptr()) { active_ptr() = &t; }
    ~Scope() { active_ptr() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* active() { return active_ptr(); }

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }

  // Seeds d(root)/d(root) = 1 and replays all recorded backward rules in
  // reverse order. Root must be a single-element tensor.
  void backward(const Tensor<T>& root);

 private:
  static Tape*& active_ptr() {
    static thread_local Tape* active = nullptr;
    return active;
  }
  std::vector<std::function<void()>> entries_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static Tensor filled(Shape shape, T v, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value.assign(static_cast<std::size_t>(numel(t.d_->shape)), v);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    check(static_cast<std::int64_t>(values.size()) == numel(shape),
          "Tensor::from: data length " + std::to_string(values.size()) +
              " does not match shape " + shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, Pcg32& rng, T stddev = T(1),
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.d_->value) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor rand_uniform(Shape shape, Pcg32& rng, T lo, T hi,
                             bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.d_->value)
      v = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(d_->value.size()); }

  std::vector<T>& data() { return d_->value; }
  const std::vector<T>& data() const { return d_->value; }
  std::vector<T>& grad() { return d_->grad; }
  const std::vector<T>& grad() const { return d_->grad; }

  bool requires_grad() const { return d_->requires_grad; }
  // Does not allocate the grad buffer; allocation happens on first
  // accumulation (or zero_grad), so forward-only intermediates stay cheap.
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }
  void zero_grad() {
    if (d_->requires_grad) d_->grad.assign(d_->value.size(), T(0));
  }
  // Gradient entry or 0 when the buffer was never touched by backward.
  T grad_or_zero(std::size_t i) const {
    return d_->grad.empty() ? T(0) : d_->grad[i];
  }

  // Element access for tests and small-scale code; hot loops use data().
  T& at(int i) { return d_->value[idx({i})]; }
  T& at(int i, int j) { return d_->value[idx({i, j})]; }
  T& at(int i, int j, int k) { return d_->value[idx({i, j, k})]; }
  T at(int i) const { return d_->value[idx({i})]; }
  T at(int i, int j) const { return d_->value[idx({i, j})]; }
  T at(int i, int j, int k) const { return d_->value[idx({i, j, k})]; }

  T grad_at(int i) const { return d_->grad[idx({i})]; }
  T grad_at(int i, int j) const { return d_->grad[idx({i, j})]; }
  T grad_at(int i, int j, int k) const { return d_->grad[idx({i, j, k})]; }

  const std::shared_ptr<TensorData<T>>& ptr() const { return d_; }

 private:
  std::size_t idx(std::initializer_list<int> ix) const {
    check(ix.size() == d_->shape.size(),
          "Tensor::at: rank mismatch for shape " + shape_str(d_->shape));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (int i : ix) {
      int extent = d_->shape[axis];
      check(i >= 0 && i < extent, "Tensor::at: index out of range");
      off = off * static_cast<std::size_t>(extent) + static_cast<std::size_t>(i);
      ++axis;
    }
    return off;
  }

  std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  check(root.defined() && root.size() == 1,
        "Tape::backward: root must be a scalar tensor");
  check(root.requires_grad(),
        "Tape::backward: root does not require gradients");
  root.ptr()->ensure_grad();
  root.ptr()->grad[0] = T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

// True when the result of an op over these inputs should be recorded.
// Undefined tensors (optional op arguments) are skipped.
template <typename T>
inline bool trace_enabled(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace spx
