// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a cheap handle to a shared Node. Ops return new tensors and,
// when any input requires a gradient, record a backward closure on the result
// node. backward() walks the recorded graph in reverse topological order and
// then frees it, so each forward pass builds a fresh tape.
//
// Everything is templated on the scalar type: float for training, double for
// finite-difference checks. Both are explicitly instantiated in ndcore.cpp.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "pmtmae/errors.hpp"

namespace pmt::nd {

using Shape = std::vector<std::size_t>;

// Tensor storage starts on a 64-byte boundary. Vectorized reductions peel
// leading elements up to the first aligned address, so a fixed base alignment
// keeps summation order, and therefore every result bit, independent of where
// the allocator happens to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

template <class T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Lazily allocates and returns the gradient buffer.
  Buffer<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // Mutable access is for parameter updates and test perturbations only.
  std::span<T> mutable_data() { return node_->value; }
  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values without graph history.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread while alive. Ops still
// compute values but never attach backward closures.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Builds an op result. When recording is on and any parent requires a
// gradient, the result joins the graph with `backward` as its closure.
// Module code uses this to define fused ops with hand-written gradients.
template <class T>
Tensor<T> make_result(Shape shape, Buffer<T> value, std::vector<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward);

template <class T>
void backward(const Tensor<T>& loss);

// ---- elementwise -----------------------------------------------------------
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& a, T s);
template <class T> Tensor<T> gelu(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);

// ---- reductions --------------------------------------------------------------
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);

// ---- linear algebra ----------------------------------------------------------
// a: m×k, b: k×n.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// x: rows×in, w: in×out, b: out (may be undefined). Rank of x may exceed 2;
// leading axes are flattened into rows.
template <class T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- normalization / probabilities -------------------------------------------
template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
template <class T> Tensor<T> log_softmax(const Tensor<T>& x);  // last axis
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// ---- structural ---------------------------------------------------------------
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Concatenates along the last axis; leading dims must agree.
template <class T> Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
// Stacks 2-D tensors with equal column counts along rows.
template <class T> Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
// Selects rows of a 2-D tensor (repeats allowed); backward scatter-adds.
template <class T> Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
// Rows are grouped in consecutive segments of `segment` rows; reduces each
// segment to one row.
template <class T> Tensor<T> segment_max(const Tensor<T>& x, std::size_t segment);
template <class T> Tensor<T> segment_mean(const Tensor<T>& x, std::size_t segment);
// segment_max(linear(x, w, b), segment) without materializing the product;
// backward touches only the winning rows.
template <class T>
Tensor<T> linear_segment_max(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t segment);

// Multi-head scaled dot-product attention over `batch` sequences of length
// `seq`, laid out as (batch·seq)×C rows. Heads split C into equal slices.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t batch, std::size_t seq, std::size_t heads);

}  // namespace pmt::nd
