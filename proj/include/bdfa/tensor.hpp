#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bdfa/error.hpp"

namespace bdfa {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

// One recorded operation on the tape. `backward` receives the gradient of
// the node's output and accumulates into the gradients of `inputs`.
template <typename T>
struct TapeNode {
  std::string op;
  std::vector<Tensor<T>> inputs;
  std::function<void(std::span<const T>)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty when no gradient has been produced
  bool requires_grad = false;
  bool backward_done = false;
  std::shared_ptr<TapeNode<T>> node;  // null for leaves
};

}  // namespace detail

// Dense row-major array with reverse-mode autodiff. A Tensor is a shared
// handle: copies alias the same storage, like a framework tensor. Use
// clone() for an independent copy and detach() to drop the tape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const T> data() const { return impl().data; }
  std::span<T> mutable_data() { return impl().data; }
  T item() const;
  T operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return impl().node == nullptr; }
  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const;
  // Clears this tensor's gradient and re-arms backward() on it.
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  // Internals used by ops; not part of the user-facing surface.
  detail::TensorImpl<T>& impl() const;
  std::vector<T>& grad_buffer() const;
  static Tensor from_op(Shape shape, std::vector<T> data, std::string op,
                        std::vector<Tensor> inputs,
                        std::function<void(std::span<const T>)> backward);

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

// Populates grad of every requires_grad tensor reachable from `loss`.
// Leaf gradients accumulate across calls; call zero_grad() to reset them.
template <typename T>
void backward(Tensor<T>& loss);

// Convert precision; the result is a leaf with no gradient.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.numel());
  auto src = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(src[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

template <typename T>
bool all_finite(std::span<const T> values);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace bdfa
