#include "bdfa/tensor.hpp"

#include <cmath>
#include <unordered_set>

#include <fmt/format.h>

namespace bdfa {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_shape(const Shape& shape, std::size_t n) {
  if (shape.empty()) throw ShapeError("tensor: empty shape");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  if (shape_numel(shape) != n)
    throw ShapeError(fmt::format("tensor: shape {} needs {} values, got {}", shape_str(shape),
                                 shape_numel(shape), n));
}

}  // namespace

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  check_shape(shape, shape_numel(shape));
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  check_shape(shape, data.size());
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
detail::TensorImpl<T>& Tensor<T>::impl() const {
  if (!impl_) throw AutodiffError("tensor: use of undefined tensor");
  return *impl_;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl().data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw AutodiffError("set_requires_grad: only leaves can be toggled");
  impl().requires_grad = on;
  return *this;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (impl().grad.empty()) throw AutodiffError("grad: tensor has no gradient");
  return impl().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl().grad.clear();
  impl().backward_done = false;
}

template <typename T>
std::vector<T>& Tensor<T>::grad_buffer() const {
  auto& g = impl().grad;
  if (g.empty()) g.assign(numel(), T(0));
  return g;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorImpl<T>>();
  out.impl_->shape = shape();
  out.impl_->data = impl().data;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = is_leaf() && requires_grad();
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel())
    throw ShapeError("reshape: " + shape_str(shape()) + " -> " + shape_str(new_shape));
  Tensor self = *this;
  return from_op(std::move(new_shape), impl().data, "reshape", {self},
                 [self](std::span<const T> g) mutable {
                   auto& gi = self.grad_buffer();
                   for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                 });
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> data, std::string op,
                             std::vector<Tensor> inputs,
                             std::function<void(std::span<const T>)> backward_fn) {
  if (!all_finite<T>(data)) throw NonFiniteError(op + ": produced a non-finite value");
  Tensor out(std::move(shape), std::move(data));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    out.impl_->requires_grad = true;
    out.impl_->node = std::make_shared<detail::TapeNode<T>>(
        detail::TapeNode<T>{std::move(op), std::move(inputs), std::move(backward_fn)});
  }
  return out;
}

template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined()) throw AutodiffError("backward: undefined loss");
  if (loss.numel() != 1)
    throw AutodiffError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw AutodiffError("backward: loss is not on the tape");
  if (loss.impl().backward_done)
    throw AutodiffError("backward: already called on this loss; call zero_grad() first");

  // Reverse topological order via iterative post-order DFS.
  std::vector<Tensor<T>> order;
  std::unordered_set<const detail::TensorImpl<T>*> seen;
  std::vector<std::pair<Tensor<T>, std::size_t>> stack{{loss, 0}};
  seen.insert(&loss.impl());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    auto& node = t.impl().node;
    if (node && next < node->inputs.size()) {
      Tensor<T> child = node->inputs[next++];
      if (child.requires_grad() && seen.insert(&child.impl()).second)
        stack.emplace_back(child, 0);
    } else {
      order.push_back(t);
      stack.pop_back();
    }
  }

  for (auto& t : order)
    if (!t.is_leaf()) t.impl().grad.assign(t.numel(), T(0));
  loss.impl().grad.assign(1, T(1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& impl = it->impl();
    if (impl.node && impl.node->backward) impl.node->backward(impl.grad);
  }
  for (auto& t : order) {
    if (t.has_grad() && !all_finite<T>(t.grad()))
      throw NonFiniteError("backward: non-finite gradient after '" +
                           (t.is_leaf() ? std::string("leaf") : t.impl().node->op) + "'");
  }
  loss.impl().backward_done = true;
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);
template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);

}  // namespace bdfa
