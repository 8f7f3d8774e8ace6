#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bdfa/tensor.hpp"

// Differentiable tensor operations. Every op validates input shapes (throws
// ShapeError naming the op and the offending dims) and rejects non-finite
// inputs (NonFiniteError). Reductions accumulate in double.
namespace bdfa::ops {

// Element-wise, shapes must match exactly.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> relu(const Tensor<T>& a);

// Full reductions to shape [1].
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

// a: [M,K], b: [K,N] -> [M,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x: [N,in], weight: [out,in], bias: [out] or undefined -> [N,out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

// x: [N,C,H,W], weight: [O,C,KH,KW], bias: [O] or undefined -> [N,O,Ho,Wo]
// with Ho = (H + 2*pad - KH) / stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams params = {});

template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  std::vector<double> batch_mean;  // per channel, over (N,H,W)
  std::vector<double> batch_var;   // population variance
};

// Training-mode normalization with batch statistics; full derivative through
// the batch mean and variance. x: [N,C,H,W], gamma/beta: [C].
template <typename T>
BatchNormResult<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                     const Tensor<T>& beta, double eps);

// Inference-mode normalization with fixed statistics (affine-only derivative).
template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::span<const float> running_mean,
                           std::span<const float> running_var, double eps);

// Windows without padding: Ho = (H - kernel) / stride + 1. Max ties resolve to
// the first element in row-major window order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);
template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

// [N, ...] -> [N, prod(...)]
template <typename T> Tensor<T> flatten(const Tensor<T>& x);

// Mean over the batch of -log softmax(logits)[label]. logits: [N,K].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Mean of squared differences.
template <typename T> Tensor<T> mse(const Tensor<T>& y, const Tensor<T>& target);

// Per-channel statistics of x: [N,C,H,W] over (N,H,W). channel_std is the
// square root of the population variance; its derivative is taken as zero
// for a channel whose variance is exactly zero.
template <typename T> Tensor<T> channel_mean(const Tensor<T>& x);
template <typename T> Tensor<T> channel_std(const Tensor<T>& x);

}  // namespace bdfa::ops
