#include "bdfa/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace bdfa::ops {
namespace {

template <typename T>
void require_finite(const char* op, const Tensor<T>& t) {
  if (!all_finite<T>(t.data())) throw NonFiniteError(fmt::format("{}: non-finite input", op));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_str(a.shape()),
                                 shape_str(b.shape())));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(fmt::format("{}: {} must have rank {}, got {}", op, what, rank,
                                 shape_str(t.shape())));
}

// Accumulate `g` scaled element-wise into t's gradient if it participates.
template <typename T, typename F>
void accumulate(Tensor<T> t, std::size_t n, F&& value_at) {
  if (!t.requires_grad()) return;
  auto& gi = t.grad_buffer();
  for (std::size_t i = 0; i < n; ++i) gi[i] += value_at(i);
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[M,N] += A^T * B, A: [K,M], B: [K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0)) continue;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

struct ConvGeometry {
  std::size_t c, h, w, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return ho * wo; }
};

template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t p = g.cols();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) &&
                                jj < static_cast<long>(g.w);
            row[oi * g.wo + oj] = inside ? x[(ch * g.h + ii) * g.w + jj] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t p = g.cols();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((ch * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.ho; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wo; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            dx[(ch * g.h + ii) * g.w + jj] += row[oi * g.wo + oj];
          }
        }
      }
}

enum class PoolKind { max, avg };

template <typename T>
Tensor<T> pool2d(const char* op, PoolKind kind, const Tensor<T>& x, std::size_t kernel,
                 std::size_t stride) {
  require_rank(op, x, 4, "input");
  require_finite(op, x);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel == 0 || stride == 0 || kernel > h || kernel > w)
    throw ShapeError(fmt::format("{}: kernel {} stride {} invalid for input {}", op, kernel,
                                 stride, shape_str(x.shape())));
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const std::size_t planes = n * c;
  std::vector<T> out(planes * ho * wo);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? out.size() : 0);
  auto xd = x.data();
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = xd.data() + pl * h * w;
    for (std::size_t oi = 0; oi < ho; ++oi)
      for (std::size_t oj = 0; oj < wo; ++oj) {
        const std::size_t o = (pl * ho + oi) * wo + oj;
        if (kind == PoolKind::max) {
          std::size_t best = (oi * stride) * w + oj * stride;
          for (std::size_t ki = 0; ki < kernel; ++ki)
            for (std::size_t kj = 0; kj < kernel; ++kj) {
              const std::size_t idx = (oi * stride + ki) * w + oj * stride + kj;
              if (src[idx] > src[best]) best = idx;
            }
          out[o] = src[best];
          argmax[o] = pl * h * w + best;
        } else {
          double acc = 0;
          for (std::size_t ki = 0; ki < kernel; ++ki)
            for (std::size_t kj = 0; kj < kernel; ++kj)
              acc += src[(oi * stride + ki) * w + oj * stride + kj];
          out[o] = static_cast<T>(acc) * inv;
        }
      }
  }
  return Tensor<T>::from_op(
      {n, c, ho, wo}, std::move(out), op, {x},
      [x, kind, argmax = std::move(argmax), planes, h, w, ho, wo, kernel, stride,
       inv](std::span<const T> g) mutable {
        auto& gx = x.grad_buffer();
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
          return;
        }
        for (std::size_t pl = 0; pl < planes; ++pl)
          for (std::size_t oi = 0; oi < ho; ++oi)
            for (std::size_t oj = 0; oj < wo; ++oj) {
              const T v = g[(pl * ho + oi) * wo + oj] * inv;
              for (std::size_t ki = 0; ki < kernel; ++ki)
                for (std::size_t kj = 0; kj < kernel; ++kj)
                  gx[pl * h * w + (oi * stride + ki) * w + oj * stride + kj] += v;
            }
      });
}

// Per-channel mean / population variance over (N,H,W), in double.
template <typename T>
void channel_moments(const Tensor<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * hw);
  auto xd = x.data();
  mean.assign(c, 0.0);
  var.assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = xd.data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
    }
    mean[ch] = s / m;
    double v = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = xd.data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - mean[ch];
        v += d * d;
      }
    }
    var[ch] = v / m;
  }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  require_finite("add", a);
  require_finite("add", b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b},
                            [a, b](std::span<const T> g) {
                              accumulate(a, g.size(), [&](std::size_t i) { return g[i]; });
                              accumulate(b, g.size(), [&](std::size_t i) { return g[i]; });
                            });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  require_finite("sub", a);
  require_finite("sub", b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "sub", {a, b},
                            [a, b](std::span<const T> g) {
                              accumulate(a, g.size(), [&](std::size_t i) { return g[i]; });
                              accumulate(b, g.size(), [&](std::size_t i) { return -g[i]; });
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  require_finite("mul", a);
  require_finite("mul", b);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a, b},
                            [a, b](std::span<const T> g) {
                              accumulate(a, g.size(), [&](std::size_t i) { return g[i] * b[i]; });
                              accumulate(b, g.size(), [&](std::size_t i) { return g[i] * a[i]; });
                            });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  require_finite("scale", a);
  if (!std::isfinite(factor)) throw NonFiniteError("scale: non-finite factor");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), "scale", {a},
                            [a, factor](std::span<const T> g) {
                              accumulate(a, g.size(), [&](std::size_t i) { return g[i] * factor; });
                            });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  require_finite("relu", a);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return Tensor<T>::from_op(a.shape(), std::move(out), "relu", {a}, [a](std::span<const T> g) {
    accumulate(a, g.size(), [&](std::size_t i) { return a[i] > T(0) ? g[i] : T(0); });
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  require_finite("sum", a);
  double s = 0;
  for (T v : a.data()) s += v;
  return Tensor<T>::from_op({1}, {static_cast<T>(s)}, "sum", {a}, [a](std::span<const T> g) {
    accumulate(a, a.numel(), [&](std::size_t) { return g[0]; });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require_finite("mean", a);
  double s = 0;
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  return Tensor<T>::from_op({1}, {static_cast<T>(s / a.numel())}, "mean", {a},
                            [a, inv](std::span<const T> g) {
                              accumulate(a, a.numel(), [&](std::size_t) { return g[0] * inv; });
                            });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2, "lhs");
  require_rank("matmul", b, 2, "rhs");
  if (a.dim(1) != b.dim(0))
    throw ShapeError(fmt::format("matmul: inner dims differ {} x {}", shape_str(a.shape()),
                                 shape_str(b.shape())));
  require_finite("matmul", a);
  require_finite("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return Tensor<T>::from_op({m, n}, std::move(out), "matmul", {a, b},
                            [a, b, m, k, n](std::span<const T> g) mutable {
                              if (a.requires_grad()) {
                                // dA = G * B^T
                                std::vector<T> bt(n * k);
                                transpose(k, n, b.data().data(), bt.data());
                                gemm_nn(m, k, n, g.data(), bt.data(), a.grad_buffer().data());
                              }
                              if (b.requires_grad())  // dB = A^T * G
                                gemm_tn(k, n, m, a.data().data(), g.data(), b.grad_buffer().data());
                            });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x, 2, "input");
  require_rank("linear", weight, 2, "weight");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError(fmt::format("linear: input {} incompatible with weight {}",
                                 shape_str(x.shape()), shape_str(weight.shape())));
  if (bias.defined() && bias.shape() != Shape{out_f})
    throw ShapeError(fmt::format("linear: bias {} expected [{}]", shape_str(bias.shape()), out_f));
  require_finite("linear", x);
  require_finite("linear", weight);
  if (bias.defined()) require_finite("linear", bias);

  std::vector<T> wt(in * out_f);
  transpose(out_f, in, weight.data().data(), wt.data());
  std::vector<T> out(n * out_f, T(0));
  if (bias.defined())
    for (std::size_t i = 0; i < n; ++i)
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * out_f);
  gemm_nn(n, out_f, in, x.data().data(), wt.data(), out.data());

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::from_op(
      {n, out_f}, std::move(out), "linear", std::move(inputs),
      [x, weight, bias, n, in, out_f](std::span<const T> g) mutable {
        if (x.requires_grad())  // dX = G * W
          gemm_nn(n, in, out_f, g.data(), weight.data().data(), x.grad_buffer().data());
        if (weight.requires_grad())  // dW = G^T * X
          gemm_tn(out_f, in, n, g.data(), x.data().data(), weight.grad_buffer().data());
        if (bias.defined() && bias.requires_grad()) {
          auto& gb = bias.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[i * out_f + o];
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dParams params) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", weight, 4, "weight");
  const std::size_t n = x.dim(0), o = weight.dim(0);
  if (weight.dim(1) != x.dim(1))
    throw ShapeError(fmt::format("conv2d: input channels {} but weight {}", x.dim(1),
                                 shape_str(weight.shape())));
  if (params.stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3),
                   params.stride, params.pad, 0, 0};
  if (geo.h + 2 * geo.pad < geo.kh || geo.w + 2 * geo.pad < geo.kw)
    throw ShapeError(fmt::format("conv2d: kernel {} larger than padded input {}",
                                 shape_str(weight.shape()), shape_str(x.shape())));
  geo.ho = (geo.h + 2 * geo.pad - geo.kh) / geo.stride + 1;
  geo.wo = (geo.w + 2 * geo.pad - geo.kw) / geo.stride + 1;
  if (bias.defined() && bias.shape() != Shape{o})
    throw ShapeError(fmt::format("conv2d: bias {} expected [{}]", shape_str(bias.shape()), o));
  require_finite("conv2d", x);
  require_finite("conv2d", weight);
  if (bias.defined()) require_finite("conv2d", bias);

  const std::size_t rows = geo.rows(), cols = geo.cols();
  const std::size_t in_plane = geo.c * geo.h * geo.w, out_plane = o * cols;
  auto cols_all = std::make_shared<std::vector<T>>(n * rows * cols);
  std::vector<T> out(n * out_plane, T(0));
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    T* cb = cols_all->data() + b * rows * cols;
    im2col(geo, xd + b * in_plane, cb);
    T* ob = out.data() + b * out_plane;
    if (bias.defined())
      for (std::size_t oc = 0; oc < o; ++oc) std::fill_n(ob + oc * cols, cols, bias[oc]);
    gemm_nn(o, cols, rows, wd, cb, ob);
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return Tensor<T>::from_op(
      {n, o, geo.ho, geo.wo}, std::move(out), "conv2d", std::move(inputs),
      [x, weight, bias, geo, n, o, cols_all](std::span<const T> g) mutable {
        const std::size_t rows = geo.rows(), cols = geo.cols();
        const std::size_t in_plane = geo.c * geo.h * geo.w, out_plane = o * cols;
        std::vector<T> scratch(rows * cols);
        for (std::size_t b = 0; b < n; ++b) {
          const T* gb = g.data() + b * out_plane;
          const T* cb = cols_all->data() + b * rows * cols;
          if (weight.requires_grad()) {
            // dW[o, r] += sum_p G[o,p] * cols[r,p]
            transpose(rows, cols, cb, scratch.data());
            gemm_nn(o, rows, cols, gb, scratch.data(), weight.grad_buffer().data());
          }
          if (x.requires_grad()) {
            std::fill(scratch.begin(), scratch.end(), T(0));
            gemm_tn(rows, cols, o, weight.data().data(), gb, scratch.data());
            col2im(geo, scratch.data(), x.grad_buffer().data() + b * in_plane);
          }
          if (bias.defined() && bias.requires_grad()) {
            auto& gbias = bias.grad_buffer();
            for (std::size_t oc = 0; oc < o; ++oc) {
              double s = 0;
              for (std::size_t p = 0; p < cols; ++p) s += gb[oc * cols + p];
              gbias[oc] += static_cast<T>(s);
            }
          }
        }
      });
}

template <typename T>
BatchNormResult<T> batchnorm2d_train(const Tensor<T>& x, const Tensor<T>& gamma,
                                     const Tensor<T>& beta, double eps) {
  require_rank("batchnorm2d", x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError(fmt::format("batchnorm2d: gamma {} / beta {} expected [{}]",
                                 shape_str(gamma.shape()), shape_str(beta.shape()), c));
  require_finite("batchnorm2d", x);
  require_finite("batchnorm2d", gamma);
  require_finite("batchnorm2d", beta);

  BatchNormResult<T> result;
  channel_moments(x, result.batch_mean, result.batch_var);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch)
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(result.batch_var[ch] + eps));

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      const T mu = static_cast<T>(result.batch_mean[ch]);
      for (std::size_t i = 0; i < hw; ++i) {
        const T h = (xd[base + i] - mu) * inv_std[ch];
        (*xhat)[base + i] = h;
        out[base + i] = gamma[ch] * h + beta[ch];
      }
    }

  result.output = Tensor<T>::from_op(
      x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, n, c, hw](std::span<const T> g) mutable {
        const double m = static_cast<double>(n * hw);
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[base + i];
              sum_gx[ch] += static_cast<double>(g[base + i]) * (*xhat)[base + i];
            }
          }
        if (gamma.requires_grad()) {
          auto& gg = gamma.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<T>(sum_gx[ch]);
        }
        if (beta.requires_grad()) {
          auto& gb = beta.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<T>(sum_g[ch]);
        }
        if (!x.requires_grad()) return;
        auto& gx = x.grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            const T k = gamma[ch] * inv_std[ch];
            const T mg = static_cast<T>(sum_g[ch] / m);
            const T mgx = static_cast<T>(sum_gx[ch] / m);
            for (std::size_t i = 0; i < hw; ++i)
              gx[base + i] += k * (g[base + i] - mg - (*xhat)[base + i] * mgx);
          }
      });
  return result;
}

template <typename T>
Tensor<T> batchnorm2d_eval(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           std::span<const float> running_mean,
                           std::span<const float> running_var, double eps) {
  require_rank("batchnorm2d", x, 4, "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} || running_mean.size() != c ||
      running_var.size() != c)
    throw ShapeError(fmt::format("batchnorm2d: parameters do not match {} channels", c));
  require_finite("batchnorm2d", x);
  require_finite("batchnorm2d", gamma);
  require_finite("batchnorm2d", beta);

  std::vector<T> inv_std(c), shift(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    shift[ch] = static_cast<T>(running_mean[ch]);
  }
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i)
        out[base + i] = gamma[ch] * ((xd[base + i] - shift[ch]) * inv_std[ch]) + beta[ch];
    }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
      [x, gamma, beta, inv_std, shift, n, c, hw](std::span<const T> g) mutable {
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g[ch] += g[base + i];
              sum_gx[ch] += static_cast<double>(g[base + i]) * ((x[base + i] - shift[ch]) * inv_std[ch]);
            }
          }
        if (gamma.requires_grad()) {
          auto& gg = gamma.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += static_cast<T>(sum_gx[ch]);
        }
        if (beta.requires_grad()) {
          auto& gb = beta.grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += static_cast<T>(sum_g[ch]);
        }
        if (!x.requires_grad()) return;
        auto& gx = x.grad_buffer();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * hw;
            const T k = gamma[ch] * inv_std[ch];
            for (std::size_t i = 0; i < hw; ++i) gx[base + i] += k * g[base + i];
          }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  return pool2d("maxpool2d", PoolKind::max, x, kernel, stride);
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  return pool2d("avgpool2d", PoolKind::avg, x, kernel, stride);
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("flatten: input " + shape_str(x.shape()) + " has no batch axis");
  return x.reshape({x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2, "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n)
    throw ShapeError(fmt::format("softmax_cross_entropy: {} labels for logits {}", labels.size(),
                                 shape_str(logits.shape())));
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      throw ShapeError(fmt::format("softmax_cross_entropy: label {} at row {} outside [0,{})",
                                   labels[i], i, k));
  require_finite("softmax_cross_entropy", logits);

  auto probs = std::make_shared<std::vector<T>>(n * k);
  auto ld = logits.data();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = ld.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = static_cast<T>(std::exp(row[j] - lse));
    total += lse - row[labels[i]];
  }
  std::vector<int> y(labels.begin(), labels.end());
  return Tensor<T>::from_op(
      {1}, {static_cast<T>(total / n)}, "softmax_cross_entropy", {logits},
      [logits, probs, y = std::move(y), n, k](std::span<const T> g) mutable {
        auto& gl = logits.grad_buffer();
        const T s = g[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < k; ++j) {
            const T onehot = static_cast<int>(j) == y[i] ? T(1) : T(0);
            gl[i * k + j] += s * ((*probs)[i * k + j] - onehot);
          }
      });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& y, const Tensor<T>& target) {
  require_same_shape("mse", y, target);
  require_finite("mse", y);
  require_finite("mse", target);
  double s = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double d = static_cast<double>(y[i]) - target[i];
    s += d * d;
  }
  const std::size_t n = y.numel();
  return Tensor<T>::from_op({1}, {static_cast<T>(s / n)}, "mse", {y, target},
                            [y, target, n](std::span<const T> g) {
                              const T k = T(2) * g[0] / static_cast<T>(n);
                              accumulate(y, n, [&](std::size_t i) { return k * (y[i] - target[i]); });
                              accumulate(target, n,
                                         [&](std::size_t i) { return -k * (y[i] - target[i]); });
                            });
}

template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
  require_rank("channel_mean", x, 4, "input");
  require_finite("channel_mean", x);
  std::vector<double> mean, var;
  channel_moments(x, mean, var);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(mean.begin(), mean.end());
  return Tensor<T>::from_op({c}, std::move(out), "channel_mean", {x},
                            [x, n, c, hw](std::span<const T> g) mutable {
                              auto& gx = x.grad_buffer();
                              const T inv = T(1) / static_cast<T>(n * hw);
                              for (std::size_t b = 0; b < n; ++b)
                                for (std::size_t ch = 0; ch < c; ++ch) {
                                  const T v = g[ch] * inv;
                                  T* p = gx.data() + (b * c + ch) * hw;
                                  for (std::size_t i = 0; i < hw; ++i) p[i] += v;
                                }
                            });
}

template <typename T>
Tensor<T> channel_std(const Tensor<T>& x) {
  require_rank("channel_std", x, 4, "input");
  require_finite("channel_std", x);
  std::vector<double> mean, var;
  channel_moments(x, mean, var);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> sd(c);
  for (std::size_t ch = 0; ch < c; ++ch) sd[ch] = std::sqrt(var[ch]);
  std::vector<T> out(sd.begin(), sd.end());
  return Tensor<T>::from_op(
      {c}, std::move(out), "channel_std", {x},
      [x, mean = std::move(mean), sd = std::move(sd), n, c, hw](std::span<const T> g) mutable {
        auto& gx = x.grad_buffer();
        const double m = static_cast<double>(n * hw);
        for (std::size_t ch = 0; ch < c; ++ch) {
          if (sd[ch] == 0.0) continue;
          const double k = g[ch] / (m * sd[ch]);
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i)
              gx[base + i] += static_cast<T>(k * (x[base + i] - mean[ch]));
          }
        }
      });
}

#define BDFA_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                            Conv2dParams);                                                   \
  template BatchNormResult<T> batchnorm2d_train(const Tensor<T>&, const Tensor<T>&,          \
                                                const Tensor<T>&, double);                   \
  template Tensor<T> batchnorm2d_eval(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                      std::span<const float>, std::span<const float>,        \
                                      double);                                               \
  template Tensor<T> maxpool2d(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> avgpool2d(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> flatten(const Tensor<T>&);                                              \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);          \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> channel_mean(const Tensor<T>&);                                         \
  template Tensor<T> channel_std(const Tensor<T>&);

BDFA_INSTANTIATE_OPS(float)
BDFA_INSTANTIATE_OPS(double)

#undef BDFA_INSTANTIATE_OPS

}  // namespace bdfa::ops
