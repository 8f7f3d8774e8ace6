#pragma once

// Central finite-difference checks for every differentiable op, shared by the
// op unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bdfa/ops.hpp"

namespace bdfa::gradcheck {

using TD = Tensor<double>;
using Inputs = std::vector<TD>;
using Fn = std::function<TD(const Inputs&)>;

inline constexpr double kEps = 1e-4;
inline constexpr double kTol = 1e-5;
inline constexpr int kConfigsPerOp = 20;

inline TD random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return TD(std::move(shape), std::move(v));
}

// Keeps every value at least `gap` away from zero so a +-eps probe never
// crosses the ReLU kink.
inline void push_off_zero(TD& t, double gap) {
  for (auto& v : t.mutable_data())
    if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
}

// Values on a shuffled grid with spacing far above eps, so the arg-max of a
// pooling window never changes under a probe.
inline TD distinct_values(std::mt19937_64& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 1.0;
  std::shuffle(v.begin(), v.end(), rng);
  return TD(std::move(shape), std::move(v));
}

// Loss = sum(f(inputs) * r) with a fixed random weighting r, so every output
// element contributes a distinct upstream gradient.
inline double weighted_loss(const Fn& f, const Inputs& in, const std::vector<double>& r) {
  auto out = f(in);
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * r[i];
  return s;
}

// Worst |autodiff - FD| / (|FD| + 1e-8) over every element of every input.
inline double max_fd_error(const Fn& f, Inputs in, std::mt19937_64& rng) {
  for (auto& t : in) t = t.clone().set_requires_grad(true);
  auto probe = f(in);
  std::vector<double> r(probe.numel());
  std::uniform_real_distribution<double> d(0.5, 1.5);
  for (auto& v : r) v = d(rng);

  auto out = f(in);
  TD weights(out.shape(), r);
  auto loss = ops::sum(ops::mul(out, weights));
  backward(loss);

  double worst = 0.0;
  for (std::size_t k = 0; k < in.size(); ++k) {
    std::vector<double> analytic(in[k].grad().begin(), in[k].grad().end());
    for (std::size_t i = 0; i < in[k].numel(); ++i) {
      Inputs plus, minus;
      for (auto& t : in) {
        plus.push_back(t.detach().clone());
        minus.push_back(t.detach().clone());
      }
      plus[k].mutable_data()[i] += kEps;
      minus[k].mutable_data()[i] -= kEps;
      double fd = (weighted_loss(f, plus, r) - weighted_loss(f, minus, r)) / (2 * kEps);
      worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  return worst;
}

// One op under test: draws a random configuration (function plus inputs).
struct OpCase {
  std::string name;
  std::function<std::pair<Fn, Inputs>(std::mt19937_64&)> make;
};

inline void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> c;
  c.push_back({"add/sub/mul/scale", [](std::mt19937_64& rng) {
                 Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
                 Fn f = [](const Inputs& in) {
                   return ops::scale(ops::mul(ops::add(in[0], in[1]), ops::sub(in[0], in[1])), 0.7);
                 };
                 return std::pair{f, Inputs{random_tensor(rng, s), random_tensor(rng, s)}};
               }});
  c.push_back({"relu", [](std::mt19937_64& rng) {
                 auto x = random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)});
                 push_off_zero(x, 1e-2);
                 Fn f = [](const Inputs& in) { return ops::relu(in[0]); };
                 return std::pair{f, Inputs{x}};
               }});
  c.push_back({"sum/mean", [](std::mt19937_64& rng) {
                 Fn f = [](const Inputs& in) {
                   return ops::add(ops::sum(in[0]), ops::scale(ops::mean(in[0]), 3.0));
                 };
                 return std::pair{f, Inputs{random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 3)})}};
               }});
  c.push_back({"matmul", [](std::mt19937_64& rng) {
                 std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
                 Fn f = [](const Inputs& in) { return ops::matmul(in[0], in[1]); };
                 return std::pair{f, Inputs{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}};
               }});
  c.push_back({"linear", [](std::mt19937_64& rng) {
                 std::size_t n = pick(rng, 1, 4), i = pick(rng, 1, 5), o = pick(rng, 1, 4);
                 Fn f = [](const Inputs& in) { return ops::linear(in[0], in[1], in[2]); };
                 return std::pair{f, Inputs{random_tensor(rng, {n, i}), random_tensor(rng, {o, i}),
                                            random_tensor(rng, {o})}};
               }});
  c.push_back({"conv2d", [](std::mt19937_64& rng) {
                 std::size_t n = pick(rng, 1, 2), ch = pick(rng, 1, 3), o = pick(rng, 1, 3), k = pick(rng, 1, 3);
                 std::size_t h = pick(rng, k, k + 3), w = pick(rng, k, k + 3);
                 ops::Conv2dParams p{pick(rng, 1, 2), pick(rng, 0, 1)};
                 Fn f = [p](const Inputs& in) { return ops::conv2d(in[0], in[1], in[2], p); };
                 return std::pair{f, Inputs{random_tensor(rng, {n, ch, h, w}), random_tensor(rng, {o, ch, k, k}),
                                            random_tensor(rng, {o})}};
               }});
  c.push_back({"batchnorm2d_train", [](std::mt19937_64& rng) {
                 std::size_t n = pick(rng, 2, 3), ch = pick(rng, 1, 3), h = pick(rng, 1, 3), w = pick(rng, 2, 3);
                 Fn f = [](const Inputs& in) { return ops::batchnorm2d_train(in[0], in[1], in[2], 1e-5).output; };
                 return std::pair{f, Inputs{random_tensor(rng, {n, ch, h, w}), random_tensor(rng, {ch}, 0.5, 1.5),
                                            random_tensor(rng, {ch})}};
               }});
  c.push_back({"batchnorm2d_eval", [](std::mt19937_64& rng) {
                 std::size_t n = pick(rng, 1, 3), ch = pick(rng, 1, 3), h = pick(rng, 1, 3), w = pick(rng, 1, 3);
                 std::vector<float> rm(ch), rv(ch);
                 std::uniform_real_distribution<float> d(0.5f, 2.0f);
                 for (std::size_t i = 0; i < ch; ++i) rm[i] = d(rng) - 1.0f, rv[i] = d(rng);
                 Fn f = [rm, rv](const Inputs& in) {
                   return ops::batchnorm2d_eval(in[0], in[1], in[2], std::span<const float>(rm),
                                                std::span<const float>(rv), 1e-5);
                 };
                 return std::pair{f, Inputs{random_tensor(rng, {n, ch, h, w}), random_tensor(rng, {ch}),
                                            random_tensor(rng, {ch})}};
               }});
  c.push_back({"maxpool2d", [](std::mt19937_64& rng) {
                 std::size_t k = pick(rng, 1, 2), s = pick(rng, 1, 2);
                 Shape sh{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, k, 5), pick(rng, k, 5)};
                 Fn f = [k, s](const Inputs& in) { return ops::maxpool2d(in[0], k, s); };
                 return std::pair{f, Inputs{distinct_values(rng, sh)}};
               }});
  c.push_back({"avgpool2d", [](std::mt19937_64& rng) {
                 std::size_t k = pick(rng, 1, 3), s = pick(rng, 1, 3);
                 Shape sh{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, k, 5), pick(rng, k, 5)};
                 Fn f = [k, s](const Inputs& in) { return ops::avgpool2d(in[0], k, s); };
                 return std::pair{f, Inputs{random_tensor(rng, sh)}};
               }});
  c.push_back({"flatten", [](std::mt19937_64& rng) {
                 Fn f = [](const Inputs& in) { return ops::flatten(in[0]); };
                 return std::pair{f, Inputs{random_tensor(rng, {pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)})}};
               }});
  c.push_back({"softmax_cross_entropy", [](std::mt19937_64& rng) {
                 std::size_t n = pick(rng, 1, 5), k = pick(rng, 2, 6);
                 std::vector<int> labels(n);
                 for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
                 Fn f = [labels](const Inputs& in) { return ops::softmax_cross_entropy(in[0], labels); };
                 return std::pair{f, Inputs{random_tensor(rng, {n, k}, -3, 3)}};
               }});
  c.push_back({"mse", [](std::mt19937_64& rng) {
                 Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
                 Fn f = [](const Inputs& in) { return ops::mse(in[0], in[1]); };
                 return std::pair{f, Inputs{random_tensor(rng, s), random_tensor(rng, s)}};
               }});
  c.push_back({"channel_mean/channel_std", [](std::mt19937_64& rng) {
                 Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 2, 3)};
                 Fn f = [](const Inputs& in) {
                   return ops::add(ops::channel_mean(in[0]), ops::scale(ops::channel_std(in[0]), 2.0));
                 };
                 return std::pair{f, Inputs{random_tensor(rng, s)}};
               }});
  return c;
}

}  // namespace bdfa::gradcheck
