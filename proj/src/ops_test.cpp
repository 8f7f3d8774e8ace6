#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "bdfa/ops.hpp"
#include "support/gradcheck.hpp"

namespace bdfa {
namespace {

using gradcheck::random_tensor;
using gradcheck::TD;

class FiniteDifference : public ::testing::TestWithParam<gradcheck::OpCase> {};

TEST_P(FiniteDifference, MatchesAutodiff) {
  std::mt19937_64 rng(20240611);
  const auto& op = GetParam();
  for (int s = 0; s < gradcheck::kConfigsPerOp; ++s) {
    auto [f, in] = op.make(rng);
    EXPECT_LT(gradcheck::max_fd_error(f, in, rng), gradcheck::kTol) << op.name << " config #" << s;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, FiniteDifference, ::testing::ValuesIn(gradcheck::op_cases()),
                         [](const auto& info) {
                           std::string n;
                           for (char c : info.param.name) n += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
                           return n;
                         });

TEST(Ops, ReluDefinition) {
  TD x({3}, std::vector<double>{-1, 0, 2});
  auto y = ops::relu(x);
  EXPECT_EQ(y[0], 0);
  EXPECT_EQ(y[1], 0);
  EXPECT_EQ(y[2], 2);
}

TEST(Ops, IdentityConvKernel) {
  Tensor<float> x({1, 1, 3, 3}, 1.0f);
  Tensor<float> w({1, 1, 1, 1}, 1.0f);
  auto y = ops::conv2d(x, w, Tensor<float>{});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (float v : y.data()) EXPECT_EQ(v, 1.0f);
}

TEST(Ops, UniformSoftmaxCrossEntropy) {
  Tensor<double> logits({1, 4}, 0.0);
  std::vector<int> label{2};
  EXPECT_NEAR(ops::softmax_cross_entropy(logits, label).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(ops::softmax_cross_entropy(logits, label).item(), 1.38629, 1e-5);
}

TEST(Ops, ShapeMismatchNamesOpAndDims) {
  TD a({2, 3}), b({3, 2});
  try {
    ops::add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[3,2]"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(a, a), ShapeError);
  EXPECT_THROW(ops::conv2d(TD({1, 2, 4, 4}), TD({1, 3, 1, 1}), TD{}), ShapeError);
}

TEST(Ops, NonFiniteInputRejected) {
  TD a({2}, std::vector<double>{1, std::nan("")});
  EXPECT_THROW(ops::relu(a), NonFiniteError);
  TD b({2}, std::vector<double>{1, INFINITY});
  EXPECT_THROW(ops::sum(b), NonFiniteError);
}

TEST(Ops, LabelOutOfRangeRejected) {
  TD logits({1, 3});
  std::vector<int> bad{3};
  EXPECT_THROW(ops::softmax_cross_entropy(logits, bad), ShapeError);
}

TEST(Ops, ConvOutputExtent) {
  TD x({1, 1, 5, 5}, 1.0), w({2, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, w, TD{}, {2, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3, 3}));
  EXPECT_EQ(y[4], 9.0);  // centre window fully inside
  EXPECT_EQ(y[0], 4.0);  // corner window half padded
}

TEST(Ops, BatchNormTrainStatistics) {
  TD x({1, 1, 2, 2}, std::vector<double>{1, 1, 3, 3});
  auto r = ops::batchnorm2d_train(x, TD({1}, 1.0), TD({1}, 0.0), 1e-5);
  EXPECT_DOUBLE_EQ(r.batch_mean[0], 2.0);
  EXPECT_DOUBLE_EQ(r.batch_var[0], 1.0);
  EXPECT_NEAR(r.output[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(Ops, MaxPoolTiesPickFirst) {
  TD x({1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5});
  x.set_requires_grad(true);
  auto y = ops::sum(ops::maxpool2d(x, 2, 2));
  backward(y);
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Ops, BackwardIsLinearInTheLoss) {
  std::mt19937_64 rng(7);
  auto x = random_tensor(rng, {3, 4});
  auto w = random_tensor(rng, {2, 4});
  const double a = 0.3, b = -1.7;
  auto grad_of = [&](double ca, double cb) {
    auto xw = x.clone().set_requires_grad(true);
    auto y = ops::linear(xw, w, TD{});
    auto l1 = ops::sum(ops::mul(y, y));
    auto l2 = ops::mean(ops::relu(y));
    auto l = ops::add(ops::scale(l1, ca), ops::scale(l2, cb));
    backward(l);
    return std::vector<double>(xw.grad().begin(), xw.grad().end());
  };
  auto g = grad_of(a, b), g1 = grad_of(1, 0), g2 = grad_of(0, 1);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], a * g1[i] + b * g2[i], 1e-12);
}

TEST(Ops, DeterministicOutputsAndGradients) {
  auto run = [] {
    std::mt19937_64 rng(11);
    auto x = random_tensor(rng, {2, 2, 5, 5}).set_requires_grad(true);
    auto w = random_tensor(rng, {3, 2, 3, 3});
    auto y = ops::conv2d(x, w, TD{}, {1, 1});
    auto l = ops::sum(ops::mul(y, y));
    backward(l);
    auto out = std::vector<double>(y.data().begin(), y.data().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace bdfa
