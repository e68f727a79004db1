#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "manpp/errors.hpp"
#include "manpp/tensor.hpp"
#include "support.hpp"

using namespace manpp;
using manpp::testing::finite_difference_check;
using manpp::testing::probe_loss;
using manpp::testing::random_nonzero;
using manpp::testing::random_tensor;

TEST(Tensor, ConstructionChecksSizeAndFiniteness) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}), InputError);
  EXPECT_THROW(Tensor({1}, {std::numeric_limits<double>::infinity()}), InputError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_TRUE(t.is_leaf());
}

TEST(Tensor, MatmulShapeMismatchIsShapeError) {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Tensor, MatmulValues) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.data()[0], 17.0);
  EXPECT_EQ(c.data()[1], 39.0);
}

TEST(Tensor, BackwardOnNonScalarIsUsageError) {
  const Tensor a = Tensor::full({2}, 1.0, true);
  EXPECT_THROW(backward(relu(a)), UsageError);
}

TEST(Tensor, AddOfSelfAccumulatesTwo) {
  Tensor x = Tensor::full({1}, 3.0, true);
  backward(sum(add(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Tensor, LeafGradsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::full({2}, 1.5, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Tensor, DetachStopsGradient) {
  Tensor w = Tensor::full({2, 2}, 0.5, true);
  Tensor x = Tensor::full({1, 2}, 1.0);
  Tensor h = matmul(x, w);
  Tensor v = Tensor::full({2, 1}, 1.0, true);
  backward(sum(matmul(h.detach(), v)));
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_EQ(w.grad()[3], 0.0);
  EXPECT_NE(v.grad()[0], 0.0);
  EXPECT_FALSE(h.detach().requires_grad());
}

TEST(Tensor, MutableDataOnOpOutputIsUsageError) {
  Tensor a = Tensor::full({2}, 1.0, true);
  Tensor b = relu(a);
  EXPECT_THROW(b.mutable_data(), UsageError);
}

TEST(Tensor, CrossEntropyOfConfidentRow) {
  // log1p(exp(-20)), evaluated with 40-digit arithmetic.
  const Tensor logits({1, 2}, {10.0, -10.0});
  const std::vector<int> label{0};
  EXPECT_NEAR(softmax_cross_entropy(logits, label).item(), 2.0611536203143807e-09, 1e-24);
}

TEST(Tensor, CrossEntropyMeanOverRows) {
  // (logsumexp(1,2,3) - 3 + log 3) / 2 with 40-digit arithmetic.
  const Tensor logits({2, 3}, {1, 2, 3, 0, 0, 0});
  const std::vector<int> labels{2, 1};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), 0.75310912655624499794, 1e-15);
}

TEST(Tensor, CrossEntropyRejectsBadLabel) {
  const Tensor logits({1, 2}, {0, 0});
  const std::vector<int> bad{2};
  EXPECT_THROW(softmax_cross_entropy(logits, bad), InputError);
}

TEST(Tensor, CountCorrect) {
  const Tensor logits({3, 2}, {1, 0, 0, 1, 2, 1});
  const std::vector<int> labels{0, 0, 0};
  EXPECT_EQ(count_correct(logits, labels), 2u);
}

TEST(Tensor, Conv2dKnownValue) {
  // 1x1x3x3 input, 1x1x2x2 kernel of ones, stride 1 -> 2x2 window sums.
  const Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  const Tensor y = conv2d(x, k, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.data()[0], 12.0);
  EXPECT_EQ(y.data()[3], 28.0);
  const Tensor y2 = conv2d(x, k, 2);
  ASSERT_EQ(y2.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y2.data()[0], 12.0);
}

TEST(Tensor, PoolingValues) {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 6});
  EXPECT_EQ(mean_pool2d(x, 2).item(), 3.0);
  EXPECT_EQ(global_mean_pool(x).item(), 3.0);
}

class OpGradient : public ::testing::Test {
 protected:
  Rng rng = make_stream(11, "fd");
  void expect_ok(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> in) {
    const auto r = finite_difference_check(f, std::move(in));
    EXPECT_GT(r.entries, 0u);
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
};

TEST_F(OpGradient, Matmul) {
  auto r = make_stream(1, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(matmul(in[0], in[1]), rr); },
            {random_tensor({3, 4}, rng, true), random_tensor({4, 2}, rng, true)});
}

TEST_F(OpGradient, Linear) {
  auto r = make_stream(2, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(linear(in[0], in[1], in[2]), rr); },
            {random_tensor({3, 4}, rng, true), random_tensor({2, 4}, rng, true), random_tensor({2}, rng, true)});
}

TEST_F(OpGradient, Conv2dStride2) {
  auto r = make_stream(3, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(conv2d(in[0], in[1], in[2], 2), rr); },
            {random_tensor({2, 2, 5, 5}, rng, true), random_tensor({3, 2, 3, 3}, rng, true),
             random_tensor({3}, rng, true)});
}

TEST_F(OpGradient, ReluAwayFromKink) {
  auto r = make_stream(4, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(relu(in[0]), rr); },
            {random_nonzero({4, 3}, rng, true)});
}

TEST_F(OpGradient, Pooling) {
  auto r = make_stream(5, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(mean_pool2d(in[0], 2), rr); },
            {random_tensor({2, 2, 5, 4}, rng, true)});
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(global_mean_pool(in[0]), rr); },
            {random_tensor({2, 3, 3, 2}, rng, true)});
}

TEST_F(OpGradient, ScaleByLearnableScalar) {
  auto r = make_stream(6, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(scale_by(in[0], in[1]), rr); },
            {random_tensor({3, 2}, rng, true), Tensor::scalar(1.3, true)});
}

TEST_F(OpGradient, ChannelBiasAdd) {
  auto r = make_stream(7, "w");
  expect_ok([&](const auto& in) { auto rr = r; return probe_loss(add(in[0], in[1]), rr); },
            {random_tensor({2, 3, 2, 2}, rng, true), random_tensor({3}, rng, true)});
}

TEST_F(OpGradient, CrossEntropy) {
  const std::vector<int> labels{0, 2, 1, 2};
  expect_ok([&](const auto& in) { return softmax_cross_entropy(in[0], labels); },
            {random_tensor({4, 3}, rng, true, -3.0, 3.0)});
}
