#include <gtest/gtest.h>

#include <cmath>

#include "protodiff/nd/ops.hpp"
#include "support/gradcheck.hpp"

using namespace protodiff;
using nd::Tensor;
using protodiff::testing::gradcheck;
using protodiff::testing::random_tensor;

namespace {

constexpr double kTol = 1e-3;

void expect_grad(std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& f) {
  const auto rep = gradcheck(std::move(leaves), f);
  EXPECT_LT(rep.max_rel, kTol) << rep.worst;
  EXPECT_GT(rep.checked, 0u);
}

}  // namespace

TEST(Tensor, ConstructionAndShape) {
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(Tensor<float>({2, 2}, {1.0f, 2.0f}), nd::ShapeError);
  EXPECT_EQ(Tensor<double>::scalar(3.5).item(), 3.5);
  EXPECT_THROW(t.item(), nd::ShapeError);
}

TEST(Tensor, OpsOutsideTapeRecordNothing) {
  auto a = random_tensor({3}, 1);
  a.set_requires_grad(true);
  auto b = nd::add(a, a);
  EXPECT_EQ(nd::Tape<double>::active(), nullptr);
  nd::Tape<double> tape;
  {
    nd::TapeScope<double> scope(tape);
    auto c = nd::add(a, a);
    EXPECT_EQ(tape.size(), 1u);
    auto untracked = nd::add(random_tensor({3}, 2), random_tensor({3}, 3));
    EXPECT_EQ(tape.size(), 1u);
  }
  EXPECT_EQ(nd::Tape<double>::active(), nullptr);
}

TEST(Tensor, BackwardVisitsEachNodeOnce) {
  auto a = random_tensor({4}, 1);
  a.set_requires_grad(true);
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  auto b = nd::mul(a, a);
  auto c = nd::add(b, b);  // diamond: b feeds c twice
  auto loss = nd::sum(c);
  tape.backward(loss);
  EXPECT_EQ(tape.last_visits(), 3u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a.grad()[i], 4.0 * a.data()[i], 1e-12);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, BackwardNeedsScalar) {
  auto a = random_tensor({2}, 1);
  a.set_requires_grad(true);
  nd::Tape<double> tape;
  nd::TapeScope<double> scope(tape);
  auto b = nd::scale(a, 2.0);
  EXPECT_THROW(tape.backward(b), nd::ShapeError);
}

TEST(Ops, ElementwiseValues) {
  Tensor<double> a({3}, {-1.0, 0.0, 2.0});
  Tensor<double> b({3}, {1.0, 2.0, 3.0});
  EXPECT_EQ(nd::add(a, b).data()[2], 5.0);
  EXPECT_EQ(nd::sub(a, b).data()[0], -2.0);
  EXPECT_EQ(nd::mul(a, b).data()[2], 6.0);
  EXPECT_EQ(nd::relu(a).data()[0], 0.0);
  EXPECT_NEAR(nd::silu(a).data()[2], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
  EXPECT_EQ(nd::sum(b).item(), 6.0);
  EXPECT_EQ(nd::mean(b).item(), 2.0);
  EXPECT_THROW(nd::add(a, Tensor<double>({2})), nd::ShapeError);
}

TEST(Ops, NonFiniteOutputThrows) {
  Tensor<float> a({1}, {3e38f});
  EXPECT_THROW(nd::scale(a, 10.0f), nd::NonFiniteError);
}

TEST(Ops, MatmulAndLinearValues) {
  Tensor<double> a({2, 2}, {1, 2, 3, 4});
  Tensor<double> b({2, 1}, {5, 6});
  auto c = nd::matmul(a, b);
  EXPECT_EQ(c.data()[0], 17.0);
  EXPECT_EQ(c.data()[1], 39.0);
  auto l = nd::linear(a, b, Tensor<double>({1}, {1.0}));
  EXPECT_EQ(l.data()[1], 40.0);
  EXPECT_THROW(nd::matmul(a, Tensor<double>({3, 1})), nd::ShapeError);
}

TEST(Ops, ConvMatchesDirectSum) {
  auto x = random_tensor({2, 3, 7}, 1);
  auto w = random_tensor({4, 3, 3}, 2);
  auto b = random_tensor({4}, 3);
  for (std::size_t stride : {1u, 2u}) {
    const nd::ConvGeometry g{stride, 1};
    auto y = nd::conv1d(x, w, b, g);
    const std::size_t lo = nd::conv1d_output_length(7, 3, g);
    ASSERT_EQ(y.shape(), (nd::Shape{2, 4, lo}));
    for (std::size_t n = 0; n < 2; ++n) {
      for (std::size_t o = 0; o < 4; ++o) {
        for (std::size_t t = 0; t < lo; ++t) {
          double acc = b.data()[o];
          for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t k = 0; k < 3; ++k) {
              const long pos = static_cast<long>(t * stride + k) - 1;
              if (pos < 0 || pos >= 7) continue;
              acc += w.data()[(o * 3 + c) * 3 + k] * x.data()[(n * 3 + c) * 7 + pos];
            }
          }
          EXPECT_NEAR(y.data()[(n * 4 + o) * lo + t], acc, 1e-12);
        }
      }
    }
  }
}

TEST(Ops, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_t(y)> for matching geometry and no bias.
  auto x = random_tensor({1, 3, 8}, 1);
  auto w = random_tensor({2, 3, 4}, 2);  // conv weight [cout, cin, k]
  const nd::ConvGeometry g{2, 1};
  auto cx = nd::conv1d(x, w, Tensor<double>{}, g);
  auto y = random_tensor(cx.shape(), 3);
  // conv_transpose weight is [cin_t, cout_t, k] = [2, 3, 4]: the same array.
  auto ty = nd::conv_transpose1d(y, w, Tensor<double>{}, g);
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.data()[i] * y.data()[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * ty.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Ops, ConvShapeErrors) {
  EXPECT_THROW(nd::conv1d(random_tensor({1, 2, 5}, 1), random_tensor({3, 3, 3}, 2),
                          Tensor<double>{}, {}),
               nd::ShapeError);
  EXPECT_THROW(nd::conv1d(random_tensor({1, 2, 2}, 1), random_tensor({3, 2, 5}, 2),
                          Tensor<double>{}, {}),
               nd::ShapeError);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  auto a = random_tensor({2, 3, 5}, 4, -5, 5);
  auto s = nd::softmax(a, 2);
  for (std::size_t r = 0; r < 6; ++r) {
    double t = 0;
    for (std::size_t j = 0; j < 5; ++j) t += s.data()[r * 5 + j];
    EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

TEST(Ops, BiasedSoftmaxExcludesInactive) {
  Tensor<double> logits({1, 1, 3}, {0.0, 0.0, 0.0});
  Tensor<double> bias({1, 3}, {0.0, 0.0, 1e6});
  std::vector<std::uint8_t> active{1, 1, 0};
  auto p = nd::biased_softmax(logits, bias, active);
  EXPECT_DOUBLE_EQ(p.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(p.data()[1], 0.5);
  EXPECT_EQ(p.data()[2], 0.0);
  std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(nd::biased_softmax(logits, bias, none), std::invalid_argument);
}

TEST(Ops, BiasDominates) {
  Tensor<double> logits({1, 2, 3}, {0.3, -0.2, 0.1, 1.0, 0.5, -1.0});
  Tensor<double> bias({1, 3}, {20.0, 0.0, 0.0});
  std::vector<std::uint8_t> active{1, 1, 1};
  auto p = nd::biased_softmax(logits, bias, active);
  EXPECT_GT(p.data()[0], 0.999);
  EXPECT_GT(p.data()[3], 0.999);
}

TEST(Ops, MultiheadLayoutConcatenatesHeads) {
  auto q = random_tensor({2, 3, 8}, 1);
  auto k = random_tensor({2, 4, 8}, 2);
  auto v = random_tensor({2, 4, 8}, 3);
  auto s = nd::multihead_scores(q, k, 2, 0.5);
  ASSERT_EQ(s.shape(), (nd::Shape{2, 6, 4}));
  // head 1, query 2, key 3 of batch 1
  double dot = 0;
  for (std::size_t c = 4; c < 8; ++c) dot += q.data()[(1 * 3 + 2) * 8 + c] * k.data()[(1 * 4 + 3) * 8 + c];
  EXPECT_NEAR(s.data()[((1 * 2 + 1) * 3 + 2) * 4 + 3], 0.5 * dot, 1e-12);
  auto m = nd::multihead_mix(nd::softmax(s, 2), v, 2);
  EXPECT_EQ(m.shape(), (nd::Shape{2, 3, 8}));
}

TEST(Ops, ShapePlumbing) {
  auto a = random_tensor({2, 3, 4}, 1);
  auto t = nd::transpose_last2(a);
  EXPECT_EQ(t.shape(), (nd::Shape{2, 4, 3}));
  EXPECT_EQ(t.data()[(1 * 4 + 2) * 3 + 1], a.data()[(1 * 3 + 1) * 4 + 2]);
  auto c = nd::concat<double>({a, a}, 1);
  EXPECT_EQ(c.shape(), (nd::Shape{2, 6, 4}));
  auto p = nd::pad_last(a, 2);
  EXPECT_EQ(p.shape(), (nd::Shape{2, 3, 6}));
  EXPECT_EQ(p.data()[5], 0.0);
  auto s = nd::slice_last(p, 0, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(s.data()[i], a.data()[i]);
  EXPECT_THROW(nd::reshape(a, {5, 5}), nd::ShapeError);
  EXPECT_EQ(nd::broadcast_batch(random_tensor({3, 2}, 1), 4).shape(), (nd::Shape{4, 3, 2}));
  EXPECT_EQ(nd::broadcast_positions(random_tensor({2, 3}, 1), 5).shape(), (nd::Shape{2, 3, 5}));
}

// -- gradient checks -----------------------------------------------------------

TEST(Grad, Elementwise) {
  auto a = random_tensor({3, 4}, 1), b = random_tensor({3, 4}, 2);
  expect_grad({a, b}, [&] { return nd::add(a, b); });
  expect_grad({a, b}, [&] { return nd::sub(a, b); });
  expect_grad({a, b}, [&] { return nd::mul(a, b); });
  expect_grad({a}, [&] { return nd::scale(a, -1.7); });
  expect_grad({a}, [&] { return nd::add_scalar(a, 0.3); });
  expect_grad({a}, [&] { return nd::silu(a); });
  expect_grad({a}, [&] { return nd::relu(a); });
}

TEST(Grad, Reductions) {
  auto a = random_tensor({2, 3, 4}, 3);
  expect_grad({a}, [&] { return nd::sum(a); });
  expect_grad({a}, [&] { return nd::mean(a); });
  for (std::size_t ax = 0; ax < 3; ++ax) expect_grad({a}, [&] { return nd::mean_axis(a, ax); });
}

TEST(Grad, MatmulLinear) {
  auto a = random_tensor({3, 4}, 1), b = random_tensor({4, 5}, 2), bias = random_tensor({5}, 3);
  expect_grad({a, b}, [&] { return nd::matmul(a, b); });
  expect_grad({a, b, bias}, [&] { return nd::linear(a, b, bias); });
}

TEST(Grad, Conv) {
  auto x = random_tensor({2, 3, 9}, 1), w = random_tensor({4, 3, 3}, 2), b = random_tensor({4}, 3);
  expect_grad({x, w, b}, [&] { return nd::conv1d(x, w, b, {1, 1}); });
  expect_grad({x, w, b}, [&] { return nd::conv1d(x, w, b, {2, 1}); });
  auto w1 = random_tensor({4, 3, 1}, 4);
  expect_grad({x, w1}, [&] { return nd::conv1d(x, w1, Tensor<double>{}, {}); });
  auto wt = random_tensor({3, 2, 4}, 5), bt = random_tensor({2}, 6);
  expect_grad({x, wt, bt}, [&] { return nd::conv_transpose1d(x, wt, bt, {2, 1}); });
}

TEST(Grad, SoftmaxAndAttention) {
  auto a = random_tensor({2, 3, 5}, 1);
  expect_grad({a}, [&] { return nd::softmax(a, 2); });
  expect_grad({a}, [&] { return nd::softmax(a, 1); });
  auto bias = random_tensor({2, 5}, 2, 0.0, 1.0);
  std::vector<std::uint8_t> active{1, 0, 1, 1, 0, 0, 1, 1, 1, 1};
  expect_grad({a, bias}, [&] { return nd::biased_softmax(a, bias, active); });
  auto q = random_tensor({2, 3, 8}, 3), k = random_tensor({2, 4, 8}, 4), v = random_tensor({2, 4, 8}, 5);
  expect_grad({q, k}, [&] { return nd::multihead_scores(q, k, 2, 0.35); });
  auto p = nd::softmax(random_tensor({2, 6, 4}, 6), 2);
  auto pl = Tensor<double>(p.shape(), std::vector<double>(p.data().begin(), p.data().end()));
  expect_grad({pl, v}, [&] { return nd::multihead_mix(pl, v, 2); });
}

TEST(Grad, ShapeOps) {
  auto a = random_tensor({2, 3, 4}, 1), b = random_tensor({2, 2, 4}, 2);
  expect_grad({a}, [&] { return nd::reshape(a, {6, 4}); });
  expect_grad({a}, [&] { return nd::transpose_last2(a); });
  expect_grad({a, b}, [&] { return nd::concat<double>({a, b}, 1); });
  expect_grad({a}, [&] { return nd::pad_last(a, 3); });
  expect_grad({a}, [&] { return nd::slice_last(a, 1, 2); });
  auto v = random_tensor({2, 3}, 3);
  expect_grad({v}, [&] { return nd::broadcast_positions(v, 5); });
  expect_grad({v}, [&] { return nd::broadcast_batch(v, 4); });
}
