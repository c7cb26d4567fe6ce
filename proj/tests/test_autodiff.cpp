#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ccmd/autodiff.hpp"
#include "ccmd/grad_check.hpp"
#include "op_suite.hpp"

namespace {

using namespace ccmd;
using ad::Tape;
using ad::Tensor;

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

TEST(Autodiff, MatmulIdentity) {
  Tape t;
  std::vector<double> a{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  Tensor eye = t.constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(vals(ad::matmul(eye, t.constant({3, 4}, a))), a);
}

TEST(Autodiff, MatmulHandValues) {
  Tape t;
  Tensor y = ad::matmul(t.constant({2, 2}, {1, 2, 3, 4}), t.constant({2, 1}, {5, 6}));
  EXPECT_EQ(y.shape(), (ad::Shape{2, 1}));
  EXPECT_EQ(vals(y), (std::vector<double>{17, 39}));
}

TEST(Autodiff, BatchedMatmulMatchesLoops) {
  Tape t;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> a(2 * 3 * 4), b(2 * 4 * 5);
  for (auto& x : a) x = u(rng);
  for (auto& x : b) x = u(rng);
  auto y = vals(ad::matmul(t.constant({2, 3, 4}, a), t.constant({2, 4, 5}, b)));
  auto ynt = vals(ad::matmul_nt(t.constant({2, 3, 4}, a), t.constant({2, 5, 4}, b)));
  for (int p = 0; p < 2; ++p)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) {
        double s = 0, snt = 0;
        for (int k = 0; k < 4; ++k) {
          s += a[(p * 3 + i) * 4 + k] * b[(p * 4 + k) * 5 + j];
          snt += a[(p * 3 + i) * 4 + k] * b[(p * 5 + j) * 4 + k];
        }
        EXPECT_NEAR(y[(p * 3 + i) * 5 + j], s, 1e-14);
        EXPECT_NEAR(ynt[(p * 3 + i) * 5 + j], snt, 1e-14);
      }
}

TEST(Autodiff, SoftmaxUniform) {
  Tape t;
  for (double v : ad::softmax_row(t.constant({1, 3}, {0, 0, 0})).values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Autodiff, SoftmaxMaskedEntriesGetExactlyZero) {
  Tape t;
  const double inf = std::numeric_limits<double>::infinity();
  Tensor x = t.variable({1, 4}, {0.3, 0.1, 0.7, 0.2});
  Tensor y = ad::softmax_row(ad::add(x, t.constant({1, 4}, {0, -inf, 0, -inf})));
  EXPECT_EQ(y.values()[1], 0.0);
  EXPECT_EQ(y.values()[3], 0.0);
  EXPECT_NEAR(y.values()[0] + y.values()[2], 1.0, 1e-15);
  t.backward(ad::sum(ad::mul(y, t.constant({1, 4}, {1, 2, 3, 4}))));
  EXPECT_EQ(t.grad(x)[1], 0.0);
  EXPECT_EQ(t.grad(x)[3], 0.0);
}

TEST(Autodiff, LayerNormConstantRowIsZeroBeforeAffine) {
  Tape t;
  Tensor y = ad::layer_norm(t.constant({2, 3}, {5, 5, 5, -1, -1, -1}), t.constant({3}, {1, 1, 1}),
                            t.constant({3}, {0, 0, 0}), 1e-5);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, SumGradIsOnes) {
  Tape t;
  Tensor x = t.variable({2, 3}, {1, -2, 3, 4, 5, -6});
  t.backward(ad::sum(x));
  for (double g : t.grad(x)) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, SquareGradIsTwoX) {
  Tape t;
  std::vector<double> x0{0.5, -1.5, 2.0};
  Tensor x = t.variable({3}, x0);
  t.backward(ad::sum(ad::mul(x, x)));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(t.grad(x)[i], 2 * x0[i]);
}

TEST(Autodiff, AbsSubgradientAtZeroIsZero) {
  Tape t;
  Tensor x = t.variable({3}, {0.0, 2.0, -3.0});
  t.backward(ad::sum(ad::abs(x)));
  EXPECT_EQ(t.grad(x)[0], 0.0);
  EXPECT_EQ(t.grad(x)[1], 1.0);
  EXPECT_EQ(t.grad(x)[2], -1.0);
}

TEST(Autodiff, IntermediateGradientsAreRetained) {
  Tape t;
  Tensor x = t.variable({2}, {1.0, 2.0});
  Tensor h = ad::scale(x, 3.0);
  t.backward(ad::sum(ad::mul(h, h)));
  ASSERT_TRUE(t.has_grad(h));
  EXPECT_EQ(t.grad(h)[0], 6.0);
  EXPECT_EQ(t.grad(h)[1], 12.0);
  EXPECT_EQ(t.grad(x)[1], 36.0);
}

TEST(Autodiff, NonScalarRootRejected) {
  Tape t;
  Tensor x = t.variable({2}, {1.0, 2.0});
  EXPECT_THROW(t.backward(x), std::invalid_argument);
}

TEST(Autodiff, ShapeErrorNamesOpAndShapes) {
  Tape t;
  try {
    ad::matmul(t.constant({2, 3}, std::vector<double>(6)), t.constant({4, 2}, std::vector<double>(8)));
    FAIL() << "expected a shape error";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4, 2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(ad::add(t.constant({2, 3}, std::vector<double>(6)), t.constant({3, 2}, std::vector<double>(6))),
               std::invalid_argument);
  EXPECT_THROW(t.constant({2, 2}, {1.0}), std::invalid_argument);
}

TEST(Autodiff, BackwardIsLinear) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x0(12);
  for (auto& v : x0) v = u(rng);
  auto f = [](const Tensor& x) { return ad::sum(ad::gelu(ad::matmul(x, x.tape().constant({4, 2}, {1, 2, -1, 0.5, 0.3, 0.1, 2, -2})))); };
  auto g = [](const Tensor& x) { return ad::mean(ad::softmax_row(x)); };
  auto grad_of = [&](auto fn) {
    Tape t;
    Tensor x = t.variable({3, 4}, x0);
    t.backward(fn(x));
    return std::vector<double>(t.grad(x).begin(), t.grad(x).end());
  };
  const double a = 0.7, b = -1.9;
  auto gf = grad_of(f), gg = grad_of(g);
  auto gc = grad_of([&](const Tensor& x) { return ad::add(ad::scale(f(x), a), ad::scale(g(x), b)); });
  for (std::size_t i = 0; i < x0.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-10);
}

TEST(Autodiff, RerunIsBitIdentical) {
  auto run = [] {
    Tape t;
    Tensor x = t.variable({2, 3}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
    Tensor y = ad::layer_norm(ad::gelu(x), t.constant({3}, {1, 2, 3}), t.constant({3}, {0, 1, 0}), 1e-5);
    Tensor loss = ad::sum(ad::softmax_row(y));
    loss = ad::add(loss, ad::sum(ad::mul(y, y)));
    t.backward(loss);
    return std::pair{loss.item(), std::vector<double>(t.grad(x).begin(), t.grad(x).end())};
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, SumIsExact) {
  std::vector<double> x{0.3, -1.2, 4.0, 2.5};
  auto r = ad::grad_check([](Tape&, const Tensor& v) { return ad::sum(v); }, {4}, x);
  // Linear, so only rounding of x +- h and of the sum remains: a few eps * |f| / h.
  EXPECT_LT(r.max_rel_error, 1e-8) << r.describe();
}

TEST(GradCheck, L1AwayFromKinks) {
  std::vector<double> x{0.3, -1.2, 4.0, 2.5}, y{0.1, 0.5, 3.0, -1.0};
  auto r = ad::grad_check([y](Tape& t, const Tensor& v) { return ad::mean(ad::abs(ad::sub(v, t.constant({4}, y)))); },
                          {4}, x);
  EXPECT_LT(r.max_rel_error, 1e-5) << r.describe();
}

TEST(GradCheck, SoftmaxFirstElement) {
  auto r = ad::grad_check(
      [](Tape&, const Tensor& v) { return ad::slice(ad::softmax_row(v), 1, 0, 1); }, {1, 4},
      {0.2, -0.4, 1.1, 0.0});
  EXPECT_LT(r.max_rel_error, 1e-5) << r.describe();
}

TEST(GradCheck, ReportsNanIndex) {
  auto r = ad::grad_check(
      [](Tape& t, const Tensor& v) {
        return ad::sum(ad::mul(v, t.constant({3}, {1.0, std::nan(""), 1.0})));
      },
      {3}, {1.0, 2.0, 3.0});
  ASSERT_TRUE(r.nan_index.has_value());
  EXPECT_FALSE(r.ok(1.0));
}

class OpGradient : public ::testing::TestWithParam<fixtures::OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  auto r = fixtures::run_case(GetParam(), 50, 1234);
  EXPECT_TRUE(r.ok(1e-5)) << GetParam().name << ": " << r.describe();
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(fixtures::op_cases()),
                         [](const auto& info) {
                           std::string s = info.param.name;
                           for (auto& c : s)
                             if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
                           return s;
                         });

}  // namespace
