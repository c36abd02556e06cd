#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "afd/gradcheck.hpp"
#include "afd/ops.hpp"
#include "test_util.hpp"

namespace afd {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

// Independent oracles -----------------------------------------------------------

std::vector<double> naive_conv(const Tensor& x, const Tensor& w, int stride, int pad) {
  const long N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const long OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(N * O * OH * OW, 0.0);
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < O; ++o)
      for (long oy = 0; oy < OH; ++oy)
        for (long ox = 0; ox < OW; ++ox)
          for (long c = 0; c < C; ++c)
            for (long i = 0; i < KH; ++i)
              for (long j = 0; j < KW; ++j) {
                const long iy = oy * stride - pad + i, ix = ox * stride - pad + j;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                out[((n * O + o) * OH + oy) * OW + ox] +=
                    x.values()[((n * C + c) * H + iy) * W + ix] * w.values()[((o * C + c) * KH + i) * KW + j];
              }
  return out;
}

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(M * N, 0.0);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t k = 0; k < K; ++k) out[i * N + j] += a.values()[i * K + k] * b.values()[k * N + j];
  return out;
}

class TensorTest : public ::testing::Test {
 protected:
  void SetUp() override { Tape::current().reset(); }
  void TearDown() override { Tape::current().reset(); }
};

// conv2d ------------------------------------------------------------------------

TEST_F(TensorTest, ConvAllOnesSumsToNine) {
  auto x = Tensor::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor::full({1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, k, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST_F(TensorTest, ConvIdentityKernelPreservesInput) {
  Rng rng(1);
  auto x = random_tensor(rng, {2, 3, 5, 6});
  auto k = Tensor::zeros({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) k.mutable_values()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
  auto y = ops::conv2d(x, k, 1, 1);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST_F(TensorTest, ConvMatchesNaiveLoopOracle) {
  Rng rng(2);
  auto x = random_tensor(rng, {2, 3, 8, 8});
  auto k = random_tensor(rng, {4, 3, 3, 3});
  auto y = ops::conv2d(x, k, 1, 0);
  EXPECT_LE(max_abs_diff(y.values(), naive_conv(x, k, 1, 0)), 1e-12);
  EXPECT_LE(max_abs_diff(ops::conv2d_direct(x, k, 1, 0).values(), naive_conv(x, k, 1, 0)), 1e-12);
}

TEST_F(TensorTest, ConvFastAndDirectPathsAgreeOnRandomShapes) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 4), o = rng.uniform_int(1, 4);
    const std::size_t h = rng.uniform_int(3, 9), w = rng.uniform_int(3, 9);
    const std::size_t kh = rng.uniform_int(1, 3), kw = rng.uniform_int(1, 3);
    const int stride = rng.uniform_int(1, 2), pad = rng.uniform_int(0, 1);
    auto x = random_tensor(rng, {n, c, h, w});
    auto k = random_tensor(rng, {o, c, kh, kw});
    const auto oracle = naive_conv(x, k, stride, pad);
    EXPECT_LE(max_abs_diff(ops::conv2d(x, k, stride, pad).values(), oracle), 1e-12);
    EXPECT_LE(max_abs_diff(ops::conv2d_direct(x, k, stride, pad).values(), oracle), 1e-12);
  }
}

TEST_F(TensorTest, ConvShapeMismatchNamesBothShapes) {
  auto x = Tensor::zeros({1, 3, 5, 5});
  auto k = Tensor::zeros({2, 4, 3, 3});
  try {
    ops::conv2d(x, k, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3,5,5]"), std::string::npos);
    EXPECT_NE(msg.find("[2,4,3,3]"), std::string::npos);
  }
}

// matmul --------------------------------------------------------------------------

TEST_F(TensorTest, MatmulIdentity) {
  Rng rng(4);
  auto b = random_tensor(rng, {3, 5});
  auto eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_values()[i * 3 + i] = 1.0;
  auto y = ops::matmul(eye, b);
  for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_EQ(y.at(i), b.at(i));
}

TEST_F(TensorTest, MatmulHandArithmetic) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from({2, 1}, {1, 1});
  auto y = ops::matmul(a, b);
  ASSERT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.at(0), 3.0);
  EXPECT_EQ(y.at(1), 7.0);
}

TEST_F(TensorTest, MatmulMatchesTripleLoopOracle) {
  Rng rng(5);
  auto a = random_tensor(rng, {5, 7});
  auto b = random_tensor(rng, {7, 2});
  EXPECT_LE(max_abs_diff(ops::matmul(a, b).values(), naive_matmul(a, b)), 1e-12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = rng.uniform_int(1, 12), k = rng.uniform_int(1, 12), n = rng.uniform_int(1, 12);
    auto x = random_tensor(rng, {m, k});
    auto y = random_tensor(rng, {k, n});
    EXPECT_LE(max_abs_diff(ops::matmul(x, y).values(), naive_matmul(x, y)), 1e-12);
  }
}

TEST_F(TensorTest, MatmulDimensionMismatchThrows) {
  EXPECT_THROW(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

// elementwise -------------------------------------------------------------------

TEST_F(TensorTest, ElementwiseExamples) {
  auto y = ops::mul(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4}));
  EXPECT_EQ(y.at(0), 3.0);
  EXPECT_EQ(y.at(1), 8.0);
  Rng rng(6);
  auto x = random_tensor(rng, {4, 3});
  auto d = ops::sub(x, x);
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
  auto s = ops::softmax(Tensor::zeros({3}), 0);
  for (double v : s.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  EXPECT_THROW(ops::add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST_F(TensorTest, SoftmaxSumsToOneAlongAxis) {
  Rng rng(7);
  auto x = random_tensor(rng, {3, 4, 5}, -10, 10);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = ops::softmax(x, axis);
    const Shape& sh = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= sh[i];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double total = 0.0;
        for (std::size_t k = 0; k < sh[axis]; ++k) total += s.at((o * sh[axis] + k) * inner + in);
        EXPECT_NEAR(total, 1.0, 1e-12);
      }
  }
}

// weighted_concat ---------------------------------------------------------------

TEST_F(TensorTest, WeightedConcatUnitWeightsIsPlainConcat) {
  std::vector<std::pair<Tensor, Tensor>> parts{{Tensor::from({2}, {1, 2}), Tensor::scalar(1.0)},
                                               {Tensor::from({1}, {3}), Tensor::scalar(1.0)}};
  auto y = ops::weighted_concat(parts, 0);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{1, 2, 3}));
}

TEST_F(TensorTest, WeightedConcatScalesEachPart) {
  std::vector<std::pair<Tensor, Tensor>> parts{{Tensor::from({2}, {1, 2}), Tensor::scalar(0.0)},
                                               {Tensor::from({1}, {3}), Tensor::scalar(2.0)}};
  auto y = ops::weighted_concat(parts, 0);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()), (std::vector<double>{0, 0, 6}));
}

TEST_F(TensorTest, WeightedConcatWeightGradientMatchesFiniteDifference) {
  auto x1 = Tensor::from({2}, {1, 2});
  auto x2 = Tensor::from({1}, {3});
  auto w1 = Tensor::scalar(1.0, true);
  auto w2 = Tensor::scalar(1.0, true);
  auto f = [&] {
    std::vector<std::pair<Tensor, Tensor>> parts{{x1, w1}, {x2, w2}};
    return ops::sum(ops::weighted_concat(parts, 0));
  };
  // central difference of sum(output) w.r.t. w2, computed without autodiff
  const double eps = 1e-5;
  w2.mutable_values()[0] = 1.0 + eps;
  const double up = f().item();
  w2.mutable_values()[0] = 1.0 - eps;
  const double down = f().item();
  w2.mutable_values()[0] = 1.0;
  Tape::current().reset();
  const double numeric = (up - down) / (2 * eps);
  EXPECT_NEAR(numeric, 3.0, 1e-9);

  backward(f());
  EXPECT_NEAR(w2.grad()[0], numeric, 1e-9);
  EXPECT_NEAR(w1.grad()[0], 3.0, 1e-12);
}

TEST_F(TensorTest, WeightedConcatRejectsEmpty) {
  std::vector<std::pair<Tensor, Tensor>> none;
  EXPECT_THROW(ops::weighted_concat(none, 0), std::invalid_argument);
}

// backward ----------------------------------------------------------------------

TEST_F(TensorTest, BackwardOfSumIsOnes) {
  Rng rng(8);
  auto x = random_tensor(rng, {2, 3, 4}, -1, 1, true);
  backward(ops::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST_F(TensorTest, BackwardOfSumOfSquaresIsTwoX) {
  Rng rng(9);
  auto x = random_tensor(rng, {7}, -1, 1, true);
  backward(ops::sum(ops::mul(x, x)));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], 2.0 * x.at(i));
}

TEST_F(TensorTest, BackwardRejectsNonScalarLoss) {
  auto x = Tensor::zeros({3}, true);
  auto y = ops::relu(x);
  EXPECT_THROW(backward(y), ShapeError);
}

TEST_F(TensorTest, GradientAccumulatesAcrossUses) {
  Rng rng(10);
  auto x = random_tensor(rng, {5}, -1, 1, true);
  auto w1 = random_tensor(rng, {5});
  auto w2 = random_tensor(rng, {5});

  backward(ops::sum(ops::mul(x, w1)));
  const std::vector<double> g1(x.grad().begin(), x.grad().end());
  x.clear_grad();
  backward(ops::sum(ops::mul(x, w2)));
  const std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.clear_grad();
  backward(ops::add(ops::sum(ops::mul(x, w1)), ops::sum(ops::mul(x, w2))));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], g1[i] + g2[i]);
}

TEST_F(TensorTest, BackwardVisitsEachNodeOnceAndEmptiesTape) {
  auto x = Tensor::scalar(2.0, true);
  auto y = ops::mul(x, x);
  EXPECT_EQ(Tape::current().size(), 1u);
  backward(y);
  EXPECT_TRUE(Tape::current().empty());
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST_F(TensorTest, NonFiniteOutputIsHardError) {
  auto x = Tensor::from({2}, {1e308, 1e308});
  EXPECT_THROW(ops::add(x, x), NumericError);
}

TEST_F(TensorTest, OpsStayFiniteForLargeBoundedInputs) {
  Rng rng(11);
  auto x = random_tensor(rng, {4, 6}, -1e3, 1e3);
  EXPECT_NO_THROW(ops::sigmoid(x));
  EXPECT_NO_THROW(ops::softmax(x, 1));
  EXPECT_NO_THROW(ops::bce_with_logits(x, std::vector<double>(24, 1.0)));
  std::vector<int> targets{0, 1, 2, 3};
  EXPECT_NO_THROW(ops::cross_entropy(x, targets));
}

// finite-difference agreement for every differentiable op ------------------------


TEST_F(TensorTest, EveryOpMatchesCentralDifferences) {
  Rng rng(12);
  // Each case registers its inputs and returns a scalar loss built from them.
  using Builder = std::function<Tensor(const std::vector<Tensor>&)>;
  struct Case {
    std::string name;
    std::vector<Shape> shapes;
    Builder f;
  };
  auto probe = random_tensor(rng, {1024});
  // Weighted sum with fixed random coefficients so each output element matters.
  auto weigh = [probe](const Tensor& y) {
    auto w = Tensor::from(y.shape(), std::vector<double>(probe.values().begin(), probe.values().begin() + y.numel()));
    return ops::sum(ops::mul(y, w));
  };
  std::vector<Case> cases = {
      {"conv2d", {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}, [&](auto& in) { return weigh(ops::conv2d(in[0], in[1], in[2], 2, 1)); }},
      {"matmul", {{3, 4}, {4, 5}}, [&](auto& in) { return weigh(ops::matmul(in[0], in[1])); }},
      {"linear", {{3, 4}, {4, 5}, {5}}, [&](auto& in) { return weigh(ops::linear(in[0], in[1], in[2])); }},
      {"add", {{6}, {6}}, [&](auto& in) { return weigh(ops::add(in[0], in[1])); }},
      {"sub", {{6}, {6}}, [&](auto& in) { return weigh(ops::sub(in[0], in[1])); }},
      {"mul", {{6}, {6}}, [&](auto& in) { return weigh(ops::mul(in[0], in[1])); }},
      {"relu", {{12}}, [&](auto& in) { return weigh(ops::relu(in[0])); }},
      {"sigmoid", {{12}}, [&](auto& in) { return weigh(ops::sigmoid(in[0])); }},
      {"softmax", {{3, 4}}, [&](auto& in) { return weigh(ops::softmax(in[0], 1)); }},
      {"scale", {{5}, {1}}, [&](auto& in) { return weigh(ops::scale(in[0], in[1])); }},
      {"transpose", {{3, 4}}, [&](auto& in) { return weigh(ops::transpose2d(in[0])); }},
      {"weighted_concat", {{2, 3}, {1}, {2, 2}, {1}},
       [&](auto& in) {
         std::vector<std::pair<Tensor, Tensor>> p{{in[0], in[1]}, {in[2], in[3]}};
         return weigh(ops::weighted_concat(p, 1));
       }},
      {"concat", {{2, 3}, {2, 2}},
       [&](auto& in) {
         std::vector<Tensor> p{in[0], in[1]};
         return weigh(ops::concat(p, 1));
       }},
      {"gather_rows", {{4, 3}},
       [&](auto& in) {
         std::vector<std::size_t> rows{3, 0, 3, 1};
         return weigh(ops::gather_rows(in[0], rows));
       }},
      {"group_mean_rows", {{6, 2}}, [&](auto& in) { return weigh(ops::group_mean_rows(in[0], 3)); }},
      {"expand_scalar", {{1}}, [&](auto& in) { return weigh(ops::expand_scalar(in[0], {2, 3})); }},
      {"global_avg_pool", {{2, 3, 4, 4}}, [&](auto& in) { return weigh(ops::global_avg_pool(in[0])); }},
      {"reshape", {{2, 6}}, [&](auto& in) { return weigh(ops::reshape(in[0], {3, 4})); }},
      {"cross_entropy", {{4, 3}},
       [&](auto& in) {
         std::vector<int> t{0, 2, 1, 2};
         return ops::cross_entropy(in[0], t);
       }},
      {"bce_with_logits", {{5}},
       [&](auto& in) {
         std::vector<double> t{1, 0, 1, 0, 1};
         return ops::bce_with_logits(in[0], t);
       }},
      {"smooth_l1", {{6}},
       [&](auto& in) {
         std::vector<double> t{0.3, -2.0, 0.05, 1.5, -0.4, 0.0};
         return ops::smooth_l1(in[0], t, 1.0);
       }},
      {"roi_align", {{2, 6, 6}},
       [&](auto& in) {
         std::vector<Box> boxes{{3.3, 5.1, 30.2, 27.9}, {10.0, 2.0, 44.5, 40.0}};
         return weigh(ops::roi_align(in[0], boxes, 3, 8.0));
       }},
  };
  for (const auto& c : cases) {
    std::vector<Tensor> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(rng, s, -1, 1, true));
    auto res = finite_diff_check([&] { return c.f(inputs); }, inputs, {.eps = 1e-5});
    EXPECT_LE(res.max_rel_error, 1e-4) << c.name << " worst analytic " << res.worst_analytic << " numeric "
                                       << res.worst_numeric;
    EXPECT_GT(res.coords_checked, 0u);
  }
}

// finite_diff_check itself ----------------------------------------------------------

TEST_F(TensorTest, FiniteDiffCheckOnQuadraticIsNearExact) {
  Rng rng(13);
  auto x = random_tensor(rng, {10});
  auto res = finite_diff_check([&] { return ops::sum(ops::mul(x, x)); }, x);
  EXPECT_LE(res.max_rel_error, 1e-8);
}

TEST_F(TensorTest, FiniteDiffCheckOnSigmoidMatmulChain) {
  Rng rng(14);
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  auto res = finite_diff_check([&] { return ops::sum(ops::sigmoid(ops::matmul(a, b))); }, std::vector<Tensor>{a, b});
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST_F(TensorTest, FiniteDiffCheckDetectsNonDeterminism) {
  auto x = Tensor::from({2}, {0.5, 0.25});
  int calls = 0;
  auto f = [&] { return ops::scale(ops::sum(x), 1.0 + (++calls) * 1e-3); };
  EXPECT_THROW(finite_diff_check(f, x), std::runtime_error);
}

TEST_F(TensorTest, FiniteDiffCheckRemeasuresAcrossReluKink) {
  // 3e-6 sits inside the 1e-5 stencil of relu's corner: the nominal estimate is 0.65.
  auto x = Tensor::from({2}, {3e-6, 0.4});
  auto f = [&] { return ops::sum(ops::relu(x)); };
  auto res = finite_diff_check(f, x);
  EXPECT_EQ(res.kinks, 1u);
  EXPECT_EQ(res.kinks_unresolved, 0u);
  EXPECT_NEAR(res.nominal_max_rel_error, 0.35, 1e-6);
  EXPECT_LE(res.max_rel_error, 1e-8);

  auto strict = finite_diff_check(f, x, {.kink_refinements = 0});
  EXPECT_EQ(strict.kinks_unresolved, 1u);
  EXPECT_NEAR(strict.max_rel_error, 0.35, 1e-6);
}

TEST_F(TensorTest, FiniteDiffCheckReportsKinkItCannotEscape) {
  auto x = Tensor::from({1}, {1e-12});
  auto res = finite_diff_check([&] { return ops::sum(ops::relu(x)); }, x);
  EXPECT_EQ(res.kinks, 1u);
  EXPECT_EQ(res.kinks_unresolved, 1u);
  EXPECT_GT(res.max_rel_error, 0.4);
}

TEST_F(TensorTest, FiniteDiffCheckSeesSmoothL1Corner) {
  auto x = Tensor::from({1}, {1.0 + 2e-6});
  const std::vector<double> target{0.0};
  auto res = finite_diff_check([&] { return ops::smooth_l1(x, target, 1.0); }, x);
  EXPECT_EQ(res.kinks, 1u);
  EXPECT_EQ(res.kinks_unresolved, 0u);
  EXPECT_LE(res.max_rel_error, 1e-8);
}

TEST_F(TensorTest, FiniteDiffCheckRejectsBadEps) {
  auto x = Tensor::from({1}, {0.5});
  EXPECT_THROW(finite_diff_check([&] { return ops::sum(x); }, x, {.eps = 0.1}), std::invalid_argument);
}

}  // namespace
}  // namespace afd
