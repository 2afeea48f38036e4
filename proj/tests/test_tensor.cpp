#include <cmath>
#include <functional>
#include <string>

#include <gtest/gtest.h>

#include "xrgen/adam.hpp"
#include "xrgen/gradcheck.hpp"
#include "xrgen/params.hpp"
#include "xrgen/tensor.hpp"

using namespace xrgen;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(s), true);
  for (double& x : t.mutable_data()) x = rng.uniform(lo, hi);
  return t;
}

// Checks d(sum(w .* f(inputs)))/d(inputs) against central differences. The
// random weights w make every output coordinate matter.
double op_grad_error(const std::vector<Shape>& shapes, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                     std::uint64_t seed = 1) {
  Rng rng(seed);
  ModelParams p;
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < shapes.size(); ++i) xs.push_back(p.add("x" + std::to_string(i), random_tensor(shapes[i], rng)));
  Tensor probe = f(xs);
  Tensor w = random_tensor(probe.shape(), rng);
  w.set_requires_grad(false);
  return finite_diff_check(p, [&] { return sum(mul(f(xs), w)); }, 1e-5, 1000).max_rel_error;
}

}  // namespace

TEST(Tensor, FactoriesAndInvariants) {
  Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
}

TEST(Tensor, ElementwiseBasics) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(tanh(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(relu(Tensor::row({-1.0, 2.0})).at(0), 0.0);
  Tensor a = Tensor::row({1, 2, 3});
  EXPECT_DOUBLE_EQ(add(a, 1.0).at(2), 4.0);
  EXPECT_DOUBLE_EQ(mul(a, a).at(1), 4.0);
  EXPECT_DOUBLE_EQ(sub(a, a).at(0), 0.0);
}

TEST(Tensor, MatmulIdentity) {
  Rng rng(3);
  Tensor I = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  for (std::size_t k : {1u, 2u, 5u}) {
    Tensor X = random_tensor({3, k}, rng);
    Tensor Y = matmul(I, X);
    ASSERT_EQ(Y.shape(), X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) EXPECT_EQ(Y.at(i), X.at(i));
  }
}

TEST(Tensor, ShapeErrorNamesOpAndShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    EXPECT_NE(msg.find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2}), Tensor::zeros({3})), ShapeError);
}

TEST(Tensor, NanAbortsWithOpName) {
  Tensor a = Tensor::row({1.0, std::nan("")});
  try {
    add(a, 1.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("add_scalar"), std::string::npos);
  }
  EXPECT_THROW(mul(Tensor::row({1e300}), 1e300), NumericError);
}

TEST(Softmax, SumsToOneInOpenInterval) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> l(1 + rng.below(40));
    for (double& x : l) x = rng.uniform(-30, 30);
    const auto p = softmax_values(l);
    double s = 0.0;
    for (double v : p) {
      EXPECT_GT(v, 0.0);
      EXPECT_LE(v, 1.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, CrossEntropyValues) {
  EXPECT_NEAR(softmax_cross_entropy(Tensor::row({0.0, 0.0}), 0).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(softmax_cross_entropy(Tensor::row(std::vector<double>(50, 1.5)), 17).item(), std::log(50.0), 1e-14);
  // -log(sigmoid(20)), evaluated independently as log1p(exp(-20))
  EXPECT_NEAR(softmax_cross_entropy(Tensor::row({10.0, -10.0}), 0).item(), 2.061153620314381e-09, 1e-22);
  EXPECT_THROW(softmax_cross_entropy(Tensor::row({0.0, 0.0}), 2), UsageError);
}

TEST(Softmax, CrossEntropyGradientIsSoftmaxMinusOnehot) {
  Tensor l = Tensor::row({0.3, -1.2, 2.0, 0.1}, true);
  backward(softmax_cross_entropy(l, 2));
  const auto p = softmax_values(std::vector<double>{0.3, -1.2, 2.0, 0.1});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(l.grad()[i], p[i] - (i == 2 ? 1.0 : 0.0), 1e-15);
}

TEST(Softmax, CrossEntropyNonNegative) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> l(2 + rng.below(10));
    for (double& x : l) x = rng.uniform(-50, 50);
    EXPECT_GE(softmax_cross_entropy(Tensor::row(l), rng.below(l.size())).item(), 0.0);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::zeros({2, 3}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = Tensor::row({1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
  EXPECT_EQ(x.grad()[2], 6.0);
}

TEST(Backward, AccumulatesOverReuse) {
  Tensor a = Tensor::row({0.5, -1.0}, true);
  backward(sum(mul(add(a, a), 3.0)));
  EXPECT_EQ(a.grad()[0], 6.0);
  EXPECT_EQ(a.grad()[1], 6.0);
}

TEST(Backward, RejectsUnrecordedTensor) {
  EXPECT_THROW(backward(Tensor::scalar(1.0)), UsageError);
  Tensor x = Tensor::row({1.0}, true);
  Tensor y;
  {
    NoGradGuard ng;
    y = sum(x);
  }
  EXPECT_FALSE(y.recorded());
  EXPECT_THROW(backward(y), UsageError);
}

TEST(Backward, GraphClearedAfterPass) {
  Tensor x = Tensor::row({1.0, 2.0}, true);
  Tensor loss = sum(mul(x, x));
  const auto records = Graph::trace(loss).records();
  ASSERT_EQ(records.size(), 2u);
  EXPECT_STREQ(records[0].op, "mul");
  EXPECT_STREQ(records[1].op, "sum");
  backward(loss);
  EXPECT_FALSE(loss.recorded());
  EXPECT_THROW(backward(loss), UsageError);
}

TEST(Backward, GraphTopologicalOrder) {
  Tensor a = Tensor::row({1.0, 2.0}, true);
  Tensor b = tanh(a);
  Tensor c = add(mul(b, a), sigmoid(b));
  const auto g = Graph::trace(sum(c));
  std::vector<const void*> seen{a.identity()};
  for (const auto& r : g.records()) {
    for (const void* in : r.inputs) EXPECT_NE(std::find(seen.begin(), seen.end(), in), seen.end()) << r.op;
    seen.push_back(r.output);
  }
}

TEST(Gradients, ElementwiseOps) {
  EXPECT_LT(op_grad_error({{2, 3}, {2, 3}}, [](auto& x) { return add(x[0], x[1]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}, {2, 3}}, [](auto& x) { return sub(x[0], x[1]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}, {2, 3}}, [](auto& x) { return mul(x[0], x[1]); }), 1e-4);
  EXPECT_LT(op_grad_error({{3, 2}}, [](auto& x) { return mul(add(x[0], 0.5), -1.5); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 7}}, [](auto& x) { return sigmoid(x[0]); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 7}}, [](auto& x) { return tanh(x[0]); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 7}}, [](auto& x) { return relu(x[0]); }), 1e-4);
}

TEST(Gradients, StructuralOps) {
  EXPECT_LT(op_grad_error({{2, 3}, {3, 4}}, [](auto& x) { return matmul(x[0], x[1]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}, {3, 4}, {1, 4}}, [](auto& x) { return affine(x[0], x[1], x[2]); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 3}, {1, 2}}, [](auto& x) { return concat({x[0], x[1]}); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 3}, {1, 3}}, [](auto& x) { return concat_rows({x[0], x[1]}); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 6}}, [](auto& x) { return slice(x[0], 2, 3); }), 1e-4);
  EXPECT_LT(op_grad_error({{4, 3}}, [](auto& x) { return row_of(x[0], 2); }), 1e-4);
  EXPECT_LT(op_grad_error({{3, 5}}, [](auto& x) { return reduce_max_rows(x[0]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}}, [](auto& x) { return reshape(x[0], {3, 2}); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}, {2, 3}, {2, 3}}, [](auto& x) { return add_n({x[0], x[1], x[2]}); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 5}}, [](auto& x) { return softmax_cross_entropy(x[0], 3); }), 1e-4);
  EXPECT_LT(op_grad_error({{1, 4}, {1, 4}}, [](auto& x) { return mse_loss(x[0], x[1]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 3}}, [](auto& x) { return mean(x[0]); }), 1e-4);
}

TEST(Gradients, ImageOps) {
  EXPECT_LT(op_grad_error({{2, 5, 6}, {3, 2, 3, 3}, {3}}, [](auto& x) { return conv2d(x[0], x[1], x[2]); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 6, 4}}, [](auto& x) { return max_pool2d(x[0], 2); }), 1e-4);
  EXPECT_LT(op_grad_error({{2, 6, 6}}, [](auto& x) { return avg_pool2d(x[0], 3); }), 1e-4);
  EXPECT_LT(op_grad_error({{3, 4, 5}}, [](auto& x) { return global_avg_pool(x[0]); }), 1e-4);
}

TEST(Conv2d, MatchesDirectSum) {
  Rng rng(11);
  Tensor in = random_tensor({2, 4, 5}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = random_tensor({3}, rng);
  Tensor out = conv2d(in, w, b);
  ASSERT_EQ(out.shape(), (Shape{3, 4, 5}));
  for (std::size_t o = 0; o < 3; ++o)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) {
        double s = b.at(o);
        for (std::size_t c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = y + ky - 1, xx = x + kx - 1;
              if (yy < 0 || yy >= 4 || xx < 0 || xx >= 5) continue;
              s += in.at(c * 20 + yy * 5 + xx) * w.at(((o * 2 + c) * 3 + ky) * 3 + kx);
            }
        EXPECT_NEAR(out.at(o * 20 + y * 5 + x), s, 1e-12);
      }
}

TEST(ReduceMax, TiesGoToLowestRow) {
  Tensor a = Tensor::row({1.0, 5.0}, true);
  Tensor b = Tensor::row({1.0, 2.0}, true);
  backward(sum(reduce_max_rows(concat_rows({a, b}))));
  EXPECT_EQ(a.grad()[0], 1.0);
  EXPECT_EQ(b.grad()[0], 0.0);
  EXPECT_EQ(a.grad()[1], 1.0);
  EXPECT_EQ(b.grad()[1], 0.0);
}

TEST(GradCheck, QuadraticIsExactUpToRoundoff) {
  for (double eps : {1e-6, 1e-5, 1e-4}) {
    ModelParams p;
    Tensor w = p.add("w", Tensor::row({0.3, -1.7, 2.2}, true));
    const auto r = finite_diff_check(p, [&] { return sum(mul(mul(w, w), 1.5)); }, eps);
    EXPECT_LT(r.max_rel_error, 1e-8) << eps;
    EXPECT_EQ(r.coords_checked, 3u);
  }
}

TEST(GradCheck, EmptyModelReturnsZero) {
  ModelParams p;
  EXPECT_EQ(finite_diff_check(p, [] { return Tensor::scalar(1.0); }, 1e-5).max_rel_error, 0.0);
}

TEST(GradCheck, RejectsNonFiniteLoss) {
  ModelParams p;
  Tensor w = p.add("w", Tensor::row({1.0}, true));
  EXPECT_THROW(finite_diff_check(p, [] { return Tensor::scalar(std::nan("")); }, 1e-5), Error);
  EXPECT_THROW(finite_diff_check(p, [&] { return sum(w); }, 0.0), UsageError);
}

TEST(Adam, ZeroGradsLeaveParamsUnchanged) {
  ModelParams p;
  Tensor w = p.add("w", Tensor::row({1.0, -2.0}, true));
  AdamState s(AdamConfig{0.1});
  for (int t = 1; t <= 5; ++t) {
    p.zero_grad();
    adam_step(p, s);
    EXPECT_EQ(s.t, static_cast<std::uint64_t>(t));
    EXPECT_EQ(w.at(0), 1.0);
    EXPECT_EQ(w.at(1), -2.0);
  }
}

TEST(Adam, FirstStepMagnitudeIsAlpha) {
  for (double g : {-3.0, 0.01, 250.0}) {
    ModelParams p;
    Tensor w = p.add("w", Tensor::row({0.0}, true));
    AdamState s(AdamConfig{1e-3});
    p.zero_grad();
    w.mutable_grad()[0] = g;
    adam_step(p, s);
    EXPECT_NEAR(std::abs(w.at(0)), 1e-3, 1e-8);
    EXPECT_EQ(w.grad()[0], 0.0);
  }
}

TEST(Adam, ConvergesOnQuadratic) {
  ModelParams p;
  Tensor w = p.add("w", Tensor::row({0.0}, true));
  AdamState s(AdamConfig{0.1});
  for (int i = 0; i < 200; ++i) {
    p.zero_grad();
    Tensor d = add(w, -3.0);
    backward(sum(mul(d, d)));
    adam_step(p, s);
  }
  EXPECT_LT(std::abs(w.at(0) - 3.0), 0.1);
}

TEST(Adam, MissingGradientIsAnError) {
  ModelParams p;
  p.add("w", Tensor::row({0.0}, true));
  AdamState s;
  EXPECT_THROW(adam_step(p, s), UsageError);
}

TEST(Adam, FrozenParamsAreSkipped) {
  ModelParams p;
  Tensor w = p.add("w", Tensor::row({1.0}, false));
  AdamState s(AdamConfig{0.5});
  adam_step(p, s);
  EXPECT_EQ(w.at(0), 1.0);
}

TEST(Rng, StreamsAreDeterministic) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng::derive(7, 1, 2), d = Rng::derive(7, 1, 2), e = Rng::derive(7, 1, 3);
  EXPECT_EQ(c.next_u64(), d.next_u64());
  EXPECT_NE(Rng::derive(7, 1, 2).next_u64(), e.next_u64());
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.range(-5, 5);
    EXPECT_GE(v, -5);
    EXPECT_LE(v, 5);
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}
