#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

TEST(TensorCore, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor p = ops::softmax_rows(Tensor::row({0.0, 0.0, 0.0}));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(TensorCore, CrossEntropyOfUniformLogitsIsLogC) {
  const std::vector<std::size_t> target{4};
  const Tensor ce = ops::cross_entropy_rows(Tensor(1, 7), target);
  EXPECT_NEAR(ce(0, 0), std::log(7.0), 1e-15);
  EXPECT_NEAR(ce(0, 0), 1.945910, 1e-6);
}

TEST(TensorCore, IdentityMatmulIsExact) {
  Rng rng(5);
  const Tensor x = rng.normal_tensor(3, 4);
  EXPECT_EQ(ops::max_abs_diff(ops::matmul(Tensor::identity(3), x), x), 0.0);
}

TEST(TensorCore, MaskedLogitGetsExactlyZeroMass) {
  const Tensor p = ops::softmax_rows(Tensor::row({1.0, kMaskedLogit, -2.0}));
  EXPECT_EQ(p(0, 1), 0.0);
  EXPECT_NEAR(p(0, 0) + p(0, 2), 1.0, 1e-15);
}

TEST(TensorCore, ShapeMismatchThrows) {
  EXPECT_THROW(ops::add(Tensor(2, 3), Tensor(3, 2)), ShapeError);
  EXPECT_THROW(ops::matmul(Tensor(2, 3), Tensor(2, 3)), ShapeError);
}

TEST(Tape, HalfSquaredNormGradientIsIdentity) {
  Tape t;
  const Var x = t.leaf(Tensor::row({1.0, -2.0, 3.0}));
  const Gradients g = t.backward(ad::scale(ad::sum(ad::square(x)), 0.5));
  EXPECT_DOUBLE_EQ(g[x](0, 0), 1.0);
  EXPECT_DOUBLE_EQ(g[x](0, 1), -2.0);
  EXPECT_DOUBLE_EQ(g[x](0, 2), 3.0);
}

TEST(Tape, CrossEntropyGradientMatchesClosedForm) {
  // ∇_z CE(W z, y) = Wᵀ(softmax(W z) − e_y).
  Rng rng(11);
  const Tensor w = rng.normal_tensor(5, 4);
  const Tensor z0 = rng.normal_tensor(1, 4);
  const std::vector<std::size_t> y{2};
  Tape t;
  const Var z = t.leaf(z0);
  const Gradients g = t.backward(ad::sum(ad::cross_entropy_rows(ad::linear(z, t.constant(w)), y)));
  Tensor resid = ops::softmax_rows(ops::apply_linear(z0, w));
  resid(0, 2) -= 1.0;
  const Tensor expected = ops::matmul(resid, w);
  EXPECT_LT(ops::max_abs_diff(g[z], expected), 1e-14);
}

TEST(Tape, LeafNotOnLossPathGetsZeroGradient) {
  Tape t;
  const Var a = t.leaf(Tensor::row({1.0, 2.0}));
  const Var b = t.leaf(Tensor::row({3.0, 4.0}));
  const Gradients g = t.backward(ad::sum(ad::square(a)));
  EXPECT_EQ(ops::max_abs(g[b]), 0.0);
}

TEST(GradCheck, QuadraticIsExactToRoundoff) {
  Rng rng(3);
  const Tensor theta = rng.normal_tensor(2, 3);
  const double err = finite_diff_check([](Tape&, Var v) { return ad::sum(ad::square(v)); }, theta, 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ConstantFunctionHasZeroError) {
  const double err = finite_diff_check([](Tape& t, Var) { return t.constant(Tensor::scalar(2.5)); }, Tensor(2, 2, 1.0), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(TensorCoreProperties, PrimitiveGradients) { EXPECT_CHECK_PASSES(check_primitive_gradients); }
TEST(TensorCoreProperties, FullObjectiveGradientFidelity) { EXPECT_CHECK_PASSES(check_gradient_fidelity); }
TEST(TensorCoreProperties, SoftmaxNormalization) { EXPECT_CHECK_PASSES(check_softmax_normalization); }
