#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

namespace {

SoftmaxHead random_head(std::size_t c, std::size_t d, Rng& rng) { return {rng.normal_tensor(c, d), rng.normal_tensor(1, c)}; }

}  // namespace

TEST(Geometry, SelfConsistentUtilityIsNegativeKl) {
  Rng rng(1);
  const SoftmaxHead head = random_head(5, 4, rng);
  const Tensor z = rng.normal_tensor(1, 4), zp = ops::add(z, rng.normal_tensor(1, 4, 0.3));
  const KlIdentity r = kl_utility_identity(head.probs(z), z, zp, head);
  EXPECT_LE(r.lhs, 0.0);
  EXPECT_NEAR(r.lhs, -kl_divergence(head.probs(z), head.probs(zp)), 1e-12);
}

TEST(Geometry, UnchangedStateHasZeroUtility) {
  Rng rng(2);
  const SoftmaxHead head = random_head(11, 3, rng);
  const Tensor z = rng.normal_tensor(1, 3);
  const KlIdentity r = kl_utility_identity(ops::softmax_rows(rng.normal_tensor(1, 11)), z, z, head);
  EXPECT_EQ(r.lhs, 0.0);
  EXPECT_EQ(r.rhs, 0.0);
}

TEST(Geometry, GibbsWeightsLimits) {
  const Tensor tau = Tensor::row({0.1, 0.2, 0.3});
  const Tensor equal = gibbs_weights(Tensor::row({0.6, 0.7, 0.8}), tau, 0.7);
  for (double v : equal.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor hot = gibbs_weights(Tensor::row({0.0, 1.0, 2.0}), tau, 1e8);
  for (double v : hot.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Geometry, GibbsMatchesProjectedGradientOnFiveEdges) {
  Rng rng(3);
  Tensor u(1, 5), tau(1, 5);
  for (std::size_t j = 0; j < 5; ++j) {
    u(0, j) = rng.uniform(0.0, 1.0);
    tau(0, j) = rng.uniform(0.0, 0.5);
  }
  const Tensor closed = gibbs_weights(u, tau, 0.7);
  const Tensor oracle = gibbs_projected_gradient(ops::sub(u, tau), 0.7);
  EXPECT_LT(ops::max_abs_diff(closed, oracle), 1e-8);
}

TEST(Geometry, ZeroPerturbationHasZeroGain) {
  Rng rng(4);
  const SoftmaxHead head = random_head(4, 3, rng);
  const FisherGain g = fisher_quadratic_gain(rng.normal_tensor(1, 3), Tensor(1, 3), head);
  EXPECT_EQ(g.kl, 0.0);
  EXPECT_EQ(g.quadratic, 0.0);
}

TEST(Geometry, FisherRemainderShrinksEightfoldPerHalving) {
  Rng rng(5);
  const SoftmaxHead head = random_head(6, 4, rng);
  const Tensor z = rng.normal_tensor(1, 4), dz = rng.normal_tensor(1, 4, 0.05);
  std::vector<double> r, gaps;
  for (int h = 0; h < 6; ++h) {
    const double s = std::ldexp(1.0, -h);
    r.push_back(s);
    gaps.push_back(fisher_quadratic_gain(z, ops::scale(dz, s), head).gap);
  }
  EXPECT_NEAR(loglog_slope(r, gaps), 3.0, 0.3);
}

TEST(Geometry, MirrorStepSpecialSpans) {
  Rng rng(6);
  const Tensor z = rng.normal_tensor(1, 4);
  // Gradient orthogonal to the span leaves z in place.
  Tensor span(4, 2), grad(1, 4);
  span(0, 0) = 1.0;
  span(1, 1) = 1.0;
  grad(0, 2) = 3.0;
  grad(0, 3) = -1.0;
  EXPECT_LT(ops::max_abs_diff(mirror_step(z, grad, span, 0.5), z), 1e-15);
  // Full span gives the plain gradient step.
  const Tensor g = rng.normal_tensor(1, 4);
  EXPECT_LT(ops::max_abs_diff(mirror_step(z, g, Tensor::identity(4), 0.5), ops::sub(z, ops::scale(g, 0.5))), 1e-14);
}

TEST(Geometry, MirrorStepMatchesKktOracle) {
  Rng rng(7);
  const Tensor z = rng.normal_tensor(1, 6), g = rng.normal_tensor(1, 6), span = rng.normal_tensor(6, 3);
  EXPECT_LT(ops::max_abs_diff(mirror_step(z, g, span, 0.3), constrained_quadratic_oracle(z, g, span, 0.3)), 1e-10);
}

TEST(Geometry, IdentityQuadraticGradientStep) {
  Rng rng(8);
  const Tensor zs = rng.normal_tensor(1, 3), z = rng.normal_tensor(1, 3);
  const Tensor grad = ops::sub(z, zs);
  const UtilityBounds b = utility_bounds_check(Tensor::identity(3), zs, z, ops::scale(grad, -1.0));
  EXPECT_NEAR(b.utility, 0.5 * ops::dot(grad, grad), 1e-14);
  EXPECT_TRUE(b.holds(1e-14));
  EXPECT_EQ(gradient_step_lower_bound(2.0 / 4.0, 4.0, 7.0), 0.0);
}

TEST(Geometry, SingleUpdateIsTriviallyAdditive) {
  const Grading g({"a", "b"}, {2, 2});
  const GradedLoss loss = [](const GradedVector& z) { return std::exp(z.block(0)(0, 0)) + z.block(1)(0, 1) * z.block(0)(0, 1); };
  Rng rng(9);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(1, 4));
  const AdditiveGains r = additive_gains_check(loss, z, {GradeUpdate{1, rng.normal_tensor(1, 2)}});
  EXPECT_EQ(r.gap, 0.0);
}

TEST(Geometry, DepthOneProgramHasNoGap) {
  const Grading g({"a", "b"}, {2, 2});
  const GradedLoss loss = [](const GradedVector& z) { return ops::dot(z.block(1), z.block(1)); };
  Rng rng(10);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(1, 4));
  const DepthGap r = program_depth_gap({ProgramStep{0, 1, rng.normal_tensor(2, 2)}}, z, loss);
  EXPECT_EQ(r.program, r.step_sum);
}

TEST(Geometry, ModPProgramGainEqualsCompositeGain) {
  const std::size_t p = 5, a = 2, d = 1;
  const Grading g({"sem", "num"}, {p, p});
  GradedVector z = GradedVector::zeros(g, 1);
  z.block(0)(0, d) = 1.0;
  const GradedLoss loss = [&](const GradedVector& v) {
    const std::size_t y[] = {(d + a) % p};
    return ops::cross_entropy_rows(ops::scale(v.block(0), 5.0), y).item();
  };
  const std::vector<ProgramStep> prog{{0, 1, modp_shift_matrix(p, a)}, {1, 0, Tensor::identity(p)}};
  const DepthGap r = program_depth_gap(prog, z, loss);
  const double composite = loss(z) - loss(apply_step(z, ProgramStep{0, 0, modp_shift_matrix(p, a)}));
  EXPECT_NEAR(r.program, composite, 1e-14);
}

TEST(GeometryProperties, KlIdentity) { EXPECT_CHECK_PASSES(check_kl_identity); }
TEST(GeometryProperties, GibbsClosedForm) { EXPECT_CHECK_PASSES(check_gibbs); }
TEST(GeometryProperties, UtilityBounds) { EXPECT_CHECK_PASSES(check_utility_bounds); }
TEST(GeometryProperties, FisherQuadraticGain) { EXPECT_CHECK_PASSES(check_fisher_gain); }
TEST(GeometryProperties, FisherMatrix) { EXPECT_CHECK_PASSES(check_fisher_matrix); }
TEST(GeometryProperties, AdditiveGains) { EXPECT_CHECK_PASSES(check_additive_gains); }
TEST(GeometryProperties, MirrorStep) { EXPECT_CHECK_PASSES(check_mirror_step); }

TEST(GeometryProperties, InjectedGibbsFaultIsCaught) {
  VerifyOptions o;
  o.inject_gibbs_sign = true;
  EXPECT_FALSE(check_gibbs(o).pass);
}
