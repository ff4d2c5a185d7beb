#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

namespace {

// Mod-p layer: sem -> num carries P_a, every other admissible block is the identity.
MorphicLayer modp_layer(std::size_t p, std::size_t a) {
  const Grading g({"sem", "num"}, {p, p});
  MorphicLayer layer{g, EdgeSet::complete(g), {}};
  for (const Edge& e : layer.edges) layer.blocks[e] = BlockMap{e.first, e.second, Tensor::identity(p), std::nullopt};
  layer.blocks[{0, 1}].weight = modp_shift_matrix(p, a);
  return layer;
}

GradedVector one_hot_sem(std::size_t p, std::size_t d) {
  const Grading g({"sem", "num"}, {p, p});
  GradedVector z = GradedVector::zeros(g, 1);
  z.block(0)(0, d) = 1.0;
  return z;
}

// Calibrated readout on the num grade: logit s on the encoded digit.
LossFn num_readout_loss(std::size_t target, double s) {
  return [target, s](const GradedVector& z) {
    const std::vector<std::size_t> y(z.batch(), target);
    return ops::cross_entropy_rows(ops::scale(z.block(1), s), y);
  };
}

}  // namespace

TEST(Routing, IdentityDiagonalCandidateIsNoOp) {
  const MorphicLayer layer = modp_layer(5, 2);
  const GradedVector z = one_hot_sem(5, 3);
  const Candidate c = candidate_update(layer, z, {0, 0});
  EXPECT_EQ(ops::max_abs(c.delta), 0.0);
  EXPECT_EQ(apply_candidate(z, {0, 0}, c), z);
}

TEST(Routing, ShiftCandidateWritesShiftedDigit) {
  const MorphicLayer layer = modp_layer(7, 3);
  const GradedVector plus = apply_candidate(one_hot_sem(7, 5), {0, 1}, candidate_update(layer, one_hot_sem(7, 5), {0, 1}));
  EXPECT_EQ(plus.block(1)(0, (5 + 3) % 7), 1.0);
  EXPECT_EQ(ops::sum(plus.block(1)), 1.0);
}

TEST(Routing, ZeroStateGivesZeroCandidate) {
  const MorphicLayer layer = modp_layer(5, 1);
  const Grading g({"sem", "num"}, {5, 5});
  for (const Edge& e : layer.edges)
    EXPECT_EQ(ops::max_abs(candidate_update(layer, GradedVector::zeros(g, 2), e).target), 0.0);
}

TEST(Routing, IdentityBlockHasZeroUtility) {
  const MorphicLayer layer = modp_layer(5, 1);
  const Tensor u = instantaneous_utility(num_readout_loss(2, 4.0), one_hot_sem(5, 1), layer, {1, 1});
  EXPECT_EQ(u(0, 0), 0.0);
}

TEST(Routing, CorrectShiftUtilityRemovesAllButFloorLoss) {
  const std::size_t p = 7, a = 3, d = 2;
  const double s = 5.0;
  const MorphicLayer layer = modp_layer(p, a);
  GradedVector z = one_hot_sem(p, d);
  z.block(1)(0, d) = 1.0;  // num starts as the unshifted digit
  const LossFn loss = num_readout_loss((d + a) % p, s);
  const double before = loss(z)(0, 0);
  const double after = loss(apply_candidate(z, {0, 1}, candidate_update(layer, z, {0, 1})))(0, 0);
  const double u = instantaneous_utility(loss, z, layer, {0, 1})(0, 0);
  EXPECT_NEAR(after, std::log1p(static_cast<double>(p - 1) * std::exp(-s)), 1e-12);
  EXPECT_NEAR(u, before - after, 1e-15);
}

TEST(Routing, OnlyTheCorrectShiftHasMaximalUtility) {
  const std::size_t p = 7, a = 3, d = 4;
  GradedVector z = one_hot_sem(p, d);
  z.block(1)(0, d) = 1.0;
  const LossFn loss = num_readout_loss((d + a) % p, 5.0);
  for (std::size_t b = 0; b < p; ++b) {
    const double u = instantaneous_utility(loss, z, modp_layer(p, b), {0, 1})(0, 0);
    if (b == a) EXPECT_GT(u, 0.0);
    else EXPECT_LE(u, 1e-15);
  }
}

TEST(Routing, ZeroRouterGivesUniformGate) {
  const Grading g({"g0", "g1"}, {2, 3});
  const EdgeSet edges = EdgeSet::complete(g);
  RouterParams router{Tensor(2, 5), {Tensor(2, 2), Tensor(2, 3)}, {}};
  for (const Edge& e : edges) router.bilinear[e] = Tensor(2, 2);
  Rng rng(1);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(3, 5));
  const Tensor logits = routing_logits(router, rng.normal_tensor(3, 5), z, edges);
  EXPECT_EQ(ops::max_abs(logits), 0.0);
  RoutingConfig cfg;
  const Tensor alpha = gate(logits, cfg, routing_table(g));
  for (double v : alpha.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Routing, InadmissibleEdgeGetsSentinelAndZeroGate) {
  const Grading g({"g0", "g1"}, {2, 2});
  const EdgeSet edges({{0, 0}, {0, 1}});
  Rng rng(2);
  RouterParams router{rng.normal_tensor(2, 4), {rng.normal_tensor(2, 2), rng.normal_tensor(2, 2)}, {}};
  for (const Edge& e : edges) router.bilinear[e] = rng.normal_tensor(2, 2);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(3, 4));
  const auto table = routing_table(g);
  const Tensor logits = routing_logits(router, rng.normal_tensor(3, 4), z, edges);
  RoutingConfig cfg;
  const Tensor alpha = gate(logits, cfg, table);
  for (std::size_t c = 0; c < table.size(); ++c)
    for (std::size_t i = 0; i < 3; ++i)
      if (!edges.contains(table[c])) {
        EXPECT_EQ(logits(i, c), kMaskedLogit);
        EXPECT_EQ(alpha(i, c), 0.0);
      }
}

TEST(Routing, AugmentationVanishesAtThreshold) {
  Rng rng(3);
  const Tensor l = rng.normal_tensor(4, 3), u = rng.normal_tensor(4, 3);
  const Tensor tau = Tensor::row({0.1, 0.2, 0.3});
  EXPECT_EQ(ops::max_abs_diff(augment_logits(l, u, 0.0, tau), l), 0.0);
  Tensor at_tau(4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) at_tau(i, j) = tau(0, j);
  EXPECT_EQ(ops::max_abs_diff(augment_logits(l, at_tau, 5.0, tau), l), 0.0);
}

TEST(Routing, UtilityMarginBoundsGateRatio) {
  const double beta = 4.0, T = 0.5, gap = 0.3;
  const Tensor aug = augment_logits(Tensor(1, 2), Tensor::row({1.0, 1.0 - gap}), beta, Tensor(1, 2));
  RoutingConfig cfg;
  cfg.temperature = T;
  const Tensor a = gate(aug, cfg, {{0, 0}, {0, 1}});
  EXPECT_LE(a(0, 1) / a(0, 0), std::exp(-beta * gap / T) * (1.0 + 1e-12));
}

TEST(Routing, LowTemperatureConcentratesOnArgmax) {
  const Tensor aug = Tensor::row({0.3, 1.0, 0.2, -0.5});
  const std::vector<Edge> cols{{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  double prev = 0.0;
  for (double T : {1.0, 0.1, 0.01}) {
    RoutingConfig cfg;
    cfg.temperature = T;
    const double top = gate(aug, cfg, cols)(0, 1);
    EXPECT_GT(top, prev);
    prev = top;
  }
  EXPECT_GT(prev, 0.99);
}

TEST(Routing, LogisticGateApproachesIndicator) {
  RoutingConfig cfg;
  cfg.gate = GateKind::kLogistic;
  cfg.temperature = 1.0;
  const Tensor aug = augment_logits(Tensor(1, 2), Tensor::row({10.0, -10.0}), 5.0, Tensor(1, 2));
  const Tensor a = gate(aug, cfg, {{0, 0}, {0, 1}});
  EXPECT_GT(a(0, 0), 1.0 - 1e-12);
  EXPECT_LT(a(0, 1), 1e-12);
}

TEST(Routing, ZeroGatesLeaveStateExactly) {
  const MorphicLayer layer = modp_layer(5, 2);
  const GradedVector z = one_hot_sem(5, 1);
  const auto cands = all_candidates(layer, z);
  EXPECT_EQ(morphic_update(z, layer.edges, cands, Tensor(1, layer.edges.size())), z);
  EXPECT_EQ(step_scaled_update(z, layer.edges, cands, Tensor(1, layer.edges.size(), 0.25), 0.0), z);
}

TEST(Routing, OneHotUnitStepEqualsMorphicUpdate) {
  const MorphicLayer layer = modp_layer(5, 2);
  Rng rng(4);
  const GradedVector z = GradedVector::split(layer.grading, rng.normal_tensor(3, 10));
  const auto cands = all_candidates(layer, z);
  const std::size_t k = *layer.edges.index_of({0, 1});
  Tensor alpha(3, layer.edges.size());
  for (std::size_t i = 0; i < 3; ++i) alpha(i, k) = 1.0;
  const GradedVector a = morphic_update(z, layer.edges, cands, alpha);
  const GradedVector b = step_scaled_update(z, layer.edges, cands, alpha, 1.0);
  for (Grade g = 0; g < 2; ++g) EXPECT_LT(ops::max_abs_diff(a.block(g), b.block(g)), 1e-15);
}

TEST(RoutingProperties, Masking) { EXPECT_CHECK_PASSES(check_masking); }
TEST(RoutingProperties, HardGating) { EXPECT_CHECK_PASSES(check_hard_gating); }
TEST(RoutingProperties, Selectivity) { EXPECT_CHECK_PASSES(check_selectivity); }
TEST(RoutingProperties, FirstOrderImprovement) { EXPECT_CHECK_PASSES(check_first_order); }
TEST(RoutingProperties, GradingPreservation) { EXPECT_CHECK_PASSES(check_grading_preservation); }
TEST(RoutingProperties, MonotoneDescent) { EXPECT_CHECK_PASSES(check_monotone_descent); }
