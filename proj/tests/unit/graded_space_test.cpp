#include "check_helpers.hpp"

using namespace graded;

namespace {

Grading three_grades() { return Grading({"a", "b", "c"}, {2, 3, 4}); }

BlockMap random_block(const Grading& g, Grade src, Grade dst, Rng& rng) {
  return BlockMap{src, dst, rng.normal_tensor(g.dim(dst), g.dim(src)), std::nullopt};
}

}  // namespace

TEST(GradedSpace, ProjectOfIncludeIsZeroOffGrade) {
  const Grading g = three_grades();
  Rng rng(1);
  const GradedVector z = include(g, rng.normal_tensor(5, 3), 1);
  EXPECT_EQ(ops::max_abs(project(z, 0)), 0.0);
  EXPECT_EQ(ops::max_abs(project(z, 2)), 0.0);
}

TEST(GradedSpace, SumOfIncludedProjectionsReassemblesExactly) {
  const Grading g = three_grades();
  Rng rng(2);
  const Tensor amb = rng.normal_tensor(4, g.ambient_dim());
  const GradedVector z = GradedVector::split(g, amb);
  Tensor sum(4, g.ambient_dim());
  for (Grade k = 0; k < g.size(); ++k) sum = ops::add(sum, include(g, project(z, k), k).assemble());
  EXPECT_EQ(ops::max_abs_diff(sum, amb), 0.0);
}

TEST(GradedSpace, DuplicateLabelsRejected) { EXPECT_THROW(Grading({"a", "a"}, {1, 2}), GradingError); }

TEST(GradedSpace, IdentityBlockLeavesGradeUnchanged) {
  const Grading g = three_grades();
  Rng rng(3);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(2, g.ambient_dim()));
  const Tensor y = apply_block(BlockMap{2, 2, Tensor::identity(4), std::nullopt}, z);
  EXPECT_EQ(ops::max_abs_diff(y, z.block(2)), 0.0);
}

TEST(GradedSpace, ShiftBlockMovesOneHot) {
  for (std::size_t d = 0; d < 7; ++d) {
    Tensor x(1, 7);
    x(0, d) = 1.0;
    const Tensor y = apply_block(BlockMap{0, 1, modp_shift_matrix(7, 3), std::nullopt}, x);
    EXPECT_EQ(y(0, (d + 3) % 7), 1.0);
    EXPECT_EQ(ops::sum(y), 1.0);
  }
}

TEST(GradedSpace, ComposeWithIdentityBankKeepsBlocks) {
  const Grading g = three_grades();
  Rng rng(4);
  BlockSet phi;
  phi[{0, 1}] = random_block(g, 0, 1, rng);
  phi[{1, 2}] = random_block(g, 1, 2, rng);
  const BlockSet left = compose_blocks(identity_blocks(g), phi);
  const BlockSet right = compose_blocks(phi, identity_blocks(g));
  for (const auto& [e, b] : phi) {
    EXPECT_EQ(ops::max_abs_diff(left.at(e).weight, b.weight), 0.0);
    EXPECT_EQ(ops::max_abs_diff(right.at(e).weight, b.weight), 0.0);
  }
}

TEST(GradedSpace, ChainCompositionMatchesDenseProduct) {
  const Grading g = three_grades();
  Rng rng(5);
  BlockSet phi, psi;
  phi[{0, 1}] = random_block(g, 0, 1, rng);
  phi[{0, 0}] = random_block(g, 0, 0, rng);
  psi[{1, 2}] = random_block(g, 1, 2, rng);
  psi[{0, 2}] = random_block(g, 0, 2, rng);
  const Tensor dense = ops::matmul(to_dense(g, psi), to_dense(g, phi));
  EXPECT_LT(ops::max_abs_diff(to_dense(g, compose_blocks(psi, phi)), dense), 1e-12);
}

TEST(GradedSpace, DisjointEdgeSetsComposeToNothing) {
  const Grading g = three_grades();
  Rng rng(6);
  BlockSet phi, psi;
  phi[{0, 1}] = random_block(g, 0, 1, rng);
  psi[{2, 0}] = random_block(g, 2, 0, rng);
  EXPECT_TRUE(compose_blocks(psi, phi).empty());
}

TEST(GradedSpace, BandedEdgesFollowIncrements) {
  const Grading g({"g0", "g1", "g2", "g3"}, {2, 2, 2, 2});
  const EdgeSet e = EdgeSet::banded(g, {0, 1});
  EXPECT_EQ(e.size(), 7u);
  for (Grade a = 0; a < 4; ++a)
    for (Grade b = 0; b < 4; ++b) EXPECT_EQ(e.contains({a, b}), b == a || b == a + 1);
}

TEST(Lgt, BlocksWithSameIncrementShareWeights) {
  const Grading g({"g0", "g1", "g2"}, {3, 3, 3});
  const LgtLayer layer = build_banded_lgt(g, {0, 1}, 9);
  EXPECT_EQ(&layer.block({0, 1}), &layer.block({1, 2}));
  EXPECT_EQ(&layer.block({0, 0}), &layer.block({2, 2}));
  EXPECT_NE(&layer.block({0, 0}), &layer.block({0, 1}));
}

TEST(Lgt, ParameterCountClosedForms) {
  EXPECT_EQ(param_count_attention(4, 16, 8, 2), 5120u);
  EXPECT_EQ(param_count_attention(4, 16, 8, 0), 4u * 2u * 16u * 8u);
  EXPECT_EQ(param_count_ffn(16, {32, 32}), 2048u);
  EXPECT_EQ(param_count_ffn(16, {}), 0u);
}

TEST(Egt, IdentityReweightingLeavesBlocksUnchanged) {
  const Grading g({"g0", "g1"}, {3, 3});
  const BlockSet blocks = build_banded_lgt(g, {-1, 0, 1}, 4).realize();
  const EgtReweighting id = EgtReweighting::from_ratio(Tensor::identity(3), Tensor::identity(3), 2);
  const BlockSet out = egt_conjugate(blocks, id, ConjugateDirection::kToLgt);
  for (const auto& [e, b] : blocks) EXPECT_EQ(ops::max_abs_diff(out.at(e).weight, b.weight), 0.0);
}

TEST(Egt, ConjugationRoundTrips) {
  const Grading g({"g0", "g1", "g2"}, {3, 3, 3});
  Rng rng(8);
  const BlockSet blocks = build_banded_lgt(g, {-1, 0, 1}, 4).realize();
  Tensor ratio = Tensor::identity(3), base = Tensor::identity(3);
  for (std::size_t i = 0; i < 3; ++i) {
    ratio(i, i) = rng.uniform(0.5, 2.0);
    base(i, i) = rng.uniform(0.5, 2.0);
  }
  const EgtReweighting d = EgtReweighting::from_ratio(ratio, base, 3);
  const BlockSet there = egt_conjugate(blocks, d, ConjugateDirection::kToLgt);
  const BlockSet back = egt_conjugate(there, d, ConjugateDirection::kFromLgt);
  for (const auto& [e, b] : blocks) EXPECT_LT(ops::max_abs_diff(back.at(e).weight, b.weight), 1e-10);
}

TEST(Normalize, LayerNormBlocksHaveZeroMean) {
  const Grading g({"g0", "g1"}, {4, 6});
  Rng rng(12);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(8, 10, 3.0));
  const GradedVector n = graded_normalize(z, NormKind::kLayerNorm, {GradeNormParams::unit(4), GradeNormParams::unit(6)}, 1e-5);
  for (Grade k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 8; ++i) {
      double m = 0.0;
      for (std::size_t j = 0; j < g.dim(k); ++j) m += n.block(k)(i, j);
      EXPECT_LT(std::abs(m / static_cast<double>(g.dim(k))), 1e-12);
    }
}

TEST(Normalize, RmsNormKeepsUnitRmsBlock) {
  const Grading g({"g0"}, {4});
  const GradedVector z(g, {Tensor::row({1.0, -1.0, 1.0, -1.0})});
  const GradedVector n = graded_normalize(z, NormKind::kRmsNorm, {GradeNormParams::unit(4)}, 1e-12);
  EXPECT_LT(ops::max_abs_diff(n.block(0), z.block(0)), 1e-11);
}

TEST(LeastSquares, ZeroTargetsGiveZeroBlocks) {
  const Grading g({"g0", "g1"}, {3, 2});
  Rng rng(13);
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(50, 5));
  const GradedVector y = GradedVector::zeros(g, 50);
  for (const auto& [e, b] : fit_blocks_least_squares(z, y, EdgeSet::complete(g))) EXPECT_LT(ops::max_abs(b.weight), 1e-12);
}

TEST(LeastSquares, RecoversPlantedBlocks) {
  const Grading g({"g0", "g1"}, {3, 4});
  Rng rng(14);
  const std::size_t n = 10000;
  const GradedVector z = GradedVector::split(g, rng.normal_tensor(n, 7));
  const Tensor w01 = rng.normal_tensor(4, 3), w11 = rng.normal_tensor(4, 4), w00 = rng.normal_tensor(3, 3);
  GradedVector y = GradedVector::zeros(g, n);
  y.block(0) = ops::add(ops::apply_linear(z.block(0), w00), rng.normal_tensor(n, 3, 0.1));
  y.block(1) = ops::add(ops::add(ops::apply_linear(z.block(0), w01), ops::apply_linear(z.block(1), w11)), rng.normal_tensor(n, 4, 0.1));
  EdgeSet edges({{0, 0}, {0, 1}, {1, 1}});
  const BlockSet fit = fit_blocks_least_squares(z, y, edges);
  EXPECT_LT(ops::frobenius(ops::sub(fit.at({0, 1}).weight, w01)) / ops::frobenius(w01), 0.05);
  EXPECT_LT(ops::frobenius(ops::sub(fit.at({1, 1}).weight, w11)) / ops::frobenius(w11), 0.05);
  EXPECT_LT(ops::frobenius(ops::sub(fit.at({0, 0}).weight, w00)) / ops::frobenius(w00), 0.05);
}

TEST(GradedSpaceProperties, GradingRoundTrip) { EXPECT_CHECK_PASSES(check_grading_roundtrip); }
TEST(GradedSpaceProperties, BlockComposition) { EXPECT_CHECK_PASSES(check_block_composition); }
TEST(GradedSpaceProperties, LgtSharing) { EXPECT_CHECK_PASSES(check_lgt_sharing); }
TEST(GradedSpaceProperties, ParameterCounts) { EXPECT_CHECK_PASSES(check_param_counts); }
TEST(GradedSpaceProperties, LeastSquaresDecoupling) { EXPECT_CHECK_PASSES(check_least_squares_decoupling); }
TEST(GradedSpaceProperties, NormalizationCovariance) { EXPECT_CHECK_PASSES(check_normalization_covariance); }
