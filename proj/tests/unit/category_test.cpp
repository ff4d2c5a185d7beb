#include "check_helpers.hpp"

using namespace graded;

namespace {

Tensor orthonormal_columns(std::size_t rows, std::size_t cols, Rng& rng) {
  return ops::transpose(orthonormal_keys(cols, rows, rng));
}

ToolCatalog modp_catalog(std::size_t p) {
  ToolCatalog cat{Grading({"sem", "num"}, {p, p}), {}, {}};
  cat.add_interface("digit", 0, p);
  cat.add_interface("number", 1, p);
  return cat;
}

}  // namespace

TEST(Category, EmptyProgramRealizesIdentity) {
  const Grading g({"a", "b"}, {2, 3});
  EXPECT_EQ(realize_program(MorphicProgram{g, {}}), Tensor::identity(5));
}

TEST(Category, ModPProgramRealizesShift) {
  const std::size_t p = 7;
  const Grading g({"sem", "num"}, {p, p});
  for (std::size_t k = 0; k < p; ++k) {
    const MorphicProgram prog{g, {BlockMap{0, 1, Tensor::identity(p), std::nullopt},
                                  BlockMap{1, 1, modp_shift_matrix(p, k), std::nullopt},
                                  BlockMap{1, 0, Tensor::identity(p), std::nullopt}}};
    EXPECT_EQ(program_composite(prog), modp_shift_matrix(p, k));
  }
}

TEST(Category, ReversedOrthogonalPathRealizesTranspose) {
  Rng rng(1);
  const Grading g({"a", "b", "c"}, {3, 3, 3});
  const MorphicProgram prog{g, {BlockMap{0, 1, orthonormal_columns(3, 3, rng), std::nullopt},
                                BlockMap{1, 2, orthonormal_columns(3, 3, rng), std::nullopt}}};
  const Tensor fwd = program_composite(prog);
  EXPECT_LT(ops::max_abs_diff(program_composite(reversed_transpose(prog)), ops::transpose(fwd)), 1e-15);
}

TEST(Category, MismatchedProgramIsRejected) {
  const Grading g({"a", "b"}, {2, 3});
  const MorphicProgram bad{g, {BlockMap{0, 1, Tensor(3, 2), std::nullopt}, BlockMap{0, 1, Tensor(3, 2), std::nullopt}}};
  EXPECT_THROW(realize_program(bad), GradingError);
}

TEST(Category, IdentityToolIsFunctorial) {
  ToolCatalog cat = modp_catalog(5);
  Rng rng(2);
  const Tool id{"id", "digit", "digit", Tensor::identity(5)};
  const Tool f{"f", "digit", "number", rng.normal_tensor(5, 5)};
  EXPECT_EQ(check_functoriality(cat, id, f), 0.0);
}

TEST(Category, ModularAdditionComposesExactly) {
  const std::size_t p = 7;
  ToolCatalog cat = modp_catalog(p);
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t b = 0; b < p; ++b) {
      const Tool add_a{"add_a", "number", "number", modp_shift_matrix(p, a)};
      const Tool add_b{"add_b", "number", "number", modp_shift_matrix(p, b)};
      EXPECT_EQ(check_functoriality(cat, add_a, add_b), 0.0);
      EXPECT_EQ(chain(add_a, add_b).map, modp_shift_matrix(p, (a + b) % p));
    }
}

TEST(Category, CalculatorTrianglesHold) {
  ToolCatalog cat{Grading({"sem", "num"}, {6, 4}), {}, {}};
  cat.add_interface("operand", 0, 3, 1);
  cat.add_interface("value", 1, 3);
  const TriangleResiduals r = check_adjunction_triangles(cat);
  EXPECT_LT(r.left, 1e-10);
  EXPECT_LT(r.right, 1e-10);
}

TEST(Category, PerturbedDecoderResidualIsLinearInEpsilon) {
  Rng rng(3);
  const Tensor noise = rng.normal_tensor(3, 4);
  std::vector<double> res;
  for (double eps : {1e-3, 2e-3, 4e-3}) {
    ToolCatalog cat{Grading({"sem"}, {4}), {}, {}};
    Interface& x = cat.add_interface("x", 0, 3);
    x.decoder = ops::add(x.decoder, ops::scale(noise, eps));
    const TriangleResiduals r = check_adjunction_triangles(cat);
    res.push_back(std::max(r.left, r.right));
  }
  EXPECT_GT(res[0], 0.0);
  EXPECT_NEAR(res[1] / res[0], 2.0, 0.05);
  EXPECT_NEAR(res[2] / res[1], 2.0, 0.05);
}

TEST(Category, IdentityMetricWithSquareOrthonormalKeys) {
  Rng rng(4);
  const Tensor keys = orthonormal_keys(4, 4, rng);
  const Tensor enc = rng.normal_tensor(4, 3);
  const AdjointPair pair = build_retrieval_adjoint(keys, enc, Tensor::identity(3));
  EXPECT_LT(ops::max_abs_diff(pair.rho, ops::transpose(enc)), 1e-14);
  EXPECT_LT(pair.residual, 1e-12);
}

TEST(Category, OrthonormalEmbeddingGivesExactProjector) {
  Rng rng(5);
  const Tensor keys = orthonormal_keys(5, 5, rng);
  const Tensor enc = orthonormal_columns(5, 3, rng);
  const ProjectorReport r = round_trip_projector(build_retrieval_adjoint(keys, enc, Tensor::identity(3)));
  EXPECT_LT(r.idempotence, 1e-14);
  EXPECT_LT(r.q_identity, 1e-14);
  EXPECT_LT(r.iterate, 1e-13);
  EXPECT_TRUE(r.isometry);
}

TEST(Category, SoftmaxRetrievalApproachesLinearizationAsTemperatureFalls) {
  Rng rng(6);
  const Tensor keys = orthonormal_keys(4, 6, rng);
  const Tensor enc = rng.normal_tensor(6, 6);
  double prev = softmax_linearization_gap(keys, enc, 1.0);
  for (double tau : {0.3, 0.1, 0.03}) {
    const double gap = softmax_linearization_gap(keys, enc, tau);
    EXPECT_LT(gap, prev);
    prev = gap;
  }
  EXPECT_LT(prev, 1e-10);
}

TEST(Category, NonSpdMetricIsRejected) {
  Rng rng(7);
  EXPECT_THROW(build_retrieval_adjoint(orthonormal_keys(3, 3, rng), rng.normal_tensor(3, 2), Tensor(2, 2)), Error);
}

TEST(CategoryProperties, AdjointConstruction) { EXPECT_CHECK_PASSES(check_adjoint); }
TEST(CategoryProperties, RoundTripProjector) { EXPECT_CHECK_PASSES(check_projector); }
TEST(CategoryProperties, Internalization) { EXPECT_CHECK_PASSES(check_internalization); }
TEST(CategoryProperties, ProgramAssociativity) { EXPECT_CHECK_PASSES(check_program_associativity); }
