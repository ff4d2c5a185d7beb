#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

TEST(ModP, ZeroShiftIsIdentity) { EXPECT_EQ(modp_shift_matrix(7, 0), Tensor::identity(7)); }

TEST(ModP, ShiftMapsByIndexArithmetic) {
  const Tensor p = modp_shift_matrix(5, 2);
  Tensor e4(5, 1);
  e4(4, 0) = 1.0;
  const Tensor y = ops::matmul(p, e4);
  EXPECT_EQ(y(1, 0), 1.0);
  EXPECT_EQ(ops::sum(y), 1.0);
}

TEST(ModP, ShiftHasOrderDividingP) {
  for (std::size_t a = 0; a < 7; ++a) {
    Tensor acc = Tensor::identity(7);
    for (int i = 0; i < 7; ++i) acc = ops::matmul(modp_shift_matrix(7, a), acc);
    EXPECT_EQ(acc, Tensor::identity(7)) << "a=" << a;
  }
}

TEST(ModP, DatasetIsReproducibleAndConsistent) {
  const ModPDataset a = gen_modp_dataset(7, 3, 1, 42), b = gen_modp_dataset(7, 3, 1, 42);
  EXPECT_EQ(a.digits, b.digits);
  EXPECT_EQ(a.targets, b.targets);
  const ModPDataset z = gen_modp_dataset(7, 0, 100, 1);
  EXPECT_EQ(z.digits, z.targets);
}

TEST(ModP, DigitsAreNearUniform) {
  const std::size_t p = 7, n = 100000;
  const ModPDataset ds = gen_modp_dataset(p, 3, n, 9);
  std::vector<double> freq(p, 0.0);
  for (std::size_t d : ds.digits) freq[d] += 1.0 / static_cast<double>(n);
  for (double f : freq) EXPECT_LT(std::abs(f - 1.0 / p), 4.0 * std::sqrt(static_cast<double>(p) / n));
}

TEST(ModP, ExactUtilityValues) {
  EXPECT_NEAR(modp_exact_utility(7, 3, 5.0).post, 0.0396319, 1e-7);
  EXPECT_NEAR(modp_exact_utility(7, 3, 5.0).post, std::log1p(6.0 * std::exp(-5.0)), 1e-15);
  EXPECT_EQ(modp_exact_utility(7, 3, 0.0).utility, 0.0);
  EXPECT_LT(modp_exact_utility(7, 3, 50.0).post, 1e-19);
}

TEST(Retrieval, SharpSoftmaxSelectsBestKey) {
  const RetrievalTask t = make_retrieval_task(8, 16, 1e-3, 4.0, 3);
  const RetrievalRoundtrip rt = retrieval_roundtrip(t, query_with_scores(t, {0.1, 0.9, 0.3, 0.0, 0.2, 0.5, 0.4, 0.6}));
  EXPECT_EQ(rt.i_star, 1u);
  EXPECT_GT(rt.r(0, 1), 1.0 - 1e-12);
}

TEST(Retrieval, TightInstanceAttainsExactMass) {
  // Every competitor exactly γ below: r_{i*} = 1/(1 + (k−1)e^{−γ/σ²}).
  const RetrievalTask t = make_retrieval_task(8, 16, 0.5, 4.0, 4);
  std::vector<double> scores(8, 0.0);
  scores[2] = 3.0;
  const RetrievalRoundtrip rt = retrieval_roundtrip(t, query_with_scores(t, scores));
  EXPECT_NEAR(rt.r(0, 2), retrieval_tight_mass(8, 3.0, 0.5), 1e-12);
  EXPECT_GT(rt.utility, 0.0);
}

TEST(Retrieval, StatedBoundHoldsForTwoKeys) {
  const RetrievalTask t = make_retrieval_task(2, 4, 0.5, 4.0, 5);
  for (double gamma : {0.1, 0.5, 1.0, 3.0}) {
    const RetrievalRoundtrip rt = retrieval_roundtrip(t, query_with_scores(t, {gamma, 0.0}));
    EXPECT_GE(rt.r(0, 0), rt.mass_bound);
  }
}

TEST(Retrieval, TiedKeysAreRejected) {
  const RetrievalTask t = make_retrieval_task(4, 8, 0.5, 4.0, 6);
  EXPECT_THROW(retrieval_roundtrip(t, query_with_scores(t, {1.0, 1.0, 0.0, 0.0})), Error);
}

TEST(Dyck, DepthTraceOfNestedPrefix) {
  EXPECT_EQ(dyck_trace({+1, +1, -1}), (std::vector<double>{1.0, 2.0, 1.0}));
  EXPECT_TRUE(dyck_trace({}).empty());
}

TEST(Dyck, GeneratedStringsAreBalancedAndBounded) {
  const DyckDataset ds = gen_dyck_dataset(6, 1000, 4, 7);
  for (const DyckSequence& s : ds.sequences) {
    EXPECT_EQ(s.depth_after.back(), 0u);
    const std::vector<double> trace = dyck_trace(s.deltas);
    for (std::size_t t = 0; t < s.symbols.size(); ++t) {
      EXPECT_LE(s.depth_after[t], 4u);
      EXPECT_EQ(trace[t], static_cast<double>(s.depth_after[t]));
    }
  }
}

TEST(Dyck, DepthHistogramCoversEveryDepth) {
  const DyckDataset ds = gen_dyck_dataset(6, 10000, 4, 8);
  std::vector<std::size_t> hist(5, 0);
  for (const DyckSequence& s : ds.sequences)
    for (std::size_t d : s.depth_before) ++hist.at(d);
  for (std::size_t d = 0; d <= 4; ++d) EXPECT_GT(hist[d], 0u) << "depth " << d;
}

TEST(TasksProperties, ModPExactness) { EXPECT_CHECK_PASSES(check_modp_exactness); }
// The stated mass bound is false for k ≥ 3 on tight instances; this check reports that.
TEST(TasksProperties, RetrievalMassBound) { EXPECT_CHECK_PASSES(check_retrieval_mass_bound); }
TEST(TasksProperties, RetrievalTightBound) { EXPECT_CHECK_PASSES(check_retrieval_tight_bound); }
TEST(TasksProperties, DyckTracking) { EXPECT_CHECK_PASSES(check_dyck_tracking); }
