#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

TEST(Objective, SoftplusMarginValues) {
  EXPECT_NEAR(softplus_margin(0.0, 3.0), std::log(2.0), 1e-15);
  const double tail = softplus_margin(-100.0, 1.0);
  EXPECT_TRUE(std::isfinite(tail));
  EXPECT_LT(tail, 1e-40);
  EXPECT_NEAR(softplus_margin(800.0, 1.0), 800.0, 1e-12);
}

TEST(Objective, SoftplusStaysWithinLog2OfHinge) {
  for (int i = -400; i <= 400; ++i) {
    const double u = 0.05 * i;
    const double gap = softplus_margin(u, 1.0) - std::max(0.0, u);
    EXPECT_GE(gap, 0.0);
    EXPECT_LE(gap, std::log(2.0) + 1e-15);
  }
}

TEST(Objective, SparsityPenaltyConventions) {
  const std::vector<double> uniform(4, 0.25), one_hot{0.0, 1.0, 0.0, 0.0}, halves{0.5, 0.5};
  EXPECT_NEAR(sparsity_penalty(uniform, Regularizer::kEntropy), -std::log(4.0), 1e-15);
  EXPECT_EQ(sparsity_penalty(one_hot, Regularizer::kEntropy), 0.0);
  const std::vector<std::size_t> two_groups{0, 1};
  EXPECT_DOUBLE_EQ(sparsity_penalty(halves, Regularizer::kGroupLasso, two_groups), 1.0);
}

TEST(Objective, MarginAtThresholdIsLog2PerEdge) {
  Tape t;
  const Var tau = t.leaf(Tensor::row({0.2, 0.5, -0.1}));
  const Var u = t.constant(ops::broadcast_rows(tau.value(), 4));
  const Tensor m = detail::margin_rows(u, tau, 7.0).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(m(i, 0), 3.0 * std::log(2.0), 1e-14);
}

TEST(Objective, ThresholdGradientClosedForm) {
  Tape t;
  const Var tau = t.leaf(Tensor::row({0.3, 0.1}));
  LayerRecord rec;
  rec.utility = t.constant(ops::broadcast_rows(tau.value(), 5));
  rec.thresholds = tau;
  EXPECT_EQ(threshold_gradient(rec, 0, 0.0, 4.0), 0.0);
  // σ(0) = ½, and raising τ raises ψ, so the sign is positive.
  EXPECT_NEAR(threshold_gradient(rec, 1, 0.2, 4.0), 0.2 * 4.0 / 2.0, 1e-15);
}

TEST(Objective, ZeroWeightsReduceToLanguageModelLoss) {
  const ModelSpec spec = verify_detail::small_spec(NormKind::kLayerNorm, true, true);
  GradedModel model(spec, 3);
  Rng rng(4);
  const Batch batch = verify_detail::random_batch(spec.grading, spec.classes, 2, 4, rng);
  ObjectiveConfig cfg;
  cfg.lambda = 0.0;
  cfg.mu_sp = 0.0;
  Tape t;
  const ObjectiveResult r = graded_objective(t, model, model.bind(t), batch, cfg);
  EXPECT_EQ(r.breakdown.total, r.breakdown.lm);
}

TEST(Objective, ZeroLearningRateLeavesParameters) {
  const ModelSpec spec = verify_detail::small_spec(NormKind::kRmsNorm, false, true);
  GradedModel model(spec, 5);
  const std::vector<Tensor> before = verify_detail::param_values(model);
  Rng rng(6);
  const Batch batch = verify_detail::random_batch(spec.grading, spec.classes, 2, 4, rng);
  TrainConfig tc;
  tc.lr = 0.0;
  Optimizer opt(tc);
  ObjectiveConfig cfg;
  cfg.mu_sp = 0.1;
  for (int s = 0; s < 3; ++s) train_step(model, opt, batch, cfg);
  const std::vector<Tensor> after = verify_detail::param_values(model);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]) << model.params()[i].name;
}

TEST(Objective, FrozenModPProgramTrainsRouter) {
  ExperimentConfig c = default_config("modp");
  c.modp.freeze_program = true;
  c.train.steps = 200;
  c.data.train_sequences = 64;
  c.data.eval_sequences = 16;
  Experiment ex = build_experiment(c);
  const double initial = trace_dataset(ex.model, ex.eval).lm;
  train(ex);
  const RoutingTrace tr = trace_dataset(ex.model, ex.eval);
  const EvalSummary s = summarize(tr, ex.model, ex.eval, ex.designated);
  EXPECT_LT(tr.lm, initial);
  EXPECT_GT(s.designated_mass, 0.9);
}

TEST(Objective, DeterministicKernelEstimatorIsExact) {
  Tensor logits(1, 3, kMaskedLogit);
  logits(0, 1) = 0.0;
  const Tensor costs = Tensor::row({1.0, 2.0, 3.0});
  Rng rng(7);
  const ScoreFunctionEstimate est = kernel_sample_step(logits, costs, 50, rng);
  EXPECT_EQ(ops::max_abs_diff(est.mean, est.exact), 0.0);
}

TEST(Objective, SymmetricKernelHasZeroGradient) {
  Rng rng(8);
  const ScoreFunctionEstimate est = kernel_sample_step(Tensor(2, 3), Tensor(2, 3, 1.5), 200, rng);
  EXPECT_LT(ops::max_abs(est.exact), 1e-15);
  // Without a baseline the sample mean is only zero in expectation.
  for (std::size_t k = 0; k < est.mean.size(); ++k) EXPECT_LE(std::abs(est.mean[k]), 4.0 * est.std_error[k]);
}

TEST(ObjectiveProperties, ThresholdGradient) { EXPECT_CHECK_PASSES(check_threshold_gradient); }
TEST(ObjectiveProperties, LowerBound) { EXPECT_CHECK_PASSES(check_objective_lower_bound); }
TEST(ObjectiveProperties, ScoreFunctionEstimator) { EXPECT_CHECK_PASSES(check_score_function); }
TEST(ObjectiveProperties, EgtInvariance) { EXPECT_CHECK_PASSES(check_egt_invariance); }
