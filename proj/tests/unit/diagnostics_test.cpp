#include <cmath>

#include "check_helpers.hpp"

using namespace graded;

namespace {

ExperimentConfig tiny(const std::string& task, std::size_t steps = 0) {
  ExperimentConfig c = smoke_config(task, 1, steps);
  c.data.eval_sequences = 4;
  return c;
}

std::size_t csv_count_sum(const std::string& csv, std::size_t column) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::size_t total = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string cell;
    for (std::size_t c = 0; c <= column; ++c) std::getline(row, cell, ',');
    total += std::stoul(cell);
  }
  return total;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  for (const std::string task : {"modp", "dyck", "retrieval"}) {
    const ExperimentConfig c = default_config(task);
    EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
    // β/T_sm sits in the recommended [5, 20] band.
    const double ratio = c.routing.beta / c.routing.temperature;
    EXPECT_GE(ratio, 5.0);
    EXPECT_LE(ratio, 20.0);
  }
}

TEST(Config, ErrorsNameTheField) {
  try {
    config_from_json(Json::parse(R"({"model": {"layers": 7}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "model.layers");
  }
  try {
    config_from_json(Json::parse(R"({"routing": {"betta": 2}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("betta"), std::string::npos);
  }
  EXPECT_THROW(config_from_json(Json::parse(R"({"task": "sorting"})")), ConfigError);
}

TEST(Datasets, JsonlRoundTripsEveryTask) {
  for (const std::string task : {"modp", "dyck", "retrieval"}) {
    const ExperimentConfig c = tiny(task);
    const Experiment ex = build_experiment(c);
    const std::string text = dataset_to_jsonl(ex.eval, c);
    const Dataset back = dataset_from_jsonl(text, ex.model.grading());
    ASSERT_EQ(back.tokens.size(), ex.eval.tokens.size()) << task;
    EXPECT_EQ(back.task, task);
    EXPECT_EQ(back.starts, ex.eval.starts);
    for (std::size_t i = 0; i < back.tokens.size(); ++i) {
      EXPECT_EQ(back.tokens[i].target, ex.eval.tokens[i].target);
      EXPECT_EQ(back.tokens[i].input, ex.eval.tokens[i].input) << task << " token " << i;
    }
    EXPECT_EQ(dataset_to_jsonl(back, c), text);
  }
}

TEST(Datasets, JsonlFieldOrderIsStable) {
  const ExperimentConfig c = tiny("dyck");
  const Experiment ex = build_experiment(c);
  const std::string text = dataset_to_jsonl(ex.eval, c);
  const std::string first = text.substr(0, text.find('\n'));
  EXPECT_LT(first.find("\"seq\""), first.find("\"pos\""));
  EXPECT_LT(first.find("\"pos\""), first.find("\"symbol\""));
  EXPECT_LT(first.find("\"depth_before\""), first.find("\"target\""));
}

TEST(Checkpoints, RoundTripPreservesEveryParameter) {
  Experiment ex = build_experiment(tiny("retrieval", 3));
  train(ex);
  const Json j = checkpoint_to_json(Checkpoint{ex.model, std::nullopt, 3});
  const Checkpoint back = checkpoint_from_json(Json::parse(j.dump()));
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(checkpoint_to_json(back).dump(), j.dump());
  EXPECT_EQ(trace_dataset(back.model, ex.eval).lm, trace_dataset(ex.model, ex.eval).lm);
}

TEST(Checkpoints, MissingFileIsAnError) { EXPECT_THROW(load_checkpoint("/nonexistent/ck.json"), Error); }

TEST(Diagnostics, ZeroRouterStartsAtMaximalEntropy) {
  ModelSpec spec = verify_detail::small_spec(NormKind::kNone, false, false);
  spec.router_init_scale = 0.0;
  const GradedModel model(spec, 2);
  Rng rng(3);
  const Batch batch = verify_detail::random_batch(spec.grading, spec.classes, 2, 4, rng);
  Tape t;
  const ForwardResult f = model.forward(t, model.bind(t), batch);
  for (const LayerRecord& rec : f.layers)
    for (std::size_t i = 0; i < batch.size(); ++i) {
      double h = 0.0;
      for (std::size_t e = 0; e < rec.alpha.cols(); ++e) h -= ops::xlogx(rec.alpha.value()(i, e));
      EXPECT_NEAR(h, std::log(static_cast<double>(model.edges().size())), 1e-12);
    }
}

TEST(Diagnostics, HistogramAndCalibrationConserveTokens) {
  const Experiment ex = build_experiment(tiny("modp"));
  const RoutingTrace tr = trace_dataset(ex.model, ex.eval);
  const std::size_t expected = ex.eval.tokens.size() * ex.model.edges().size() * ex.model.layers();
  EXPECT_EQ(csv_count_sum(utility_histogram_csv(tr, ex.model, "pre"), 5), expected);
  EXPECT_EQ(csv_count_sum(calibration_csv(tr, "pre"), 4), expected);
}

TEST(Diagnostics, AblatingEveryEdgeEqualsResidualOnlyBaseline) {
  const Experiment ex = build_experiment(tiny("dyck"));
  ForwardOptions all, zero;
  all.ablated.assign(ex.model.layers(), std::vector<bool>(ex.model.edges().size(), true));
  zero.zero_gates = true;
  EXPECT_EQ(trace_dataset(ex.model, ex.eval, all).lm, trace_dataset(ex.model, ex.eval, zero).lm);
}

TEST(Diagnostics, EdgeParsingByLabelAndIndex) {
  const Grading g({"sem", "num"}, {2, 2});
  EXPECT_EQ(parse_edge(g, "sem:num"), (Edge{0, 1}));
  EXPECT_EQ(parse_edge(g, "1:0"), (Edge{1, 0}));
  EXPECT_THROW(parse_edge(g, "sem"), Error);
  EXPECT_THROW(parse_edge(g, "sem:ret"), Error);
}

TEST(Diagnostics, UnknownEdgeAblationIsRejected) {
  ExperimentConfig c = tiny("modp");
  c.model.band = {-1};
  const Experiment ex = build_experiment(c);
  EXPECT_THROW(ablate_edges(ex.model, ex.eval, {Edge{0, 1}}), Error);
}

TEST(Diagnostics, EvaluationIsIndependentOfChunking) {
  const Experiment ex = build_experiment(tiny("retrieval"));
  const RoutingTrace a = trace_dataset(ex.model, ex.eval, {}, 1), b = trace_dataset(ex.model, ex.eval, {}, 32);
  EXPECT_EQ(a.token_loss, b.token_loss);
}

TEST(DiagnosticsProperties, Determinism) { EXPECT_CHECK_PASSES(check_determinism); }
TEST(DiagnosticsProperties, Conservation) { EXPECT_CHECK_PASSES(check_diagnostic_conservation); }
TEST(DiagnosticsProperties, AblationSanity) { EXPECT_CHECK_PASSES(check_ablation_sanity); }

TEST(Verify, ReportReflectsResults) {
  std::vector<CheckResult> results;
  run_suite("category", VerifyOptions{}, [&](const CheckResult& r) { results.push_back(r); });
  const Json report = report_to_json(results, "category", VerifyOptions{});
  EXPECT_EQ(report["checks"].size(), results.size());
  EXPECT_TRUE(report["pass"].get<bool>());
  for (const auto& c : report["checks"]) EXPECT_EQ(c["suite"], "category");
  EXPECT_THROW(run_suite("nope", VerifyOptions{}, [](const CheckResult&) {}), Error);
}
