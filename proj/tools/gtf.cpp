// gtf: train, evaluate, diagnose and verify graded routed models.
//
// Exit status: 0 success, 1 a verification check failed, 2 usage, config or
// input error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/spdlog.h>

#include "graded/graded.hpp"

namespace fs = std::filesystem;
using namespace graded;

namespace {

constexpr int kExitFail = 1;
constexpr int kExitUsage = 2;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::string initial;
  std::string data;
  std::string edge;
  std::string suite = "all";
  std::string fault;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = default_config("modp");
  if (!o.config_path.empty()) {
    Json j;
    try {
      j = Json::parse(read_text(o.config_path));
    } catch (const Json::parse_error& e) {
      throw ConfigError("<file>", std::string("not valid JSON: ") + e.what());
    }
    c = config_from_json(j);
  }
  if (o.seed) {
    c.seed = *o.seed;
    c.train.seed = *o.seed;
  }
  if (!o.out.empty()) c.out = o.out;
  validate(c);
  return c;
}

fs::path ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

// Evaluation data: an explicit JSONL file, the eval split regenerated from the
// config (which must match the checkpoint's grading), or eval_data.jsonl
// beside the checkpoint.
Dataset load_eval_data(const Options& o, const GradedModel& model) {
  if (!o.data.empty()) return dataset_from_jsonl(read_text(o.data), model.grading());
  if (o.config_path.empty()) {
    const fs::path beside = fs::path(o.checkpoint).parent_path() / "eval_data.jsonl";
    if (!fs::exists(beside)) throw ConfigError("--data", "required unless --config is given or eval_data.jsonl sits beside the checkpoint");
    return dataset_from_jsonl(read_text(beside.string()), model.grading());
  }
  Experiment ex = build_experiment(resolve_config(o));
  if (!(ex.eval.grading == model.grading())) throw ConfigError("--config", "grading differs from the checkpoint's");
  return ex.eval;
}

DesignatedEdge designated_for(const Dataset& ds, const GradedModel& model) {
  const DesignatedEdge d = designated_edge(ds.task, model.layers());
  if (!model.edges().contains(d.edge)) throw Error("checkpoint does not admit the " + ds.task + " designated edge");
  return d;
}

int cmd_train(const Options& o) {
  const ExperimentConfig cfg = resolve_config(o);
  spdlog::info("resolved config:\n{}", config_to_json(cfg).dump(2));
  const fs::path dir = ensure_dir(cfg.out);
  Experiment ex = build_experiment(cfg);
  write_text((dir / "config.json").string(), config_to_json(cfg).dump(2) + "\n");
  write_text((dir / "train_data.jsonl").string(), dataset_to_jsonl(ex.train, cfg));
  write_text((dir / "eval_data.jsonl").string(), dataset_to_jsonl(ex.eval, cfg));
  save_checkpoint((dir / "checkpoint_init.json").string(), Checkpoint{ex.model, std::nullopt, 0});

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw Error("cannot write metrics.jsonl");
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  train(ex, [&](const StepMetrics& m) {
    metrics << metrics_to_json(m).dump() << '\n';
    if ((m.step + 1) % every == 0) spdlog::info("step {} lm {:.6g} total {:.6g}", m.step + 1, m.objective.lm, m.objective.total);
  });
  metrics.close();
  save_checkpoint((dir / "checkpoint_final.json").string(), Checkpoint{ex.model, std::nullopt, cfg.train.steps});

  const EvalSummary s = summarize(trace_dataset(ex.model, ex.eval), ex.model, ex.eval, ex.designated);
  write_text((dir / "summary.json").string(), summary_to_json(s).dump(2) + "\n");
  std::cout << summary_to_json(s).dump() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "required");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Dataset ds = load_eval_data(o, ck.model);
  const RoutingTrace tr = trace_dataset(ck.model, ds);
  Json report = summary_to_json(summarize(tr, ck.model, ds, designated_for(ds, ck.model)));
  report["task"] = ds.task;
  report["step"] = ck.step;
  report["edges"] = Json::array();
  for (std::size_t l = 0; l < ck.model.layers(); ++l)
    for (std::size_t e = 0; e < ck.model.edges().size(); ++e) {
      double mass = 0.0, positive = 0.0;
      for (std::size_t i = 0; i < tr.alpha[l].rows(); ++i) {
        mass += tr.alpha[l](i, e);
        positive += tr.utility[l](i, e) > 0.0 ? 1.0 : 0.0;
      }
      const auto n = static_cast<double>(tr.alpha[l].rows());
      report["edges"].push_back({{"layer", l},
                                 {"edge", edge_name(ck.model.grading(), ck.model.edges()[e])},
                                 {"mean_alpha", mass / n},
                                 {"positive_fraction", positive / n}});
    }
  if (!o.out.empty()) write_text((ensure_dir(o.out) / "eval.json").string(), report.dump(2) + "\n");
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_diagnose(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "required");
  const Checkpoint post = load_checkpoint(o.checkpoint);
  std::optional<Checkpoint> pre;
  fs::path initial = o.initial;
  if (initial.empty()) initial = fs::path(o.checkpoint).parent_path() / "checkpoint_init.json";
  if (fs::exists(initial)) pre = load_checkpoint(initial.string());
  else if (!o.initial.empty()) throw Error("initial checkpoint '" + o.initial + "' not found");
  else spdlog::warn("no initial checkpoint next to {}; pre-training diagnostics skipped", o.checkpoint);

  const Dataset ds = load_eval_data(o, post.model);
  const fs::path dir = ensure_dir(o.out.empty() ? (fs::path(o.checkpoint).parent_path() / "diagnostics").string() : o.out);
  const RoutingTrace post_tr = trace_dataset(post.model, ds);

  std::string hist, entropy, calib;
  if (pre) {
    const RoutingTrace pre_tr = trace_dataset(pre->model, ds);
    hist = utility_histogram_csv(pre_tr, pre->model, "pre");
    entropy = entropy_csv(pre_tr, "pre");
    calib = calibration_csv(pre_tr, "pre");
  }
  hist += utility_histogram_csv(post_tr, post.model, "post", 20, !pre);
  entropy += entropy_csv(post_tr, "post", !pre);
  calib += calibration_csv(post_tr, "post", 10, !pre);
  write_text((dir / "utility_histogram.csv").string(), hist);
  write_text((dir / "entropy.csv").string(), entropy);
  write_text((dir / "calibration.csv").string(), calib);
  write_text((dir / "routing_trace.jsonl").string(), routing_trace_jsonl(post_tr, post.model));

  // Routing entropy over training, when the run's metric stream is beside the checkpoint.
  const fs::path metrics = fs::path(o.checkpoint).parent_path() / "metrics.jsonl";
  if (fs::exists(metrics)) {
    std::istringstream in(read_text(metrics.string()));
    std::ostringstream trace;
    trace.precision(10);
    trace << "step,entropy,lm\n";
    for (std::string line; std::getline(in, line);) {
      if (line.empty()) continue;
      const Json m = Json::parse(line);
      trace << m.at("step").get<std::size_t>() << ',' << m.at("entropy").get<double>() << ',' << m.at("lm").get<double>() << '\n';
    }
    write_text((dir / "entropy_trace.csv").string(), trace.str());
  }

  std::vector<Edge> all(post.model.edges().edges().begin(), post.model.edges().edges().end());
  write_text((dir / "ablation.csv").string(), ablation_csv(post.model, ablate_edges(post.model, ds, all)));

  const EvalSummary s = summarize(post_tr, post.model, ds, designated_for(ds, post.model));
  write_text((dir / "summary.json").string(), summary_to_json(s).dump(2) + "\n");
  spdlog::info("diagnostics written to {}", dir.string());
  std::cout << summary_to_json(s).dump() << '\n';
  return 0;
}

int cmd_ablate(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "required");
  if (o.edge.empty()) throw ConfigError("--edge", "required (g:h or 'all')");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const GradedModel& model = ck.model;
  const Dataset ds = load_eval_data(o, model);

  ForwardOptions opt;
  opt.ablated.assign(model.layers(), std::vector<bool>(model.edges().size(), o.edge == "all"));
  std::string label = "all";
  if (o.edge != "all") {
    Edge e;
    try {
      e = parse_edge(model.grading(), o.edge);
    } catch (const Error& err) {
      throw ConfigError("--edge", err.what());
    }
    const auto k = model.edges().index_of(e);
    if (!k) throw ConfigError("--edge", "'" + o.edge + "' is not an admissible edge");
    for (auto& layer : opt.ablated) layer[*k] = true;
    label = edge_name(model.grading(), e);
  }
  const RoutingTrace base = trace_dataset(model, ds);
  const RoutingTrace cut = trace_dataset(model, ds, opt);

  std::ostringstream csv;
  csv.precision(10);
  csv << "token,seq,pos,base_loss,ablated_loss,delta\n";
  for (std::size_t i = 0; i < ds.tokens.size(); ++i)
    csv << i << ',' << ds.tokens[i].sequence << ',' << ds.tokens[i].position << ',' << base.token_loss(i, 0) << ','
        << cut.token_loss(i, 0) << ',' << cut.token_loss(i, 0) - base.token_loss(i, 0) << '\n';
  const Json report{{"edge", label}, {"tokens", ds.tokens.size()}, {"base_lm", base.lm}, {"ablated_lm", cut.lm},
                    {"mean_degradation", cut.lm - base.lm}};
  if (!o.out.empty()) {
    const fs::path dir = ensure_dir(o.out);
    write_text((dir / "ablation_tokens.csv").string(), csv.str());
    write_text((dir / "ablation.json").string(), report.dump(2) + "\n");
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_verify(const Options& o) {
  VerifyOptions vo;
  vo.seed = o.seed.value_or(0);
  if (!o.fault.empty()) {
    if (o.fault != "gibbs-sign") throw ConfigError("--inject-fault", "only 'gibbs-sign' is supported");
    vo.inject_gibbs_sign = true;
  }
  std::vector<CheckResult> results;
  try {
    run_suite(o.suite, vo, [&](const CheckResult& r) {
      std::cout << (r.pass ? "PASS " : "FAIL ") << r.suite << '/' << r.name << "  " << r.detail << '\n' << std::flush;
      results.push_back(r);
    });
  } catch (const Error& e) {
    throw ConfigError("--suite", e.what());
  }
  const Json report = report_to_json(results, o.suite, vo);
  const fs::path dir = ensure_dir(o.out.empty() ? "." : o.out);
  write_text((dir / ("verify_" + o.suite + ".json")).string(), report.dump(2) + "\n");
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  std::cout << results.size() - failed << '/' << results.size() << " checks passed\n";
  return failed ? kExitFail : 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_pattern("[%l] %v");
  spdlog::cfg::load_env_levels();  // SPDLOG_LEVEL=debug|info|warn|error|off

  CLI::App app{"Graded routed transformer toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoints, metrics and datasets");
  train_cmd->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", o.seed, "override the config seed");
  train_cmd->add_option("--out", o.out, "output directory (overrides config)");

  auto add_eval_inputs = [&](CLI::App* c) {
    c->add_option("--checkpoint", o.checkpoint, "checkpoint JSON")->required();
    c->add_option("--data", o.data, "dataset JSONL (default: eval_data.jsonl beside the checkpoint)");
    c->add_option("--config", o.config_path, "regenerate the eval split from this config instead of --data");
    c->add_option("--seed", o.seed, "override the config seed");
    c->add_option("--out", o.out, "output directory");
  };
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_eval_inputs(eval_cmd);
  auto* diag_cmd = app.add_subcommand("diagnose", "utility histograms, entropy, ablation and calibration");
  add_eval_inputs(diag_cmd);
  diag_cmd->add_option("--initial", o.initial, "pre-training checkpoint (default: checkpoint_init.json beside --checkpoint)");
  auto* ablate_cmd = app.add_subcommand("ablate", "loss degradation with one edge (or all) gated off");
  add_eval_inputs(ablate_cmd);
  ablate_cmd->add_option("--edge", o.edge, "edge g:h by label or index, or 'all'")->required();

  auto* verify_cmd = app.add_subcommand("verify", "run property suites; nonzero exit on any failure");
  verify_cmd->add_option("--suite,suite", o.suite, "suite name or 'all' (also accepted positionally)");
  verify_cmd->add_option("--seed", o.seed, "base seed for randomized checks");
  verify_cmd->add_option("--out", o.out, "directory for the JSON report");
  verify_cmd->add_option("--inject-fault", o.fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*diag_cmd) return cmd_diagnose(o);
    if (*ablate_cmd) return cmd_ablate(o);
    return cmd_verify(o);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitUsage;
  }
}
