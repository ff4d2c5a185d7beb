// Acceptance gate: one PASS/FAIL line per criterion. Every tolerance and time
// budget is pinned below; a criterion fails if either is exceeded.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "graded/graded.hpp"

using namespace graded;

namespace {

namespace tol {
constexpr double kGradientRelError = 1e-4;
constexpr double kGateSumError = 1e-12;
constexpr double kHardGateMass = 0.99;  // enforced inside the check at gap·β/T ≥ 10
constexpr double kKlGap = 1e-12;
constexpr double kGibbsMaxNorm = 1e-8;
constexpr double kFisherSlope = 3.0, kFisherSlopeBand = 0.3;
constexpr double kFisherArgmaxAgreement = 99.0;  // of 100
constexpr double kModPPostLoss = 1e-12;
constexpr double kAdjunctionResidual = 1e-12;
constexpr double kIdempotenceGap = 1e-10;
constexpr double kEgtGap = 1e-8;
constexpr double kSeparableGap = 1e-12;
constexpr double kSharedSlope = 2.0, kSharedSlopeBand = 0.2;
constexpr double kModPLossRatio = 0.1;
constexpr double kDesignatedMass = 0.9;
constexpr double kPositiveUtilityFraction = 0.9;
}  // namespace tol

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string title;
  double budget_seconds;
  std::function<Outcome()> run;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

const VerifyOptions kOptions{};

Outcome from_check(const CheckResult& r, bool pass, const std::string& detail) {
  return {pass && r.trials > 0, detail + " over " + std::to_string(r.trials) + " trials"};
}

Outcome gradient_fidelity() {
  const CheckResult r = check_gradient_fidelity(kOptions);
  return from_check(r, r.measured < tol::kGradientRelError,
                    "max relative error " + fmt(r.measured) + " < " + fmt(tol::kGradientRelError) + " on " +
                        fmt(r.metric("coordinates")) + " coordinates");
}

Outcome masking() {
  const CheckResult r = check_masking(kOptions);
  return from_check(r, r.metric("off_edge_nonzero") == 0.0 && r.measured <= tol::kGateSumError,
                    "off-E nonzero " + fmt(r.metric("off_edge_nonzero")) + ", on-E sum error " + fmt(r.measured));
}

Outcome hard_gating() {
  const CheckResult r = check_hard_gating(kOptions);
  return from_check(r, r.measured <= 0.0 && r.metric("non_monotone") == 0.0 && r.metric("qualifying_points") > 0.0,
                    "mass shortfall below " + fmt(tol::kHardGateMass) + ": " + fmt(r.measured) + ", non-monotone " +
                        fmt(r.metric("non_monotone")) + ", qualifying points " + fmt(r.metric("qualifying_points")));
}

Outcome kl_identity() {
  const CheckResult r = check_kl_identity(kOptions);
  return from_check(r, r.measured < tol::kKlGap, "max gap " + fmt(r.measured));
}

Outcome gibbs() {
  const CheckResult r = check_gibbs(kOptions);
  return from_check(r, r.measured < tol::kGibbsMaxNorm, "max inf-norm vs projected gradient " + fmt(r.measured));
}

Outcome utility_bounds() {
  const CheckResult r = check_utility_bounds(kOptions);
  return from_check(r, r.measured == 0.0, "violations " + fmt(r.measured) + " (sandwich and gradient-step cases)");
}

Outcome fisher() {
  const CheckResult r = check_fisher_gain(kOptions);
  const double slope = r.metric("slope"), agree = r.metric("argmax_agreement");
  return from_check(r, std::abs(slope - tol::kFisherSlope) <= tol::kFisherSlopeBand && agree >= tol::kFisherArgmaxAgreement,
                    "remainder slope " + fmt(slope) + ", argmax agreement " + fmt(agree) + "/100");
}

Outcome modp_exactness() {
  const CheckResult r = check_modp_exactness(kOptions);
  return from_check(r, r.metric("group_law") == 0.0 && r.metric("program_composite") == 0.0 && r.metric("post_loss") < tol::kModPPostLoss,
                    "group law " + fmt(r.metric("group_law")) + ", composite " + fmt(r.metric("program_composite")) +
                        ", post-loss error " + fmt(r.metric("post_loss")) + " for p in {5,7,11}");
}

Outcome retrieval_mass_bound() {
  const CheckResult r = check_retrieval_mass_bound(kOptions);
  return from_check(r, r.metric("violations") == 0.0,
                    "stated-bound violations " + fmt(r.metric("violations")) + " (worst shortfall " + fmt(r.measured) +
                        "); exact tight-bound violations " + fmt(r.metric("tight_bound_violations")));
}

Outcome adjoint() {
  const CheckResult a = check_adjoint(kOptions);
  const CheckResult p = check_projector(kOptions);
  const double resid = a.metric("adjunction_residual"), idem = a.metric("idempotence");
  Outcome o = from_check(a, resid < tol::kAdjunctionResidual && idem < tol::kIdempotenceGap && p.pass,
                         "adjunction residual " + fmt(resid) + ", idempotence gap " + fmt(idem) + ", projector spectrum " +
                             fmt(p.measured));
  return o;
}

Outcome param_counts() {
  const CheckResult r = check_param_counts(kOptions);
  return from_check(r, r.measured == 0.0, "mismatches " + fmt(r.measured) + " in " + fmt(r.metric("comparisons")) + " comparisons");
}

Outcome egt_invariance() {
  const CheckResult r = check_egt_invariance(kOptions);
  return from_check(r, r.measured < tol::kEgtGap, "max L_GT / utility gap " + fmt(r.measured));
}

Outcome additive_gains() {
  const CheckResult r = check_additive_gains(kOptions);
  const double sep = r.metric("separable_gap"), slope = r.metric("slope");
  return from_check(r, sep < tol::kSeparableGap && std::abs(slope - tol::kSharedSlope) <= tol::kSharedSlopeBand,
                    "separable gap " + fmt(sep) + ", shared-softmax slope " + fmt(slope));
}

Outcome monotone_descent() {
  const CheckResult r = check_monotone_descent(kOptions);
  return from_check(r, r.measured == 0.0 && r.trials == 500,
                    "failures " + fmt(r.measured) + ", min relative decrease " + fmt(r.metric("min_relative_decrease")));
}

Outcome end_to_end() {
  std::ostringstream detail;
  bool pass = true;
  {
    Experiment ex = build_experiment(default_config("modp"));
    const double initial = trace_dataset(ex.model, ex.eval).lm;
    train(ex);
    const EvalSummary s = summarize(trace_dataset(ex.model, ex.eval), ex.model, ex.eval, ex.designated);
    const bool ok = ex.config.train.steps <= 5000 && s.lm < tol::kModPLossRatio * initial && s.designated_mass > tol::kDesignatedMass;
    pass = pass && ok;
    detail << "modp L_LM " << fmt(initial) << " -> " << fmt(s.lm) << " mass " << fmt(s.designated_mass) << "; ";
  }
  for (const std::string task : {"dyck", "retrieval"}) {
    Experiment ex = build_experiment(default_config(task));
    train(ex);
    const EvalSummary s = summarize(trace_dataset(ex.model, ex.eval), ex.model, ex.eval, ex.designated);
    pass = pass && s.designated_positive > tol::kPositiveUtilityFraction;
    detail << task << " positive " << fmt(s.designated_positive) << "; ";
  }
  return {pass, detail.str()};
}

Outcome determinism() {
  const CheckResult r = check_determinism(kOptions, 200);
  return from_check(r, r.measured == 0.0, "mismatched artifacts " + fmt(r.measured) + " across modp, dyck, retrieval");
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "gradient fidelity", 30, gradient_fidelity},
      {2, "masking exactness", 5, masking},
      {3, "hard-gating limit", 5, hard_gating},
      {4, "KL-utility identity", 5, kl_identity},
      {5, "Gibbs closed form", 30, gibbs},
      {6, "utility bounds", 5, utility_bounds},
      {7, "Fisher quadratic gain", 10, fisher},
      {8, "mod-p exactness", 5, modp_exactness},
      {9, "retrieval mass bound", 5, retrieval_mass_bound},
      {10, "adjoint construction", 5, adjoint},
      {11, "parameter counts", 5, param_counts},
      {12, "EGT invariance", 10, egt_invariance},
      {13, "additive gains", 10, additive_gains},
      {14, "monotone descent", 30, monotone_descent},
      {15, "end-to-end training", 600, end_to_end},
      {16, "determinism", 60, determinism},
  };
  int failed = 0;
  for (const Criterion& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < c.budget_seconds;
    const bool pass = o.pass && in_budget;
    failed += pass ? 0 : 1;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << std::setw(2) << c.id << "] " << c.title << ": " << o.detail << " ("
              << std::fixed << std::setprecision(2) << secs << "s of " << c.budget_seconds << "s"
              << (in_budget ? "" : ", over budget") << ")" << std::defaultfloat << '\n'
              << std::flush;
  }
  std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
