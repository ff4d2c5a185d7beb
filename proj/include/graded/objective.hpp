#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "graded/model.hpp"

namespace graded {

enum class Regularizer { kEntropy, kGroupLasso };

inline std::string to_string(Regularizer r) { return r == Regularizer::kEntropy ? "entropy" : "group-lasso"; }
inline Regularizer regularizer_from(const std::string& s) {
  if (s == "entropy") return Regularizer::kEntropy;
  if (s == "group-lasso") return Regularizer::kGroupLasso;
  throw Error("unknown regularizer '" + s + "'");
}

struct ObjectiveConfig {
  double lambda = 0.1;               // margin weight λ
  double mu_sp = 0.0;                // sparsity weight
  std::optional<double> beta;        // margin sharpness; unset = routing β
  Regularizer regularizer = Regularizer::kEntropy;
  bool learnable_thresholds = true;

  void validate() const {
    if (!(lambda >= 0.0)) throw Error("objective.lambda must be nonnegative");
    if (!(mu_sp >= 0.0)) throw Error("objective.mu_sp must be nonnegative");
    if (beta && !(*beta > 0.0)) throw Error("objective.beta must be positive");
  }
  double margin_beta(const RoutingConfig& r) const { return beta.value_or(r.beta); }
};

// ψ(u) = log(1 + e^{βu}), overflow-safe in both tails.
inline double softplus_margin(double u, double beta) { return ops::softplus(beta * u); }

// Ω for one gate vector. Entropy kind returns Σ α log α (≤ 0, the negative
// entropy); group-lasso returns Σ_h ‖α_{·→h}‖₂ over destination groups.
inline double sparsity_penalty(std::span<const double> alpha, Regularizer kind, std::span<const std::size_t> groups = {}) {
  if (kind == Regularizer::kEntropy) {
    double s = 0.0;
    for (double a : alpha) s += ops::xlogx(a);
    return s;
  }
  if (groups.size() != alpha.size()) throw ShapeError("sparsity_penalty", "group labels must match gate count");
  std::map<std::size_t, double> sq;
  for (std::size_t j = 0; j < alpha.size(); ++j) sq[groups[j]] += alpha[j] * alpha[j];
  double s = 0.0;
  for (const auto& [g, v] : sq) s += std::sqrt(v);
  return s;
}

inline std::vector<std::size_t> destination_groups(const EdgeSet& edges) {
  std::vector<std::size_t> g;
  for (const Edge& e : edges) g.push_back(e.second);
  return g;
}

namespace detail {

// Per-token Σ_e ψ(τ_e − ΔL_t(e)), B x 1.
inline Var margin_rows(Var utility, Var thresholds, double beta) {
  const Var gap = ad::sub(ad::broadcast_rows(thresholds, utility.rows()), utility);
  return ad::sum_cols(ad::softplus(ad::scale(gap, beta)));
}

// Per-token regularizer contribution as it enters L_GT (B x 1): the entropy
// H = −Σ α log α, or the group-lasso norm sum. Both are ≥ 0.
inline Var regularizer_rows(Var alpha, Regularizer kind, const std::vector<std::size_t>& groups) {
  if (kind == Regularizer::kEntropy) return ad::scale(ad::sum_cols(ad::xlogx(alpha)), -1.0);
  std::map<std::size_t, std::vector<std::size_t>> by;
  for (std::size_t j = 0; j < groups.size(); ++j) by[groups[j]].push_back(j);
  std::vector<Var> norms;
  for (const auto& [g, cols] : by) {
    std::vector<Var> parts;
    for (std::size_t j : cols) parts.push_back(ad::slice_cols(alpha, j, 1));
    // Tiny offset keeps the square root differentiable at an all-zero group.
    norms.push_back(ad::sqrt(ad::add_constant(ad::sum_cols(ad::square(ad::concat_cols(parts))), 1e-300)));
  }
  return ad::sum_cols(ad::concat_cols(norms));
}

}  // namespace detail

struct ObjectiveBreakdown {
  double total = 0.0;
  double lm = 0.0;
  double margin = 0.0;       // Σ_layers mean_t Σ_e ψ(τ_e − ΔL_t(e)), before λ
  double regularizer = 0.0;  // Σ_layers mean_t R(α_t), before μ_sp
  double omega = 0.0;        // Σ_layers mean_t Σ α log α (raw Ω)
  double entropy = 0.0;      // mean routing entropy per layer-token
};

struct ObjectiveResult {
  Var total;
  ForwardResult forward;
  ObjectiveBreakdown breakdown;
};

// L_GT = L_LM + λ Σ_ℓ mean_t Σ_e ψ(τ_e − ΔL_t(e)) + μ_sp Σ_ℓ mean_t R(α_t).
inline ObjectiveResult graded_objective(Tape& tape, const GradedModel& model, const std::vector<Var>& vars,
                                        const Batch& batch, const ObjectiveConfig& cfg, const ForwardOptions& opt = {}) {
  cfg.validate();
  ObjectiveResult res;
  res.forward = model.forward(tape, vars, batch, opt);
  const double beta = cfg.margin_beta(model.spec().routing);
  const auto groups = destination_groups(model.edges());

  Var total = res.forward.lm_loss;
  auto& bd = res.breakdown;
  bd.lm = total.value().item();
  if (!std::isfinite(bd.lm)) throw NonFiniteError("graded_objective: non-finite term 'lm'");
  for (const LayerRecord& rec : res.forward.layers) {
    const Var margin = ad::mean(detail::margin_rows(rec.utility, rec.thresholds, beta));
    const Var reg = ad::mean(detail::regularizer_rows(rec.alpha, cfg.regularizer, groups));
    bd.margin += margin.value().item();
    bd.regularizer += reg.value().item();
    double omega = 0.0;
    for (std::size_t i = 0; i < rec.alpha.rows(); ++i)
      omega += sparsity_penalty(rec.alpha.value().row_span(i), Regularizer::kEntropy);
    omega /= static_cast<double>(rec.alpha.rows());
    bd.omega += omega;
    bd.entropy += -omega / static_cast<double>(res.forward.layers.size());
    if (cfg.lambda != 0.0) total = ad::add(total, ad::scale(margin, cfg.lambda));
    if (cfg.mu_sp != 0.0) total = ad::add(total, ad::scale(reg, cfg.mu_sp));
  }
  if (!std::isfinite(bd.margin)) throw NonFiniteError("graded_objective: non-finite term 'margin'");
  if (!std::isfinite(bd.regularizer)) throw NonFiniteError("graded_objective: non-finite term 'regularizer'");
  bd.total = total.value().item();
  res.total = total;
  return res;
}

// Closed form of ∂/∂τ_e of the margin term: λβ mean_t σ(β(τ_e − ΔL_t(e))).
// This is the full threshold gradient when utilities stay out of the logits;
// otherwise τ also moves the gates. Nonnegative: raising τ raises every ψ.
inline double threshold_gradient(const LayerRecord& rec, std::size_t edge, double lambda, double beta) {
  const Tensor& u = rec.utility.value();
  const double tau = rec.thresholds.value()(0, edge);
  double s = 0.0;
  for (std::size_t i = 0; i < u.rows(); ++i) s += ops::sigmoid(beta * (tau - u(i, edge)));
  return lambda * beta * s / static_cast<double>(u.rows());
}

// Pointwise bound L_GT ≥ L_LM + λ Σ mean max{0, β(τ−ΔL)} + μ_sp R − λ|E| log 2 per
// layer, in the batch-mean normalization used by graded_objective.
inline double objective_lower_bound(const ObjectiveResult& res, const ObjectiveConfig& cfg, double beta) {
  double hinge = 0.0;
  std::size_t edges = 0;
  for (const LayerRecord& rec : res.forward.layers) {
    const Tensor& u = rec.utility.value();
    const Tensor& tau = rec.thresholds.value();
    double s = 0.0;
    for (std::size_t i = 0; i < u.rows(); ++i)
      for (std::size_t j = 0; j < u.cols(); ++j) s += std::max(0.0, beta * (tau(0, j) - u(i, j)));
    hinge += s / static_cast<double>(u.rows());
    edges += u.cols();
  }
  return res.breakdown.lm + cfg.lambda * hinge + cfg.mu_sp * res.breakdown.regularizer -
         cfg.lambda * static_cast<double>(edges) * std::log(2.0);
}

// ---------------------------------------------------------------------------
// Graded activation kernel: categorical K_θ over E per token, trained by the
// score-function estimator of ∇_θ E_{e∼K_θ}[c_t(e)].
// ---------------------------------------------------------------------------
struct ScoreFunctionEstimate {
  Tensor mean;       // B x |E|
  Tensor std_error;  // B x |E|
  Tensor exact;      // B x |E|, by enumeration
  std::size_t samples = 0;
};

// One-sample estimate c(e)·∇_θ log K_θ(e) = c(e)(1_e − p) for a softmax kernel.
inline Tensor score_function_sample(const Tensor& probs, const Tensor& costs, std::size_t row, std::size_t edge) {
  if (probs(row, edge) <= 0.0) throw Error("kernel_sample_step: sampled edge has zero probability");
  Tensor g(1, probs.cols());
  for (std::size_t j = 0; j < probs.cols(); ++j) g(0, j) = costs(row, edge) * ((j == edge ? 1.0 : 0.0) - probs(row, j));
  return g;
}

// ∇_θ Σ_e p_e c_e = p ⊙ (c − ⟨p, c⟩).
inline Tensor exact_kernel_gradient(const Tensor& logits, const Tensor& costs) {
  const Tensor p = ops::softmax_rows(logits);
  Tensor g(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double avg = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) avg += p(i, j) * costs(i, j);
    for (std::size_t j = 0; j < p.cols(); ++j) g(i, j) = p(i, j) * (costs(i, j) - avg);
  }
  return g;
}

inline ScoreFunctionEstimate kernel_sample_step(const Tensor& logits, const Tensor& costs, std::size_t samples, Rng& rng) {
  ops::require_same("kernel_sample_step", logits, costs);
  if (samples < 2) throw Error("kernel_sample_step: at least two samples required");
  const Tensor p = ops::softmax_rows(logits);
  Tensor sum(p.rows(), p.cols()), sumsq(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    std::discrete_distribution<std::size_t> pick(p.row_span(i).begin(), p.row_span(i).end());
    for (std::size_t n = 0; n < samples; ++n) {
      const Tensor g = score_function_sample(p, costs, i, pick(rng.engine()));
      for (std::size_t j = 0; j < p.cols(); ++j) {
        sum(i, j) += g(0, j);
        sumsq(i, j) += g(0, j) * g(0, j);
      }
    }
  }
  ScoreFunctionEstimate est{Tensor(p.rows(), p.cols()), Tensor(p.rows(), p.cols()), exact_kernel_gradient(logits, costs), samples};
  const double n = static_cast<double>(samples);
  for (std::size_t k = 0; k < p.size(); ++k) {
    est.mean[k] = sum[k] / n;
    const double var = std::max(0.0, (sumsq[k] - n * est.mean[k] * est.mean[k]) / (n - 1.0));
    est.std_error[k] = std::sqrt(var / n);
  }
  return est;
}

// Per-token L_GT contribution when every layer routes hard through one edge:
// c_t(e) = L_LM,t + λ Σ_ℓ Σ_e' ψ(τ_e' − ΔL_t(e')). The regularizer of a one-hot gate is 0.
inline Tensor hard_route_costs(const GradedModel& model, const Batch& batch, const ObjectiveConfig& cfg) {
  const double beta = cfg.margin_beta(model.spec().routing);
  Tensor c(batch.size(), model.edges().size());
  for (std::size_t e = 0; e < model.edges().size(); ++e) {
    Tape tape;
    ForwardOptions opt;
    opt.forced_edge = e;
    const ForwardResult f = model.forward(tape, model.bind(tape), batch, opt);
    Tensor col = f.token_loss.value();
    for (const LayerRecord& rec : f.layers)
      col = ops::add(col, ops::scale(detail::margin_rows(rec.utility, rec.thresholds, beta).value(), cfg.lambda));
    for (std::size_t i = 0; i < batch.size(); ++i) c(i, e) = col(i, 0);
  }
  return c;
}

}  // namespace graded
