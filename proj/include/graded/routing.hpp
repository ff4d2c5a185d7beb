#pragma once

#include <functional>
#include <string>
#include <vector>

#include "graded/grading.hpp"
#include "graded/normalize.hpp"

namespace graded {

enum class GateKind { kSoftmaxGlobal, kSoftmaxPerDestination, kLogistic, kHardArgmax };

inline std::string to_string(GateKind k) {
  switch (k) {
    case GateKind::kSoftmaxGlobal: return "softmax-global";
    case GateKind::kSoftmaxPerDestination: return "softmax-per-destination";
    case GateKind::kLogistic: return "logistic";
    case GateKind::kHardArgmax: return "hard-argmax";
  }
  return "softmax-global";
}

inline GateKind gate_kind_from(const std::string& s) {
  if (s == "softmax-global") return GateKind::kSoftmaxGlobal;
  if (s == "softmax-per-destination") return GateKind::kSoftmaxPerDestination;
  if (s == "logistic") return GateKind::kLogistic;
  if (s == "hard-argmax") return GateKind::kHardArgmax;
  throw Error("unknown gate kind '" + s + "'");
}

// Replace: z^(h) ← φ(z^(g)).  Residual: grade-shifting blocks add φ(z^(g)) to
// z^(h); grade-preserving blocks still replace.
enum class UpdateMode { kReplace, kResidual };

inline std::string to_string(UpdateMode m) { return m == UpdateMode::kReplace ? "replace" : "residual"; }
inline UpdateMode update_mode_from(const std::string& s) {
  if (s == "replace") return UpdateMode::kReplace;
  if (s == "residual") return UpdateMode::kResidual;
  throw Error("unknown update mode '" + s + "'");
}

struct RoutingConfig {
  double beta = 5.0;         // utility sharpness
  double temperature = 1.0;  // softmax temperature T_sm
  GateKind gate = GateKind::kSoftmaxGlobal;
  bool utility_in_logits = true;
  std::size_t rank = 8;
  UpdateMode mode = UpdateMode::kReplace;

  void validate() const {
    if (!(beta > 0.0)) throw Error("routing.beta must be positive");
    if (!(temperature > 0.0)) throw Error("routing.temperature must be positive");
    if (rank == 0) throw Error("routing.rank must be positive");
  }
};

// Eager layer used by the verification paths: a block per admissible edge.
struct MorphicLayer {
  Grading grading;
  EdgeSet edges;
  BlockSet blocks;

  const BlockMap& block(const Edge& e) const {
    if (!edges.contains(e)) throw GradingError("inadmissible edge " + edge_name(grading, e));
    return blocks.at(e);
  }
};

struct Candidate {
  Tensor target;  // z̃^(h)
  Tensor delta;   // z̃^(h) − z^(h)
};

inline Candidate candidate_update(const MorphicLayer& layer, const GradedVector& z, const Edge& e,
                                  UpdateMode mode = UpdateMode::kReplace) {
  const Tensor phi = apply_block(layer.block(e), z);
  const Tensor& zh = z.block(e.second);
  if (mode == UpdateMode::kResidual && e.first != e.second) return {ops::add(zh, phi), phi};
  return {phi, ops::sub(phi, zh)};
}

// z⁺ = z − z^(h) + z̃^(h).
inline GradedVector apply_candidate(const GradedVector& z, const Edge& e, const Candidate& c) {
  GradedVector out = z;
  out.block(e.second) = c.target;
  return out;
}

using LossFn = std::function<Tensor(const GradedVector&)>;  // per-token loss, (B x 1)

// ΔL_t = L(z_t) − L(z_t⁺), one entry per token.
inline Tensor instantaneous_utility(const LossFn& lm_loss, const GradedVector& z, const MorphicLayer& layer,
                                    const Edge& e, UpdateMode mode = UpdateMode::kReplace) {
  const Tensor before = lm_loss(z);
  const Tensor after = lm_loss(apply_candidate(z, e, candidate_update(layer, z, e, mode)));
  if (!before.all_finite()) throw NonFiniteError("instantaneous_utility: non-finite loss at z");
  if (!after.all_finite()) throw NonFiniteError("instantaneous_utility: non-finite loss at z+");
  return ops::sub(before, after);
}

// Column order of the full routing table: (g, h) lexicographic over G x G.
inline std::vector<Edge> routing_table(const Grading& grading) { return EdgeSet::complete(grading).edges(); }

struct RouterParams {
  Tensor context;                 // r x D
  std::vector<Tensor> value;      // per grade, r x d_g
  std::map<Edge, Tensor> bilinear;  // admissible edges only, r x r
};

// Mean of concatenated states over the causal prefix s ≤ t of each sequence.
// Tokens of one sequence are contiguous and in order.
inline Tensor prefix_mean_matrix(const std::vector<std::size_t>& sequence) {
  const std::size_t n = sequence.size();
  Tensor a(n, n);
  std::size_t start = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0 && sequence[t] != sequence[t - 1]) start = t;
    const double w = 1.0 / static_cast<double>(t - start + 1);
    for (std::size_t s = start; s <= t; ++s) a(t, s) = w;
  }
  return a;
}

inline Tensor context_summary(const GradedVector& z, const std::vector<std::size_t>& sequence) {
  return ops::matmul(prefix_mean_matrix(sequence), z.assemble());
}

// ℓ_t(h←g) = u_tᵀ W_{h←g} v(z_t^(g)) over the full table, sentinel off E.
inline Tensor routing_logits(const RouterParams& router, const Tensor& context, const GradedVector& z,
                             const EdgeSet& edges) {
  const auto table = routing_table(z.grading());
  const Tensor u = ops::apply_linear(context, router.context);
  Tensor out(z.batch(), table.size(), kMaskedLogit);
  for (std::size_t c = 0; c < table.size(); ++c) {
    const Edge& e = table[c];
    if (!edges.contains(e)) continue;
    const Tensor v = ops::apply_linear(z.block(e.first), router.value.at(e.first));
    const Tensor uw = ops::matmul(u, router.bilinear.at(e));
    const Tensor l = ops::sum_cols(ops::mul(uw, v));
    for (std::size_t i = 0; i < z.batch(); ++i) out(i, c) = l(i, 0);
  }
  return out;
}

// ℓ̃ = ℓ + β(ΔL − τ); sentinel columns are left untouched.
inline Tensor augment_logits(const Tensor& logits, const Tensor& utility, double beta, const Tensor& thresholds) {
  ops::require_same("augment_logits", logits, utility);
  if (thresholds.rows() != 1 || thresholds.cols() != logits.cols())
    throw ShapeError("augment_logits", extents_pair(logits, thresholds));
  Tensor out = logits;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j)
      if (out(i, j) != kMaskedLogit) out(i, j) += beta * (utility(i, j) - thresholds(0, j));
  return out;
}

inline std::vector<std::size_t> gate_groups(GateKind kind, const std::vector<Edge>& columns) {
  std::vector<std::size_t> group(columns.size(), 0);
  if (kind == GateKind::kSoftmaxPerDestination)
    for (std::size_t j = 0; j < columns.size(); ++j) group[j] = columns[j].second;
  return group;
}

// Gate over the columns of `augmented`; sentinel columns get exactly zero.
inline Tensor gate(const Tensor& augmented, const RoutingConfig& cfg, const std::vector<Edge>& columns) {
  if (columns.size() != augmented.cols()) throw ShapeError("gate", augmented.extents());
  bool any = false;
  for (std::size_t j = 0; j < augmented.cols() && !any; ++j)
    for (std::size_t i = 0; i < augmented.rows(); ++i)
      if (augmented(i, j) != kMaskedLogit) { any = true; break; }
  if (!any) throw GradingError("gate: empty admissible edge set");

  Tensor scaled = augmented;
  for (auto& v : scaled.data())
    if (v != kMaskedLogit) v /= cfg.temperature;

  switch (cfg.gate) {
    case GateKind::kSoftmaxGlobal:
    case GateKind::kSoftmaxPerDestination:
      return ops::grouped_softmax_rows(scaled, gate_groups(cfg.gate, columns));
    case GateKind::kLogistic:
      return ops::map(scaled, [](double x) { return x == kMaskedLogit ? 0.0 : ops::sigmoid(x); });
    case GateKind::kHardArgmax: {
      Tensor out(scaled.rows(), scaled.cols());
      for (std::size_t i = 0; i < scaled.rows(); ++i) {
        std::size_t best = scaled.cols();
        for (std::size_t j = 0; j < scaled.cols(); ++j) {
          if (scaled(i, j) == kMaskedLogit) continue;
          if (best == scaled.cols() || scaled(i, j) > scaled(i, best)) best = j;
        }
        out(i, best) = 1.0;
      }
      return out;
    }
  }
  return scaled;
}

// Per-edge candidate deltas, indexed like `edges`.
inline std::vector<Candidate> all_candidates(const MorphicLayer& layer, const GradedVector& z,
                                             UpdateMode mode = UpdateMode::kReplace) {
  std::vector<Candidate> c;
  for (const Edge& e : layer.edges) c.push_back(candidate_update(layer, z, e, mode));
  return c;
}

struct NormSpec {
  NormKind kind = NormKind::kNone;
  std::vector<GradeNormParams> params;
  double eps = 1e-5;
};

// z^(h) + Σ_{g:(g,h)∈E} α(h←g) δ_{h←g}, then per-grade normalization on grades
// with incoming edges. α is (B x |E|) in edge order.
inline GradedVector morphic_update(const GradedVector& z, const EdgeSet& edges, const std::vector<Candidate>& cands,
                                   const Tensor& alpha, const NormSpec& norm = {}) {
  if (alpha.cols() != edges.size() || cands.size() != edges.size()) throw ShapeError("morphic_update", alpha.extents());
  GradedVector out = z;
  std::vector<bool> touched(z.grading().size(), false);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const Grade h = edges[k].second;
    touched[h] = true;
    out.block(h) = ops::add(out.block(h), ops::scale_rows(cands[k].delta, ops::slice_cols(alpha, k, 1)));
  }
  if (norm.kind == NormKind::kNone) return out;
  return graded_normalize(out, norm.kind, norm.params, norm.eps, touched);
}

// z + η Σ_e α_e δ_e, no normalization.
inline GradedVector step_scaled_update(const GradedVector& z, const EdgeSet& edges, const std::vector<Candidate>& cands,
                                       const Tensor& alpha, double eta) {
  GradedVector out = z;
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const Grade h = edges[k].second;
    out.block(h) = ops::add(out.block(h), ops::scale(ops::scale_rows(cands[k].delta, ops::slice_cols(alpha, k, 1)), eta));
  }
  return out;
}

// Restricts a full-table tensor (B x |G|²) to the admissible columns, in edge order.
inline Tensor table_to_edges(const Tensor& table, const Grading& grading, const EdgeSet& edges) {
  const auto cols = routing_table(grading);
  Tensor out(table.rows(), edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto it = std::find(cols.begin(), cols.end(), edges[k]);
    const std::size_t c = static_cast<std::size_t>(it - cols.begin());
    for (std::size_t i = 0; i < table.rows(); ++i) out(i, k) = table(i, c);
  }
  return out;
}

}  // namespace graded
