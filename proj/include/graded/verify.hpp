#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "graded/category.hpp"
#include "graded/diagnostics.hpp"
#include "graded/geometry.hpp"
#include "graded/gradcheck.hpp"
#include "graded/least_squares.hpp"
#include "graded/normalize.hpp"
#include "graded/objective.hpp"

namespace graded {

// Outcome of one property check. `measured` is the worst observed value of the
// checked quantity and `threshold` the bound it is held to.
struct CheckResult {
  std::string suite;
  std::string name;
  std::size_t trials = 0;
  double measured = 0.0;
  double threshold = 0.0;
  bool pass = false;
  std::string detail;
  std::vector<std::pair<std::string, double>> metrics;

  double metric(const std::string& key) const {
    for (const auto& [k, v] : metrics)
      if (k == key) return v;
    throw Error("check '" + name + "' has no metric '" + key + "'");
  }
};

struct VerifyOptions {
  std::uint64_t seed = 0;
  bool inject_gibbs_sign = false;  // flips the exponent of the Gibbs oracle; the gibbs check must then fail
};

namespace verify_detail {

inline CheckResult at_most(std::string suite, std::string name, std::size_t trials, double measured, double threshold) {
  CheckResult r{std::move(suite), std::move(name), trials, measured, threshold, measured <= threshold, "", {}};
  std::ostringstream os;
  os.precision(3);
  os << "worst " << std::scientific << measured << " vs bound " << threshold << " over " << trials << " trials";
  r.detail = os.str();
  return r;
}

inline Tensor random_spd(std::size_t n, Rng& rng, double floor = 0.5) {
  const Tensor b = rng.normal_tensor(n, n, 1.0 / std::sqrt(static_cast<double>(n)));
  Tensor s = ops::matmul(b, ops::transpose(b));
  for (std::size_t i = 0; i < n; ++i) s(i, i) += floor;
  return s;
}

// Orthonormal columns scaled by factors in [0.5, 2]: condition number ≤ 4.
inline Tensor well_conditioned(std::size_t rows, std::size_t cols, Rng& rng) {
  const Matrix q = Eigen::HouseholderQR<Matrix>(to_eigen(rng.normal_tensor(rows, cols))).householderQ() * Matrix::Identity(rows, cols);
  Tensor out = from_eigen(q);
  for (std::size_t j = 0; j < cols; ++j) {
    const double s = rng.uniform(0.5, 2.0);
    for (std::size_t i = 0; i < rows; ++i) out(i, j) *= s;
  }
  return out;
}

inline Grading random_grading(Rng& rng, std::size_t max_grades, std::size_t max_dim) {
  const std::size_t n = 2 + rng.index(max_grades - 1);
  std::vector<std::size_t> dims;
  for (std::size_t g = 0; g < n; ++g) dims.push_back(1 + rng.index(max_dim));
  std::vector<std::string> labels;
  for (std::size_t g = 0; g < n; ++g) labels.push_back("g" + std::to_string(g));
  return Grading(labels, dims);
}

inline EdgeSet random_edges(const Grading& g, Rng& rng) {
  std::vector<Edge> e;
  for (Grade a = 0; a < g.size(); ++a)
    for (Grade b = 0; b < g.size(); ++b)
      if (rng.uniform() < 0.5) e.push_back({a, b});
  if (e.empty()) e.push_back({rng.index(g.size()), rng.index(g.size())});
  return EdgeSet(e);
}

inline SoftmaxHead random_head(std::size_t classes, std::size_t dim, Rng& rng, double sd = 1.0) {
  return SoftmaxHead{rng.normal_tensor(classes, dim, sd), rng.normal_tensor(1, classes, sd)};
}

inline Tensor random_distribution(std::size_t n, Rng& rng) {
  Tensor p(1, n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (p(0, i) = 0.05 + rng.uniform());
  return ops::scale(p, 1.0 / s);
}

inline double ce_loss(const SoftmaxHead& head, const Tensor& z, std::size_t y) {
  const std::size_t tg[] = {y};
  return ops::cross_entropy_rows(head.logits(z), tg).item();
}

// ∇_z CE = Wᵀ(p − e_y).
inline Tensor ce_grad(const SoftmaxHead& head, const Tensor& z, std::size_t y) {
  Tensor r = head.probs(z);
  r(0, y) -= 1.0;
  return ops::matmul(r, head.weight);
}

// Small routed model with every parameter kind present.
inline ModelSpec small_spec(NormKind norm, bool bias, bool utility_in_logits) {
  ModelSpec s;
  s.grading = Grading({"g0", "g1"}, {2, 2});
  s.layers = 2;
  s.edges = EdgeSet::banded(s.grading, {0, 1});
  s.block_bias = bias;
  s.norm = norm;
  s.classes = 3;
  s.routing.beta = 2.0;
  s.routing.temperature = 0.7;
  s.routing.rank = 3;
  s.routing.utility_in_logits = utility_in_logits;
  s.initial_threshold = 0.1;
  s.router_init_scale = 0.5;
  return s;
}

inline Batch random_batch(const Grading& g, std::size_t classes, std::size_t seqs, std::size_t len, Rng& rng) {
  Batch b{GradedVector::split(g, rng.normal_tensor(seqs * len, g.ambient_dim())), {}, {}};
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t t = 0; t < len; ++t) {
      b.targets.push_back(rng.index(classes));
      b.sequence.push_back(s);
    }
  return b;
}

inline std::vector<Tensor> param_values(const GradedModel& m) {
  std::vector<Tensor> v;
  for (const auto& p : m.params()) v.push_back(p.value);
  return v;
}

inline std::vector<Tensor> detached_utilities(const GradedModel& m, const Batch& b) {
  Tape tape;
  const ForwardResult f = m.forward(tape, m.bind(tape), b);
  std::vector<Tensor> u;
  for (const auto& r : f.layers) u.push_back(r.utility_in_logits);
  return u;
}

}  // namespace verify_detail

// ---------------------------------------------------------------------------
// tensor-core
// ---------------------------------------------------------------------------

// Every differentiable primitive against central differences, each through a
// random linear functional so no output coordinate is privileged.
inline CheckResult check_primitive_gradients(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 101));
  using Op = std::function<Var(Tape&, const std::vector<Var>&)>;
  const std::vector<std::size_t> targets{2, 0, 3};
  const std::vector<std::pair<std::string, Op>> cases = {
      {"matmul", [](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); }},
      {"linear", [](Tape&, const std::vector<Var>& v) { return ad::linear(v[0], ad::transpose(v[1])); }},
      {"softmax", [](Tape&, const std::vector<Var>& v) { return ad::softmax_rows(v[0]); }},
      {"grouped_softmax", [](Tape&, const std::vector<Var>& v) { return ad::grouped_softmax_rows(v[0], {0, 1, 0, 1}); }},
      {"logsumexp", [](Tape&, const std::vector<Var>& v) { return ad::logsumexp_rows(v[0]); }},
      {"tanh", [](Tape&, const std::vector<Var>& v) { return ad::tanh(v[0]); }},
      {"sigmoid", [](Tape&, const std::vector<Var>& v) { return ad::sigmoid(v[0]); }},
      {"softplus", [](Tape&, const std::vector<Var>& v) { return ad::softplus(v[0]); }},
      {"exp", [](Tape&, const std::vector<Var>& v) { return ad::exp(ad::scale(v[0], 0.5)); }},
      {"log", [](Tape&, const std::vector<Var>& v) { return ad::log(ad::add_constant(ad::square(v[0]), 1.0)); }},
      {"layernorm", [](Tape& t, const std::vector<Var>& v) {
         return ad::layernorm_rows(v[0], ad::slice_cols(t.leaf(Tensor(1, 4, 1.3)), 0, 4), t.constant(Tensor(1, 4, 0.2)), 1e-5);
       }},
      {"layernorm_affine", [](Tape&, const std::vector<Var>& v) {
         return ad::layernorm_rows(v[0], v[2], ad::scale(v[2], -0.5), 1e-5);
       }},
      {"rmsnorm", [](Tape&, const std::vector<Var>& v) { return ad::rmsnorm_rows(v[0], v[2], 1e-5); }},
      {"cross_entropy", [targets](Tape&, const std::vector<Var>& v) { return ad::cross_entropy_rows(v[0], targets); }},
      {"concat_slice", [](Tape&, const std::vector<Var>& v) {
         return ad::slice_cols(ad::concat_cols({v[0], ad::matmul(v[0], v[1])}), 2, 4);
       }},
      {"scale_rows", [](Tape&, const std::vector<Var>& v) { return ad::scale_rows(v[0], ad::slice_cols(ad::matmul(v[0], v[1]), 0, 1)); }},
      {"xlogx", [](Tape&, const std::vector<Var>& v) { return ad::xlogx(ad::add_constant(ad::square(v[0]), 0.1)); }},
      {"sqrt", [](Tape&, const std::vector<Var>& v) { return ad::sqrt(ad::add_constant(ad::square(v[0]), 0.5)); }},
  };
  double worst = 0.0;
  std::string worst_op;
  for (const auto& [name, op] : cases) {
    const Tensor a = rng.normal_tensor(3, 4), b = rng.normal_tensor(4, 4), c = rng.normal_tensor(1, 4);
    Tensor probe;
    {
      Tape t;
      const Var out = op(t, {t.leaf(a), t.leaf(b), t.leaf(c)});
      probe = rng.normal_tensor(out.rows(), out.cols());
    }
    const MultiLoss f = [&](Tape& t, const std::vector<Var>& v) { return ad::sum(ad::mul(op(t, v), t.constant(probe))); };
    const double err = finite_diff_check(f, {a, b, c}, 1e-6, 1e-6).max_rel_error;
    if (err > worst) {
      worst = err;
      worst_op = name;
    }
  }
  CheckResult r = verify_detail::at_most("tensor-core", "primitive_gradients", cases.size(), worst, 1e-5);
  r.detail += "; worst primitive " + worst_op;
  return r;
}

// Full L_GT gradient (LM + margin + entropy regularizer) of a 2-grade, d = 4,
// |E| = 3 routed model against central differences over every parameter.
inline CheckResult check_gradient_fidelity(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 102));
  double worst = 0.0;
  std::size_t coords = 0;
  for (std::size_t trial = 0; trial < 3; ++trial) {
    ModelSpec spec = small_spec(trial == 1 ? NormKind::kRmsNorm : NormKind::kLayerNorm, true, true);
    if (trial == 2) spec.routing.gate = GateKind::kSoftmaxPerDestination;
    // Two-dimensional grades put LayerNorm near its sign-like singularity, where
    // O(h²) truncation alone exceeds the bound.
    spec.grading = Grading({"g0", "g1"}, {4, 4});
    spec.edges = EdgeSet::banded(spec.grading, {0, 1});
    GradedModel model(spec, rng.next());
    const Batch batch = random_batch(spec.grading, spec.classes, 2, 3, rng);
    const std::vector<Tensor> frozen = detached_utilities(model, batch);
    ObjectiveConfig cfg;
    cfg.lambda = 0.1;
    cfg.mu_sp = 0.05;
    ForwardOptions opt;
    opt.frozen_utilities = &frozen;
    const MultiLoss f = [&](Tape& t, const std::vector<Var>& v) { return graded_objective(t, model, v, batch, cfg, opt).total; };
    const GradCheckReport rep = finite_diff_check(f, param_values(model), 1e-5, 1e-6);
    worst = std::max(worst, rep.max_rel_error);
    coords += rep.coordinates;
  }
  CheckResult r = at_most("tensor-core", "gradient_fidelity", 3, worst, 1e-4);
  r.metrics = {{"coordinates", static_cast<double>(coords)}};
  return r;
}

// Softmax rows sum to one, masked entries are exactly zero, and log-sum-exp is
// shift-equivariant.
inline CheckResult check_softmax_normalization(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 103));
  double worst = 0.0;
  bool masked_exact = true;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    Tensor x = rng.normal_tensor(4, 6, 1.0 + 20.0 * rng.uniform());
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 5; ++j)
        if (rng.uniform() < 0.3) x(i, j) = kMaskedLogit;
    const Tensor p = ops::softmax_rows(x);
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        s += p(i, j);
        if (x(i, j) == kMaskedLogit && p(i, j) != 0.0) masked_exact = false;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    const Tensor y = rng.normal_tensor(3, 5);
    const double c = rng.normal(0.0, 50.0);
    const Tensor shifted = ops::logsumexp_rows(ops::map(y, [c](double v) { return v + c; }));
    const Tensor base = ops::logsumexp_rows(y);
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, std::abs(shifted(i, 0) - base(i, 0) - c) / (1.0 + std::abs(c)));
  }
  CheckResult r = verify_detail::at_most("tensor-core", "softmax_normalization", 200, worst, 1e-12);
  r.pass = r.pass && masked_exact;
  if (!masked_exact) r.detail += "; a masked entry received nonzero probability";
  return r;
}

// ---------------------------------------------------------------------------
// graded-space
// ---------------------------------------------------------------------------

inline CheckResult check_grading_roundtrip(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 201));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const Grading g = random_grading(rng, 5, 4);
    const Tensor x = rng.normal_tensor(3, g.ambient_dim());
    const GradedVector z = GradedVector::split(g, x);
    worst = std::max(worst, ops::max_abs_diff(z.assemble(), x));
    Tensor sum(3, g.ambient_dim());
    for (Grade h = 0; h < g.size(); ++h) sum = ops::add(sum, include(g, project(g, x, h), h).assemble());
    worst = std::max(worst, ops::max_abs_diff(sum, x));
  }
  return at_most("graded-space", "grading_roundtrip", 100, worst, 0.0);
}

// Blockwise composition agrees with the product of dense ambient operators.
inline CheckResult check_block_composition(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 202));
  double worst = 0.0;
  auto random_blocks = [&](const Grading& g) {
    BlockSet s;
    const EdgeSet edges = random_edges(g, rng);
    for (const Edge& e : edges)
      s[e] = BlockMap{e.first, e.second, rng.normal_tensor(g.dim(e.second), g.dim(e.first)), std::nullopt};
    return s;
  };
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const Grading g = random_grading(rng, 4, 3);
    const BlockSet phi = random_blocks(g), psi = random_blocks(g);
    const Tensor lhs = to_dense(g, compose_blocks(psi, phi));
    const Tensor rhs = ops::matmul(to_dense(g, psi), to_dense(g, phi));
    worst = std::max(worst, ops::max_abs_diff(lhs, rhs));
  }
  return at_most("graded-space", "block_composition", 100, worst, 1e-12);
}

// Every block of an increment aliases one kernel: writing the kernel moves all of them.
inline CheckResult check_lgt_sharing(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 203));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const Grading g = Grading::uniform(3 + rng.index(3), 1 + rng.index(3));
    LgtLayer layer = build_banded_lgt(g, {-1, 0, 1}, rng.next());
    for (auto& [d, k] : layer.kernels) *k = rng.normal_tensor(k->rows(), k->cols());
    for (const auto& [e, b] : layer.realize()) worst = std::max(worst, ops::max_abs_diff(b.weight, *layer.kernels.at(increment(e))));
  }
  return verify_detail::at_most("graded-space", "lgt_sharing", 50, worst, 0.0);
}

// Closed-form counts against enumeration of distinct stored scalars: LGT, its
// EGT conjugate, attention and FFN, on 20 random configurations.
inline CheckResult check_param_counts(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 204));
  std::size_t mismatches = 0, compared = 0;
  std::ostringstream first;
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t grades = 2 + rng.index(4), d = 1 + rng.index(4);
    const Grading g = Grading::uniform(grades, d);
    std::vector<int> deltas;
    const int span = static_cast<int>(grades) - 1;
    for (int dl = -span; dl <= span; ++dl)
      if (rng.uniform() < 0.5) deltas.push_back(dl);
    if (deltas.empty()) deltas.push_back(0);
    const std::size_t n_deltas = std::set<int>(deltas.begin(), deltas.end()).size();

    const LgtLayer lgt = build_banded_lgt(g, deltas, rng.next());
    const Tensor ratio = ops::add(Tensor::identity(d), rng.normal_tensor(d, d, 0.2));
    const EgtLayer egt{lgt, EgtReweighting::from_ratio(ratio, Tensor::identity(d), grades)};
    const std::size_t heads = 1 + rng.index(4), d_q = 1 + rng.index(6);
    std::vector<std::size_t> widths;
    for (std::size_t i = 0; i < n_deltas; ++i) widths.push_back(1 + rng.index(16));

    const std::vector<std::pair<std::size_t, std::size_t>> pairs = {
        {param_count_lgt(g, deltas), enumerate_parameters(lgt)},
        {param_count_lgt(g, deltas), enumerate_parameters(egt)},
        {param_count_attention(heads, d, d_q, n_deltas), enumerate_parameters(build_lgt_attention(g, deltas, heads, d_q, rng.next()))},
        {param_count_ffn(d, widths), enumerate_parameters(build_lgt_ffn(g, deltas, widths, rng.next()))},
    };
    for (const auto& [closed, counted] : pairs) {
      ++compared;
      if (closed != counted) {
        if (!mismatches) first << "first mismatch: closed " << closed << " vs enumerated " << counted << " in trial " << trial;
        ++mismatches;
      }
    }
  }
  CheckResult r = verify_detail::at_most("graded-space", "param_counts", 20, static_cast<double>(mismatches), 0.0);
  r.metrics = {{"comparisons", static_cast<double>(compared)}};
  if (mismatches) r.detail += "; " + first.str();
  return r;
}

// On samples with zero cross-grade second moments the joint dense fit equals
// the independent per-edge fits.
inline CheckResult check_least_squares_decoupling(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 205));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 30; ++trial) {
    const Grading g = random_grading(rng, 4, 3);
    const std::size_t n = 40 + rng.index(40);
    const Matrix raw = to_eigen(rng.normal_tensor(n, g.ambient_dim()));
    const Matrix q = Eigen::HouseholderQR<Matrix>(raw).householderQ() * Matrix::Identity(n, g.ambient_dim());
    const GradedVector z = GradedVector::split(g, from_eigen(q * std::sqrt(static_cast<double>(n))));
    const GradedVector y = GradedVector::split(g, rng.normal_tensor(n, g.ambient_dim()));
    const Tensor dense = fit_dense_least_squares(z, y);
    const BlockSet blocks = fit_blocks_least_squares(z, y, EdgeSet::complete(g));
    worst = std::max(worst, ops::max_abs_diff(dense, to_dense(g, blocks)));
  }
  return at_most("graded-space", "least_squares_decoupling", 30, worst, 1e-10);
}

// Grade-wise normalization of independent grades leaves the cross-grade
// covariance at noise level. Each trial standardizes n‖Ĉ‖_F² by its mean and
// standard deviation under independence; the pooled z-score over trials must
// stay below 3.
inline CheckResult check_normalization_covariance(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 206));
  double pooled = 0.0;
  const std::size_t trials = 20;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const Grading g({"x", "y"}, {2 + rng.index(3), 2 + rng.index(3)});
    const std::size_t n = 4000;
    Tensor raw = rng.normal_tensor(n, g.ambient_dim());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g.dim(0); ++j) raw(i, j) *= 1.0 + static_cast<double>(j);
    const NormKind kind = trial % 2 ? NormKind::kRmsNorm : NormKind::kLayerNorm;
    const GradedVector z = graded_normalize(GradedVector::split(g, raw), kind,
                                            {GradeNormParams::unit(g.dim(0)), GradeNormParams::unit(g.dim(1))}, 1e-5,
                                            {true, true});
    const Matrix x = to_eigen(z.block(0)), y = to_eigen(z.block(1));
    const double nn = static_cast<double>(n);
    const Matrix c = x.transpose() * y / nn;
    const Matrix rx = x.transpose() * x / nn, ry = y.transpose() * y / nn;
    const double stat = nn * c.squaredNorm();
    const double mean = rx.trace() * ry.trace();
    const double sd = std::sqrt(2.0 * rx.squaredNorm() * ry.squaredNorm());
    pooled += (stat - mean) / sd / std::sqrt(static_cast<double>(trials));
  }
  return verify_detail::at_most("graded-space", "normalization_covariance", trials, pooled, 3.0);
}

// ---------------------------------------------------------------------------
// routing
// ---------------------------------------------------------------------------

// Off-E gates are exactly zero and every softmax scope sums to one.
inline CheckResult check_masking(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 301));
  double worst = 0.0;
  std::size_t leaks = 0;
  const std::size_t trials = 1000;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const Grading g = random_grading(rng, 5, 3);
    const EdgeSet edges = random_edges(g, rng);
    const std::size_t r = 1 + rng.index(4), B = 1 + rng.index(4);
    RouterParams router{rng.normal_tensor(r, g.ambient_dim()), {}, {}};
    for (Grade h = 0; h < g.size(); ++h) router.value.push_back(rng.normal_tensor(r, g.dim(h)));
    for (const Edge& e : edges) router.bilinear[e] = rng.normal_tensor(r, r);
    const GradedVector z = GradedVector::split(g, rng.normal_tensor(B, g.ambient_dim(), 3.0));
    std::vector<std::size_t> seq(B, 0);
    const Tensor logits = routing_logits(router, context_summary(z, seq), z, edges);
    const auto table = routing_table(g);
    const Tensor aug = augment_logits(logits, rng.normal_tensor(B, table.size()), 1.0 + 10.0 * rng.uniform(),
                                      rng.normal_tensor(1, table.size()));
    RoutingConfig cfg;
    cfg.temperature = std::exp(rng.uniform(-3.0, 1.0));
    const GateKind kinds[] = {GateKind::kSoftmaxGlobal, GateKind::kSoftmaxPerDestination, GateKind::kLogistic, GateKind::kHardArgmax};
    cfg.gate = kinds[trial % 4];
    const Tensor alpha = gate(aug, cfg, table);
    const auto groups = gate_groups(cfg.gate, table);
    for (std::size_t i = 0; i < B; ++i) {
      std::map<std::size_t, double> sums;
      std::map<std::size_t, bool> live;
      for (std::size_t j = 0; j < table.size(); ++j) {
        if (!edges.contains(table[j])) {
          if (alpha(i, j) != 0.0) ++leaks;
          continue;
        }
        sums[groups[j]] += alpha(i, j);
        live[groups[j]] = true;
      }
      if (cfg.gate == GateKind::kLogistic) continue;
      for (const auto& [grp, s] : sums)
        if (live[grp]) worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  CheckResult r = at_most("routing", "masking", trials, worst, 1e-12);
  r.pass = r.pass && leaks == 0;
  r.metrics = {{"off_edge_nonzero", static_cast<double>(leaks)}};
  if (leaks) r.detail += "; " + std::to_string(leaks) + " off-E gates were nonzero";
  return r;
}

// Mass on the top edge as T_sm falls: ≥ 0.99 once gap·β/T ≥ 10, and
// nondecreasing in 1/T.
inline CheckResult check_hard_gating(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 302));
  const double temps[] = {1.0, 0.3, 0.1, 0.03};
  const double beta = 5.0;
  double worst_mass_shortfall = 0.0;
  std::size_t non_monotone = 0, qualifying = 0;
  const std::size_t trials = 200;
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    Tensor u(1, n);
    const double gap = rng.uniform(0.05, 1.0);
    const std::size_t top = rng.index(n);
    for (std::size_t j = 0; j < n; ++j) u(0, j) = j == top ? 1.0 : 1.0 - gap - rng.uniform(0.0, 1.0);
    const Tensor aug = augment_logits(Tensor(1, n), u, beta, Tensor(1, n));
    double prev = 0.0;
    for (double t : temps) {
      RoutingConfig cfg;
      cfg.temperature = t;
      std::vector<Edge> cols;
      for (std::size_t j = 0; j < n; ++j) cols.push_back({0, j});
      const double mass = gate(aug, cfg, cols)(0, top);
      if (mass + 1e-15 < prev) ++non_monotone;
      prev = mass;
      if (gap * beta / t >= 10.0) {
        ++qualifying;
        worst_mass_shortfall = std::max(worst_mass_shortfall, 0.99 - mass);
      }
    }
  }
  CheckResult r = verify_detail::at_most("routing", "hard_gating", trials, worst_mass_shortfall, 0.0);
  r.pass = r.pass && non_monotone == 0 && qualifying > 0;
  r.metrics = {{"qualifying_points", static_cast<double>(qualifying)}, {"non_monotone", static_cast<double>(non_monotone)}};
  r.detail = "max-edge mass shortfall below 0.99 " + std::to_string(worst_mass_shortfall) + " on " +
             std::to_string(qualifying) + " qualifying points, " + std::to_string(non_monotone) + " non-monotone steps";
  return r;
}

// Top-edge mass against 1 − exp(−(β/2T)(γ − γ')) for |E| ≤ 5.
inline CheckResult check_selectivity(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 303));
  double worst = -1.0;
  std::size_t trials = 0;
  for (double ratio : {5.0, 10.0, 20.0})
    for (std::size_t n = 2; n <= 5; ++n)
      for (std::size_t rep = 0; rep < 50; ++rep, ++trials) {
        const double t = rng.uniform(0.1, 1.0), beta = ratio * t;
        const double gap = rng.uniform(0.01, 1.0);
        Tensor u(1, n);
        u(0, 0) = 1.0;
        for (std::size_t j = 1; j < n; ++j) u(0, j) = 1.0 - gap - (j == 1 ? 0.0 : rng.uniform(0.0, 1.0));
        RoutingConfig cfg;
        cfg.temperature = t;
        std::vector<Edge> cols;
        for (std::size_t j = 0; j < n; ++j) cols.push_back({0, j});
        const double mass = gate(augment_logits(Tensor(1, n), u, beta, Tensor(1, n)), cfg, cols)(0, 0);
        worst = std::max(worst, selectivity_bound(beta, t, gap) - mass);
      }
  return verify_detail::at_most("routing", "selectivity", trials, worst, 1e-15);
}

// Small steps along δ: sign(ΔL) = sign(−⟨∇L, δ⟩), and ΔL/ε → −⟨∇L, δ⟩ at rate O(ε).
inline CheckResult check_first_order(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 304));
  std::size_t sign_errors = 0, counted = 0;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 2 + rng.index(6), classes = 2 + rng.index(6);
    const SoftmaxHead head = random_head(classes, dim, rng);
    const Tensor z = rng.normal_tensor(1, dim);
    const std::size_t y = rng.index(classes);
    const Tensor delta = rng.normal_tensor(1, dim);
    const double lin = -ops::dot(ce_grad(head, z, y), delta);
    const double eps = 1e-6;
    const double du = ce_loss(head, z, y) - ce_loss(head, ops::add(z, ops::scale(delta, eps)), y);
    if (std::abs(lin) > 1e-3) {
      ++counted;
      if ((du > 0.0) != (lin > 0.0)) ++sign_errors;
      worst = std::max(worst, std::abs(du / eps - lin) / std::abs(lin));
    }
  }
  CheckResult r = at_most("routing", "first_order_improvement", counted, worst, 1e-3);
  r.pass = r.pass && sign_errors == 0;
  r.metrics = {{"sign_errors", static_cast<double>(sign_errors)}};
  return r;
}

// Grades without incoming edges are untouched by the morphic update; the
// output keeps the input grading.
inline CheckResult check_grading_preservation(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 305));
  double worst = 0.0;
  bool grading_kept = true;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const Grading g = random_grading(rng, 5, 3);
    const EdgeSet edges = random_edges(g, rng);
    MorphicLayer layer{g, edges, {}};
    for (const Edge& e : edges) layer.blocks[e] = BlockMap{e.first, e.second, rng.normal_tensor(g.dim(e.second), g.dim(e.first)), std::nullopt};
    const std::size_t B = 1 + rng.index(4);
    const GradedVector z = GradedVector::split(g, rng.normal_tensor(B, g.ambient_dim()));
    const Tensor alpha = ops::softmax_rows(rng.normal_tensor(B, edges.size()));
    NormSpec norm;
    if (trial % 2) {
      norm.kind = NormKind::kLayerNorm;
      for (Grade h = 0; h < g.size(); ++h) norm.params.push_back(GradeNormParams::unit(g.dim(h)));
    }
    const GradedVector out = morphic_update(z, edges, all_candidates(layer, z, trial % 3 ? UpdateMode::kReplace : UpdateMode::kResidual), alpha, norm);
    grading_kept = grading_kept && out.grading() == g;
    for (Grade h = 0; h < g.size(); ++h)
      if (edges.incoming(h).empty()) worst = std::max(worst, ops::max_abs_diff(out.block(h), z.block(h)));
  }
  CheckResult r = at_most("routing", "grading_preservation", 200, worst, 0.0);
  r.pass = r.pass && grading_kept;
  return r;
}

// Monotone descent: rank-one candidate blocks that write z^(h) + δ with
// δ = −c ∇_h L (c halved until the edge's own utility is positive), gated by a
// utility-augmented softmax; the combined step at η₀ = min(1, −⟨∇,d⟩/(L_s‖d‖²))
// must strictly lower the loss. L_s = ½‖W‖₂² bounds the CE curvature.
inline CheckResult check_monotone_descent(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 306));
  const std::size_t trials = 500;
  std::size_t failures = 0, accepted = 0, rejected = 0;
  double worst_rel = std::numeric_limits<double>::infinity();
  while (accepted < trials) {
    const Grading g = random_grading(rng, 4, 3);
    const EdgeSet edges = random_edges(g, rng);
    const std::size_t classes = 2 + rng.index(5);
    const SoftmaxHead head = random_head(classes, g.ambient_dim(), rng);
    const std::size_t y = rng.index(classes);
    GradedVector z = GradedVector::split(g, rng.normal_tensor(1, g.ambient_dim()));
    const auto loss = [&](const GradedVector& v) { return ce_loss(head, v.assemble(), y); };
    const GradedVector grad = GradedVector::split(g, ce_grad(head, z.assemble(), y));

    MorphicLayer layer{g, edges, {}};
    Tensor utility(1, edges.size());
    for (std::size_t k = 0; k < edges.size(); ++k) {
      const Edge& e = edges[k];
      const Tensor& zg = z.block(e.first);
      const double nrm = ops::dot(zg, zg);
      double c = 1.0;
      for (int halving = 0; halving < 60; ++halving, c *= 0.5) {
        const Tensor target = ops::sub(z.block(e.second), ops::scale(grad.block(e.second), c));
        layer.blocks[e] = BlockMap{e.first, e.second, ops::scale(ops::matmul(ops::transpose(target), zg), 1.0 / nrm), std::nullopt};
        const Candidate cand = candidate_update(layer, z, e);
        utility(0, k) = loss(z) - loss(apply_candidate(z, e, cand));
        if (utility(0, k) > 0.0) break;
      }
    }
    const Tensor logits = rng.normal_tensor(1, edges.size());
    RoutingConfig cfg;
    const Tensor alpha = gate(augment_logits(logits, utility, 5.0, Tensor(1, edges.size())), cfg, edges.edges());
    const auto cands = all_candidates(layer, z);
    const GradedVector d = step_scaled_update(GradedVector::zeros(g, 1), edges, cands, alpha, 1.0);
    const Tensor dv = d.assemble();
    const double slope = ops::dot(grad.assemble(), dv);
    Eigen::JacobiSVD<Matrix> svd(to_eigen(head.weight));
    const double ls = 0.5 * svd.singularValues()(0) * svd.singularValues()(0);
    const double dd = ops::dot(dv, dv);
    // A saturated readout (loss below 1e-6) leaves utilities and the predicted
    // decrease under the rounding of the loss itself; such draws are redrawn.
    bool premise = slope < 0.0 && loss(z) > 1e-6;
    for (std::size_t k = 0; k < edges.size(); ++k) premise = premise && utility(0, k) > 0.0;
    if (!premise) {
      ++rejected;
      continue;
    }
    ++accepted;
    const double eta = std::min(1.0, -slope / (ls * dd));
    const double before = loss(z);
    const double after = loss(step_scaled_update(z, edges, cands, alpha, eta));
    if (!(after < before)) ++failures;
    worst_rel = std::min(worst_rel, (before - after) / before);
  }
  CheckResult r = verify_detail::at_most("routing", "monotone_descent", trials, static_cast<double>(failures), 0.0);
  r.metrics = {{"min_relative_decrease", worst_rel}, {"redrawn", static_cast<double>(rejected)}};
  r.detail = std::to_string(trials - failures) + "/" + std::to_string(trials) + " trials decreased the loss at η₀";
  return r;
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

// With utilities kept out of the logits, ∂L_GT/∂τ_e equals λβ mean σ(β(τ_e − ΔL)).
inline CheckResult check_threshold_gradient(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 401));
  double worst = 0.0;
  std::size_t trials = 0;
  for (std::size_t trial = 0; trial < 10; ++trial) {
    ModelSpec spec = small_spec(NormKind::kLayerNorm, false, false);
    spec.initial_threshold = rng.uniform(-0.5, 0.5);
    GradedModel model(spec, rng.next());
    const Batch batch = random_batch(spec.grading, spec.classes, 2, 4, rng);
    ObjectiveConfig cfg;
    cfg.lambda = rng.uniform(0.05, 1.0);
    Tape tape;
    const auto vars = model.bind(tape);
    const ObjectiveResult res = graded_objective(tape, model, vars, batch, cfg);
    const Gradients grads = tape.backward(res.total);
    const double beta = cfg.margin_beta(spec.routing);
    for (std::size_t l = 0; l < model.layers(); ++l) {
      const Tensor& g = grads[vars[model.params().index(model.threshold_name(l))]];
      for (std::size_t e = 0; e < model.edges().size(); ++e, ++trials) {
        const double closed = threshold_gradient(res.forward.layers[l], e, cfg.lambda, beta);
        worst = std::max(worst, std::abs(closed - g(0, e)) / (std::abs(closed) + 1e-12));
      }
    }
  }
  return at_most("objective", "threshold_gradient", trials, worst, 1e-10);
}

inline CheckResult check_objective_lower_bound(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 402));
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < 50; ++trial) {
    ModelSpec spec = small_spec(NormKind::kLayerNorm, trial % 2 == 0, true);
    spec.initial_threshold = rng.uniform(-1.0, 1.0);
    GradedModel model(spec, rng.next());
    const Batch batch = random_batch(spec.grading, spec.classes, 2, 3, rng);
    ObjectiveConfig cfg;
    cfg.lambda = rng.uniform(0.0, 1.0);
    cfg.mu_sp = rng.uniform(0.0, 0.5);
    cfg.regularizer = trial % 3 ? Regularizer::kEntropy : Regularizer::kGroupLasso;
    Tape tape;
    const ObjectiveResult res = graded_objective(tape, model, model.bind(tape), batch, cfg);
    worst = std::max(worst, objective_lower_bound(res, cfg, cfg.margin_beta(spec.routing)) - res.breakdown.total);
  }
  return at_most("objective", "lower_bound", 50, worst, 1e-12);
}

// Score-function kernel gradient: the Monte-Carlo mean sits within 5 standard
// errors of the enumerated gradient.
inline CheckResult check_score_function(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 403));
  double worst = 0.0;
  std::size_t entries = 0;
  for (std::size_t trial = 0; trial < 10; ++trial) {
    const Tensor logits = rng.normal_tensor(3, 2 + rng.index(4));
    const Tensor costs = rng.uniform_tensor(logits.rows(), logits.cols(), 0.0, 3.0);
    const ScoreFunctionEstimate est = kernel_sample_step(logits, costs, 20000, rng);
    for (std::size_t k = 0; k < logits.size(); ++k, ++entries)
      worst = std::max(worst, std::abs(est.mean[k] - est.exact[k]) / (est.std_error[k] + 1e-12));
  }
  return verify_detail::at_most("objective", "score_function_unbiased", entries, worst, 5.0);
}

// Conjugating an LGT model by an EGT reweighting and feeding D⁻¹z leaves L_GT
// and every per-token utility unchanged.
inline CheckResult check_egt_invariance(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 404));
  double worst = 0.0;
  std::size_t trials = 0;
  for (std::size_t trial = 0; trial < 10; ++trial, ++trials) {
    const std::size_t d = 2 + rng.index(2);
    ModelSpec spec;
    spec.grading = Grading::uniform(3, d);
    spec.layers = 2;
    spec.edges = EdgeSet::banded(spec.grading, {-1, 0, 1});
    spec.lgt_sharing = trial % 2 == 0;
    spec.block_bias = trial % 3 == 0;
    spec.norm = NormKind::kNone;
    spec.classes = 4;
    spec.routing.mode = trial % 2 ? UpdateMode::kResidual : UpdateMode::kReplace;
    spec.router_init_scale = 0.5;
    spec.block_init_scale = 0.7;
    const GradedModel model(spec, rng.next());
    const Tensor ratio = ops::add(Tensor::identity(d), rng.normal_tensor(d, d, 0.3));
    const Tensor base = ops::add(Tensor::identity(d), rng.normal_tensor(d, d, 0.3));
    const EgtReweighting D = EgtReweighting::from_ratio(ratio, base, spec.grading.size());
    const GradedModel conj = conjugate_model(model, D);
    const Batch batch = random_batch(spec.grading, spec.classes, 3, 4, rng);
    const Batch cbatch = conjugate_batch(batch, D);
    ObjectiveConfig cfg;
    cfg.lambda = 0.3;
    cfg.mu_sp = 0.1;
    Tape t1, t2;
    const ObjectiveResult a = graded_objective(t1, model, model.bind(t1), batch, cfg);
    const ObjectiveResult b = graded_objective(t2, conj, conj.bind(t2), cbatch, cfg);
    worst = std::max(worst, std::abs(a.breakdown.total - b.breakdown.total));
    for (std::size_t l = 0; l < spec.layers; ++l)
      worst = std::max(worst, ops::max_abs_diff(a.forward.layers[l].utility.value(), b.forward.layers[l].utility.value()));
  }
  return at_most("objective", "egt_invariance", trials, worst, 1e-8);
}

// ---------------------------------------------------------------------------
// tasks
// ---------------------------------------------------------------------------

// P_a group law, the sem→num→sem program composite, and the post-update loss
// log(1 + (p−1)e^{−s}) for p ∈ {5, 7, 11}.
inline CheckResult check_modp_exactness(const VerifyOptions&) {
  double group = 0.0, program = 0.0, loss = 0.0;
  std::size_t trials = 0;
  for (std::size_t p : {5u, 7u, 11u}) {
    for (std::size_t a = 0; a < p; ++a)
      for (std::size_t b = 0; b < p; ++b, ++trials)
        group = std::max(group, ops::max_abs_diff(ops::matmul(modp_shift_matrix(p, a), modp_shift_matrix(p, b)),
                                                  modp_shift_matrix(p, (a + b) % p)));
    Tensor power = Tensor::identity(p);
    for (std::size_t k = 0; k < p; ++k) power = ops::matmul(modp_shift_matrix(p, 1), power);
    group = std::max(group, ops::max_abs_diff(power, Tensor::identity(p)));

    const Grading g({"sem", "num"}, {p, p});
    for (std::size_t a = 1; a < p; ++a) {
      const MorphicProgram prog{g, {BlockMap{0, 1, modp_shift_matrix(p, a), std::nullopt},
                                    BlockMap{1, 0, Tensor::identity(p), std::nullopt}}};
      program = std::max(program, ops::max_abs_diff(program_composite(prog), modp_shift_matrix(p, a)));
      for (double s : {1.0, 3.0, 5.0, 8.0})
        for (std::size_t digit = 0; digit < p; ++digit) {
          Tensor e(1, p);
          e(0, digit) = 1.0;
          const Tensor out = apply_program(prog, e);
          const std::size_t tg[] = {(digit + a) % p};
          const double post = ops::cross_entropy_rows(ops::scale(out, s), tg).item();
          const double closed = std::log1p(static_cast<double>(p - 1) * std::exp(-s));
          loss = std::max(loss, std::abs(post - closed));
          loss = std::max(loss, std::abs(modp_exact_utility(p, a, s).post - closed));
        }
    }
  }
  CheckResult r = verify_detail::at_most("tasks", "modp_exactness", trials, std::max(group, program), 0.0);
  r.pass = r.pass && loss < 1e-12;
  r.metrics = {{"group_law", group}, {"program_composite", program}, {"post_loss", loss}};
  std::ostringstream os;
  os << "group law " << group << ", composite " << program << ", post-loss gap " << loss << " (bound 1e-12)";
  r.detail = os.str();
  return r;
}

// r_{i*} ≥ 1 − e^{−γ/σ²} on random and tight margin instances over a (k, γ, σ²)
// grid. The tight instances put every competitor exactly γ below.
inline CheckResult check_retrieval_mass_bound(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 501));
  std::size_t violations = 0, trials = 0, tight_violations = 0;
  double worst = -1.0;
  for (std::size_t k : {2u, 4u, 8u})
    for (double gamma : {0.25, 0.5, 1.0, 2.0})
      for (double sigma2 : {0.25, 0.5, 1.0}) {
        const RetrievalTask task = make_retrieval_task(k, 2 * k, sigma2, 4.0, rng.next());
        for (std::size_t rep = 0; rep < 21; ++rep, ++trials) {
          std::vector<double> scores(k);
          const std::size_t top = rng.index(k);
          const bool tight = rep == 0;
          for (std::size_t i = 0; i < k; ++i) scores[i] = i == top ? gamma : (tight ? 0.0 : -rng.uniform(0.0, 2.0));
          if (!tight) scores[(top + 1) % k] = 0.0;
          const RetrievalRoundtrip rt = retrieval_roundtrip(task, query_with_scores(task, scores));
          const double mass = rt.r(0, rt.i_star);
          if (mass < rt.mass_bound) ++violations;
          if (mass < retrieval_tight_mass(k, rt.margin, sigma2) - 1e-12) ++tight_violations;
          worst = std::max(worst, rt.mass_bound - mass);
        }
      }
  CheckResult r = verify_detail::at_most("tasks", "retrieval_mass_bound", trials, worst, 0.0);
  r.metrics = {{"violations", static_cast<double>(violations)}, {"tight_bound_violations", static_cast<double>(tight_violations)}};
  r.detail = std::to_string(violations) + "/" + std::to_string(trials) + " instances below 1 − e^{−γ/σ²} (worst shortfall " +
             std::to_string(worst) + "); " + std::to_string(tight_violations) +
             " below the exact bound 1/(1+(k−1)e^{−γ/σ²})";
  return r;
}

// The exact worst-case mass 1/(1+(k−1)e^{−γ/σ²}) holds everywhere and is attained.
inline CheckResult check_retrieval_tight_bound(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 502));
  double below = 0.0, attained = 0.0;
  std::size_t trials = 0;
  for (std::size_t k : {2u, 3u, 4u, 8u})
    for (double gamma : {0.1, 0.5, 1.0, 3.0}) {
      const double sigma2 = rng.uniform(0.2, 1.0);
      const RetrievalTask task = make_retrieval_task(k, 2 * k, sigma2, 4.0, rng.next());
      for (std::size_t rep = 0; rep < 20; ++rep, ++trials) {
        std::vector<double> scores(k, 0.0);
        scores[0] = gamma;
        if (rep)
          for (std::size_t i = 2; i < k; ++i) scores[i] = -rng.uniform(0.0, 2.0);
        const RetrievalRoundtrip rt = retrieval_roundtrip(task, query_with_scores(task, scores));
        const double bound = retrieval_tight_mass(k, gamma, sigma2);
        below = std::max(below, bound - rt.r(0, 0));
        if (rep == 0) attained = std::max(attained, std::abs(bound - rt.r(0, 0)));
      }
    }
  CheckResult r = verify_detail::at_most("tasks", "retrieval_tight_bound", trials, below, 1e-12);
  r.pass = r.pass && attained < 1e-12;
  r.metrics = {{"attainment_gap", attained}};
  return r;
}

// Exact stack tracking on generated Dyck data; the increment's utility is
// positive on every bracket token at the exact state and degrades at most
// linearly in |s − s*| (fitted constant finite).
inline CheckResult check_dyck_tracking(const VerifyOptions& o) {
  const std::size_t m = 6, depth = 4;
  const double kappa = 2.0;
  const DyckDataset ds = gen_dyck_dataset(m, 64, depth, derive_seed(o.seed, 503), 16);
  const Tensor block = dyck_increment_block(m);
  double tracking = 0.0, min_utility = std::numeric_limits<double>::infinity(), slope = 0.0;
  std::size_t tokens = 0;
  Rng rng(derive_seed(o.seed, 504));
  for (const auto& seq : ds.sequences) {
    const auto trace = dyck_trace(seq.deltas);
    double s = 0.0;
    for (std::size_t t = 0; t < seq.symbols.size(); ++t, ++tokens) {
      s += ops::apply_linear(dyck_encode_symbol(seq.symbols[t], m), block)(0, 0);
      tracking = std::max({tracking, std::abs(s - trace[t]), std::abs(s - static_cast<double>(seq.depth_after[t]))});
      if (seq.deltas[t] == 0) continue;
      const auto before = static_cast<double>(seq.depth_before[t]);
      const double exact = dyck_utility(before, seq.deltas[t], seq.depth_after[t], kappa, depth);
      min_utility = std::min(min_utility, exact);
      const double eps = rng.uniform(-0.3, 0.3);
      const double perturbed = dyck_utility(before + eps, seq.deltas[t], seq.depth_after[t], kappa, depth);
      if (std::abs(eps) > 1e-9) slope = std::max(slope, (exact - perturbed) / std::abs(eps));
    }
  }
  CheckResult r = verify_detail::at_most("tasks", "dyck_tracking", tokens, tracking, 1e-12);
  r.pass = r.pass && min_utility > 0.0 && std::isfinite(slope) && slope < 1e3;
  r.metrics = {{"min_exact_utility", min_utility}, {"fitted_slope", slope}};
  std::ostringstream os;
  os << "tracking error " << tracking << ", min bracket utility " << min_utility << ", fitted degradation constant " << slope;
  r.detail = os.str();
  return r;
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

inline CheckResult check_kl_identity(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 601));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + rng.index(19), dim = 1 + rng.index(8);
    const SoftmaxHead head = random_head(c, dim, rng);
    worst = std::max(worst, kl_utility_identity(random_distribution(c, rng), rng.normal_tensor(1, dim),
                                                rng.normal_tensor(1, dim), head).gap);
  }
  return at_most("geometry", "kl_identity", 1000, worst, 1e-12);
}

// Closed-form Gibbs weights against the projected-gradient maximizer.
inline CheckResult check_gibbs(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 602));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(5);
    const Tensor u = rng.uniform_tensor(1, n, 0.0, 1.0), tau = rng.uniform_tensor(1, n, 0.0, 0.5);
    const double t = rng.uniform(0.5, 1.0);
    const Tensor closed = o.inject_gibbs_sign ? gibbs_weights(ops::scale(u, -1.0), ops::scale(tau, -1.0), t)
                                              : gibbs_weights(u, tau, t);
    worst = std::max(worst, ops::max_abs_diff(closed, gibbs_projected_gradient(ops::sub(u, tau), t)));
  }
  return verify_detail::at_most("geometry", "gibbs_closed_form", 100, worst, 1e-8);
}

// Quadratic losses with computed (μ, L): the two-sided utility bounds hold on
// every instance, and gradient steps with a ∈ (0, 2/L) have positive utility
// at least a(1 − La/2)‖∇‖².
inline CheckResult check_utility_bounds(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 603));
  std::size_t violations = 0;
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(6);
    const Matrix q = Eigen::HouseholderQR<Matrix>(to_eigen(rng.normal_tensor(n, n))).householderQ();
    Vector lam(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < lam.size(); ++i) lam(i) = rng.uniform(0.1, 5.0);
    const Matrix am = q * lam.asDiagonal() * q.transpose();
    const Tensor a = from_eigen(0.5 * (am + am.transpose()));
    const Tensor zs = rng.normal_tensor(1, n), z = rng.normal_tensor(1, n);
    const UtilityBounds b = utility_bounds_check(a, zs, z, rng.normal_tensor(1, n));
    const double scale = 1e-12 * (1.0 + std::abs(b.utility) + std::abs(b.lower) + std::abs(b.upper));
    if (!b.holds(scale)) ++violations;
    worst = std::max({worst, b.lower - b.utility, b.utility - b.upper});

    const Tensor g = ops::matmul(ops::sub(z, zs), a);
    const double step = rng.uniform(1e-3, 1.0 - 1e-3) * 2.0 / b.lipschitz;
    const UtilityBounds gs = utility_bounds_check(a, zs, z, ops::scale(g, -step));
    const double floor = gradient_step_lower_bound(step, b.lipschitz, ops::dot(g, g));
    if (!(gs.utility > 0.0) || gs.utility < floor - 1e-12 * (1.0 + floor)) ++violations;
  }
  CheckResult r = at_most("geometry", "utility_bounds", 200, static_cast<double>(violations), 0.0);
  r.metrics = {{"worst_bound_excess", worst}};
  return r;
}

// |KL − ½δηᵀGδη| decays with slope 3 under halving of ‖δz‖; the argmax over
// candidate directions agrees between KL and its quadratic at ‖δz‖ = 1e-4.
inline CheckResult check_fisher_gain(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 604));
  const std::size_t slope_trials = 20, halvings = 8;
  // Remainders are pooled over instances before the fit, so an instance whose
  // cubic coefficient happens to nearly vanish cannot dominate the slope.
  std::vector<double> xs, pooled(halvings, 0.0), slopes;
  for (std::size_t h = 0; h < halvings; ++h) xs.push_back(0.02 * std::pow(0.5, static_cast<double>(h)));
  for (std::size_t trial = 0; trial < slope_trials; ++trial) {
    const std::size_t c = 3 + rng.index(6), dim = 2 + rng.index(5);
    const SoftmaxHead head = random_head(c, dim, rng);
    const Tensor z = rng.normal_tensor(1, dim);
    Tensor dir = rng.normal_tensor(1, dim);
    dir = ops::scale(dir, 1.0 / ops::frobenius(dir));
    std::vector<double> ys;
    for (std::size_t h = 0; h < halvings; ++h) {
      ys.push_back(fisher_quadratic_gain(z, ops::scale(dir, xs[h]), head).gap);
      pooled[h] += ys.back();
    }
    slopes.push_back(loglog_slope(xs, ys));
  }
  const double slope = loglog_slope(xs, pooled);
  std::sort(slopes.begin(), slopes.end());
  const double median = slopes[slopes.size() / 2];
  std::size_t agree = 0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t c = 3 + rng.index(6), dim = 2 + rng.index(5);
    const SoftmaxHead head = random_head(c, dim, rng);
    const Tensor z = rng.normal_tensor(1, dim);
    std::size_t best_kl = 0, best_q = 0;
    double top_kl = -1.0, top_q = -1.0;
    for (std::size_t k = 0; k < 8; ++k) {
      Tensor dir = rng.normal_tensor(1, dim);
      dir = ops::scale(dir, 1e-4 / ops::frobenius(dir));
      const FisherGain f = fisher_quadratic_gain(z, dir, head);
      if (f.kl > top_kl) top_kl = f.kl, best_kl = k;
      if (f.quadratic > top_q) top_q = f.quadratic, best_q = k;
    }
    if (best_kl == best_q) ++agree;
  }
  CheckResult r = at_most("geometry", "fisher_quadratic_gain", slope_trials + 100, std::abs(slope - 3.0), 0.3);
  r.pass = r.pass && agree >= 99;
  r.metrics = {{"slope", slope}, {"median_instance_slope", median}, {"argmax_agreement", static_cast<double>(agree)}};
  std::ostringstream os;
  os << "pooled remainder slope " << slope << " (median per instance " << median << "), argmax agreement " << agree << "/100";
  r.detail = os.str();
  return r;
}

// G(η)·1 = 0 and G ⪰ 0.
inline CheckResult check_fisher_matrix(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 605));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const Tensor p = random_distribution(2 + rng.index(10), rng);
    const Tensor g = fisher_matrix(p);
    worst = std::max(worst, ops::max_abs(ops::sum_cols(g)));
    Eigen::SelfAdjointEigenSolver<Matrix> es(to_eigen(g));
    worst = std::max(worst, -es.eigenvalues().minCoeff());
  }
  return at_most("geometry", "fisher_matrix", 200, worst, 1e-14);
}

// Separable per-grade losses give exactly additive gains for updates on distinct
// grades; a shared softmax couples them at O(ε²) (fitted slope 2).
inline CheckResult check_additive_gains(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 606));
  double sep = 0.0;
  const std::size_t trials = 20, halvings = 8;
  std::vector<double> xs, pooled(halvings, 0.0);
  for (std::size_t k = 0; k < halvings; ++k) xs.push_back(0.02 * std::pow(0.5, static_cast<double>(k)));
  for (std::size_t trial = 0; trial < trials; ++trial) {
    const Grading g = random_grading(rng, 4, 3);
    const GradedVector z = GradedVector::split(g, rng.normal_tensor(1, g.ambient_dim()));
    std::vector<SoftmaxHead> heads;
    std::vector<std::size_t> ys;
    for (Grade h = 0; h < g.size(); ++h) {
      heads.push_back(random_head(3, g.dim(h), rng));
      ys.push_back(rng.index(3));
    }
    const GradedLoss separable = [&](const GradedVector& v) {
      double s = 0.0;
      for (Grade h = 0; h < g.size(); ++h) s += ce_loss(heads[h], v.block(h), ys[h]);
      return s;
    };
    std::vector<GradeUpdate> ups;
    for (Grade h = 0; h < g.size(); ++h) ups.push_back({h, rng.normal_tensor(1, g.dim(h))});
    sep = std::max(sep, additive_gains_check(separable, z, ups).gap);

    const SoftmaxHead shared = random_head(4, g.ambient_dim(), rng);
    const std::size_t y = rng.index(4);
    const GradedLoss coupled = [&](const GradedVector& v) { return ce_loss(shared, v.assemble(), y); };
    for (std::size_t k = 0; k < halvings; ++k) {
      std::vector<GradeUpdate> scaled;
      for (const auto& u : ups) scaled.push_back({u.grade, ops::scale(u.delta, xs[k])});
      pooled[k] += additive_gains_check(coupled, z, scaled).gap;
    }
  }
  const double slope = loglog_slope(xs, pooled);
  CheckResult r = at_most("geometry", "additive_gains", trials, sep, 1e-12);
  r.pass = r.pass && std::abs(slope - 2.0) <= 0.2;
  r.metrics = {{"separable_gap", sep}, {"slope", slope}};
  std::ostringstream os;
  os << "separable gap " << sep << " (bound 1e-12), pooled shared-softmax gap slope " << slope << " (2 ± 0.2)";
  r.detail = os.str();
  return r;
}

// Closed-form projected mirror step against the generic KKT solve.
inline CheckResult check_mirror_step(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 607));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 200; ++trial) {
    const std::size_t d = 2 + rng.index(6), k = 1 + rng.index(d);
    Tensor span = rng.normal_tensor(d, k);
    if (trial % 5 == 0 && k > 1)
      for (std::size_t i = 0; i < d; ++i) span(i, k - 1) = span(i, 0);
    const Tensor z = rng.normal_tensor(1, d), g = rng.normal_tensor(1, d);
    const double eta = rng.uniform(0.01, 2.0);
    worst = std::max(worst, ops::max_abs_diff(mirror_step(z, g, span, eta), constrained_quadratic_oracle(z, g, span, eta)));
  }
  return verify_detail::at_most("geometry", "mirror_step", 200, worst, 1e-10);
}

// ---------------------------------------------------------------------------
// category
// ---------------------------------------------------------------------------

// Linearized adjunction residual on the full probe bases (random SPD metrics
// and the pullback metric), and idempotence of the round-trip projector under
// the pullback metric.
inline CheckResult check_adjoint(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 701));
  double residual = 0.0, idem = 0.0;
  std::size_t trials = 0;
  for (std::size_t trial = 0; trial < 100; ++trial, ++trials) {
    const std::size_t d_key = 3 + rng.index(5), d_sem = 1 + rng.index(d_key), k = d_key + 2 + rng.index(4);
    const Tensor keys = rng.normal_tensor(k, d_key, 1.0 / std::sqrt(static_cast<double>(k)));
    const Tensor enc = well_conditioned(d_key, d_sem, rng);
    residual = std::max(residual, build_retrieval_adjoint(keys, enc, random_spd(d_sem, rng)).residual);
    const AdjointPair pb = build_retrieval_adjoint(keys, enc, pullback_metric(keys, enc));
    residual = std::max(residual, pb.residual);
    idem = std::max(idem, round_trip_projector(pb).idempotence);
  }
  CheckResult r = at_most("category", "adjoint", trials, residual, 1e-12);
  r.pass = r.pass && idem < 1e-10;
  r.metrics = {{"adjunction_residual", residual}, {"idempotence", idem}};
  std::ostringstream os;
  os << "adjunction residual " << residual << " (bound 1e-12), projector idempotence " << idem << " (bound 1e-10)";
  r.detail = os.str();
  return r;
}

// Spectrum of the pullback-metric projector lies in {0, 1}, P is symmetric and
// the sem round trip ρ∘ι is the identity.
inline CheckResult check_projector(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 702));
  double worst = 0.0;
  bool isometric = true;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t d_key = 3 + rng.index(4), d_sem = 1 + rng.index(d_key);
    const Tensor keys = rng.normal_tensor(d_key + 4, d_key, 0.5);
    const Tensor enc = verify_detail::well_conditioned(d_key, d_sem, rng);
    const ProjectorReport p = round_trip_projector(build_retrieval_adjoint(keys, enc, pullback_metric(keys, enc)));
    worst = std::max({worst, p.spectrum, p.self_adjoint, p.q_identity, p.iterate});
    isometric = isometric && p.isometry;
  }
  CheckResult r = verify_detail::at_most("category", "projector_spectrum", 50, worst, 1e-8);
  r.pass = r.pass && isometric;
  return r;
}

// Internalization respects composition and identities; the unit/counit
// triangles close; distinct tools internalize to distinct blocks.
inline CheckResult check_internalization(const VerifyOptions& o) {
  Rng rng(derive_seed(o.seed, 703));
  double worst = 0.0, min_separation = std::numeric_limits<double>::infinity();
  for (std::size_t trial = 0; trial < 50; ++trial) {
    ToolCatalog cat{Grading({"a", "b", "c"}, {3 + rng.index(3), 3 + rng.index(3), 3 + rng.index(3)}), {}, {}};
    const std::size_t nx = 1 + rng.index(3), ny = 1 + rng.index(3), nz = 1 + rng.index(3);
    cat.add_interface("X", 0, nx, rng.index(cat.grading.dim(0) - nx + 1));
    cat.add_interface("Y", 1, ny, rng.index(cat.grading.dim(1) - ny + 1));
    cat.add_interface("Z", 2, nz, rng.index(cat.grading.dim(2) - nz + 1));
    const Tool f{"f", "X", "Y", rng.normal_tensor(ny, nx)}, g{"g", "Y", "Z", rng.normal_tensor(nz, ny)};
    const Tool f2{"f2", "X", "Y", ops::add(f.map, rng.normal_tensor(ny, nx, 0.1))};
    const Tool id{"id", "X", "X", Tensor::identity(nx)};
    worst = std::max(worst, check_functoriality(cat, f, g));
    worst = std::max(worst, check_functoriality(cat, id, f));
    const TriangleResiduals tri = check_adjunction_triangles(cat);
    worst = std::max({worst, tri.left, tri.right, cat.roundtrip_residual()});
    min_separation = std::min(min_separation, operator_norm(ops::sub(internalize(cat, f).weight, internalize(cat, f2).weight)));
  }
  CheckResult r = verify_detail::at_most("category", "internalization", 50, worst, 1e-12);
  r.pass = r.pass && min_separation > 0.0;
  r.metrics = {{"min_separation", min_separation}};
  return r;
}

// (Φ₃Φ₂)Φ₁ = Φ₃(Φ₂Φ₁) for realized programs, and the realized ambient operator
// restricted to (g_k, g_0) is the composite block.
inline CheckResult check_program_associativity(const VerifyOptions& o) {
  using namespace verify_detail;
  Rng rng(derive_seed(o.seed, 704));
  double worst = 0.0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const Grading g = random_grading(rng, 5, 3);
    std::vector<Grade> walk{rng.index(g.size())};
    for (int s = 0; s < 3; ++s) walk.push_back(rng.index(g.size()));
    std::vector<BlockMap> steps;
    for (std::size_t s = 0; s + 1 < walk.size(); ++s)
      steps.push_back(BlockMap{walk[s], walk[s + 1], rng.normal_tensor(g.dim(walk[s + 1]), g.dim(walk[s])), std::nullopt});
    const Tensor p1 = realize_program({g, {steps[0]}}), p2 = realize_program({g, {steps[1]}}), p3 = realize_program({g, {steps[2]}});
    const Tensor left = ops::matmul(ops::matmul(p3, p2), p1), right = ops::matmul(p3, ops::matmul(p2, p1));
    const MorphicProgram whole{g, steps};
    worst = std::max(worst, ops::max_abs_diff(left, right));
    worst = std::max(worst, ops::max_abs_diff(realize_program(whole), right));
    const Tensor full = realize_program(whole);
    const Tensor comp = program_composite(whole);
    for (std::size_t i = 0; i < comp.rows(); ++i)
      for (std::size_t j = 0; j < comp.cols(); ++j)
        worst = std::max(worst, std::abs(full(g.offset(whole.target()) + i, g.offset(whole.source()) + j) - comp(i, j)));
  }
  return at_most("category", "program_associativity", 100, worst, 1e-12);
}

// ---------------------------------------------------------------------------
// diagnostics-cli
// ---------------------------------------------------------------------------

inline ExperimentConfig smoke_config(const std::string& task, std::uint64_t seed, std::size_t steps) {
  ExperimentConfig c = default_config(task);
  c.seed = seed;
  c.train.seed = seed;
  c.train.steps = steps;
  c.data.train_sequences = 32;
  c.data.eval_sequences = 8;
  return c;
}

// Two runs from the same seed produce byte-identical metric streams, eval
// traces and checkpoints.
inline CheckResult check_determinism(const VerifyOptions& o, std::size_t steps = 25) {
  std::size_t mismatched = 0, compared = 0;
  for (const std::string task : {"modp", "dyck", "retrieval"}) {
    auto run = [&] {
      Experiment ex = build_experiment(smoke_config(task, o.seed + 7, steps));
      std::string stream;
      train(ex, [&](const StepMetrics& m) { stream += metrics_to_json(m).dump() + "\n"; });
      const RoutingTrace tr = trace_dataset(ex.model, ex.eval);
      stream += summary_to_json(summarize(tr, ex.model, ex.eval, ex.designated)).dump() + "\n";
      stream += checkpoint_to_json(Checkpoint{ex.model, std::nullopt, steps}).dump();
      return stream;
    };
    ++compared;
    if (run() != run()) ++mismatched;
  }
  CheckResult r = verify_detail::at_most("diagnostics-cli", "determinism", compared, static_cast<double>(mismatched), 0.0);
  r.detail = std::to_string(compared - mismatched) + "/" + std::to_string(compared) + " tasks byte-identical across reruns";
  return r;
}

// Histogram counts and calibration counts cover every (token, edge) once.
inline CheckResult check_diagnostic_conservation(const VerifyOptions& o) {
  Experiment ex = build_experiment(smoke_config("dyck", o.seed + 11, 0));
  const RoutingTrace tr = trace_dataset(ex.model, ex.eval);
  const std::size_t tokens = tr.token_loss.rows(), E = ex.model.edges().size();
  auto count_column = [](const std::string& csv, std::size_t column, std::size_t layer_column) {
    std::map<std::string, std::size_t> per_layer;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      per_layer[f.at(layer_column)] += std::stoul(f.at(column));
    }
    return per_layer;
  };
  double worst = 0.0;
  for (const auto& [layer, n] : count_column(utility_histogram_csv(tr, ex.model, "pre"), 5, 1))
    worst = std::max(worst, std::abs(static_cast<double>(n) - static_cast<double>(tokens * E)));
  for (const auto& [layer, n] : count_column(calibration_csv(tr, "pre"), 4, 1))
    worst = std::max(worst, std::abs(static_cast<double>(n) - static_cast<double>(tokens * E)));
  return verify_detail::at_most("diagnostics-cli", "diagnostic_conservation", 2 * ex.model.layers(), worst, 0.0);
}

// Ablating an edge whose gate is driven to ~0 (τ_e = 10 in every layer) leaves
// the LM loss unchanged; an inadmissible edge is rejected.
inline CheckResult check_ablation_sanity(const VerifyOptions& o) {
  Experiment ex = build_experiment(smoke_config("modp", o.seed + 13, 0));
  const Edge e = ex.model.edges()[0];
  for (std::size_t l = 0; l < ex.model.layers(); ++l) ex.model.params().at(ex.model.threshold_name(l)).value(0, 0) = 10.0;
  const auto rows = ablate_edges(ex.model, ex.eval, {e});
  const double change = std::abs(rows.at(0).ablated_lm - rows.at(0).base_lm);
  bool rejected = false;
  try {
    ablate_edges(ex.model, ex.eval, {{0, 5}});
  } catch (const Error&) {
    rejected = true;
  }
  CheckResult r = verify_detail::at_most("diagnostics-cli", "ablation_sanity", 1, change, 1e-8);
  r.pass = r.pass && rejected;
  return r;
}

// ---------------------------------------------------------------------------
// Registry and report.
// ---------------------------------------------------------------------------

using CheckFn = std::function<CheckResult(const VerifyOptions&)>;

inline const std::vector<std::pair<std::string, std::vector<CheckFn>>>& check_registry() {
  static const std::vector<std::pair<std::string, std::vector<CheckFn>>> reg = {
      {"tensor-core", {check_primitive_gradients, check_gradient_fidelity, check_softmax_normalization}},
      {"graded-space",
       {check_grading_roundtrip, check_block_composition, check_lgt_sharing, check_param_counts,
        check_least_squares_decoupling, check_normalization_covariance}},
      {"routing",
       {check_masking, check_hard_gating, check_selectivity, check_first_order, check_grading_preservation,
        check_monotone_descent}},
      {"objective", {check_threshold_gradient, check_objective_lower_bound, check_score_function, check_egt_invariance}},
      {"tasks", {check_modp_exactness, check_retrieval_mass_bound, check_retrieval_tight_bound, check_dyck_tracking}},
      {"geometry",
       {check_kl_identity, check_gibbs, check_utility_bounds, check_fisher_gain, check_fisher_matrix, check_additive_gains,
        check_mirror_step}},
      {"category", {check_adjoint, check_projector, check_internalization, check_program_associativity}},
      {"diagnostics-cli",
       {[](const VerifyOptions& o) { return check_determinism(o); }, check_diagnostic_conservation, check_ablation_sanity}},
  };
  return reg;
}

inline std::vector<std::string> suite_names() {
  std::vector<std::string> n;
  for (const auto& [name, fns] : check_registry()) n.push_back(name);
  return n;
}

// Runs one suite or "all". A check that throws is recorded as failed with the
// exception text rather than aborting the run.
inline std::vector<CheckResult> run_suite(const std::string& suite, const VerifyOptions& o,
                                          const std::function<void(const CheckResult&)>& on_result = {}) {
  bool known = suite == "all";
  std::vector<CheckResult> out;
  for (const auto& [name, fns] : check_registry()) {
    if (suite != "all" && suite != name) continue;
    known = true;
    for (const auto& fn : fns) {
      CheckResult r;
      try {
        r = fn(o);
      } catch (const std::exception& e) {
        r = CheckResult{name, "exception", 0, 0.0, 0.0, false, e.what(), {}};
      }
      r.suite = name;
      if (on_result) on_result(r);
      out.push_back(std::move(r));
    }
  }
  if (!known) throw Error("unknown suite '" + suite + "'");
  return out;
}

inline Json report_to_json(const std::vector<CheckResult>& results, const std::string& suite, const VerifyOptions& o) {
  Json checks = Json::array();
  bool pass = true;
  for (const auto& r : results) {
    Json m = Json::object();
    for (const auto& [k, v] : r.metrics) m[k] = v;
    checks.push_back({{"suite", r.suite},
                      {"name", r.name},
                      {"pass", r.pass},
                      {"trials", r.trials},
                      {"measured", r.measured},
                      {"threshold", r.threshold},
                      {"detail", r.detail},
                      {"metrics", m}});
    pass = pass && r.pass;
  }
  return Json{{"suite", suite}, {"seed", o.seed}, {"fault_injected", o.inject_gibbs_sign}, {"pass", pass}, {"checks", checks}};
}

}  // namespace graded
