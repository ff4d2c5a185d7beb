#pragma once

#include <string>
#include <vector>

#include "graded/grading.hpp"
#include "graded/linalg.hpp"

namespace graded {

inline double operator_norm(const Tensor& m) {
  if (m.empty()) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(to_eigen(m));
  return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
}

// ---------------------------------------------------------------------------
// Morphic programs: typed paths g_0 → g_1 → … → g_k through admissible blocks.
// ---------------------------------------------------------------------------
struct MorphicProgram {
  Grading grading;
  std::vector<BlockMap> path;

  void check() const {
    for (std::size_t i = 0; i < path.size(); ++i) {
      const BlockMap& b = path[i];
      if (b.weight.rows() != grading.dim(b.target) || b.weight.cols() != grading.dim(b.source))
        throw GradingError("program: step " + std::to_string(i) + " block shape does not match its grades");
      if (i > 0 && path[i - 1].target != b.source)
        throw GradingError("program: step " + std::to_string(i) + " source does not match the previous target");
    }
  }

  Grade source() const { return path.front().source; }
  Grade target() const { return path.back().target; }
};

// The block embedded in the ambient space: zero except at (target, source).
inline Tensor embed_block(const Grading& grading, const BlockMap& b) {
  Tensor m(grading.ambient_dim(), grading.ambient_dim());
  const std::size_t r0 = grading.offset(b.target), c0 = grading.offset(b.source);
  for (std::size_t i = 0; i < b.weight.rows(); ++i)
    for (std::size_t j = 0; j < b.weight.cols(); ++j) m(r0 + i, c0 + j) = b.weight(i, j);
  return m;
}

// Φ_Π = Φ_k ⋯ Φ_1 on the ambient space; the empty path realizes the identity.
inline Tensor realize_program(const MorphicProgram& prog) {
  prog.check();
  Tensor out = Tensor::identity(prog.grading.ambient_dim());
  for (const BlockMap& b : prog.path) out = ops::matmul(embed_block(prog.grading, b), out);
  return out;
}

// The g_k ← g_0 block of Φ_Π.
inline Tensor program_composite(const MorphicProgram& prog) {
  prog.check();
  if (prog.path.empty()) throw GradingError("program_composite: empty path has no typed endpoints");
  Tensor out = prog.path.front().weight;
  for (std::size_t i = 1; i < prog.path.size(); ++i) out = ops::matmul(prog.path[i].weight, out);
  return out;
}

// Step-by-step application to rows x ∈ V_{g_0}.
inline Tensor apply_program(const MorphicProgram& prog, const Tensor& x) {
  prog.check();
  Tensor y = x;
  for (const BlockMap& b : prog.path) y = apply_block(b, y);
  return y;
}

inline MorphicProgram reversed_transpose(const MorphicProgram& prog) {
  MorphicProgram r{prog.grading, {}};
  for (auto it = prog.path.rbegin(); it != prog.path.rend(); ++it)
    r.path.push_back(BlockMap{it->target, it->source, ops::transpose(it->weight), std::nullopt});
  return r;
}

// ---------------------------------------------------------------------------
// Tool catalog: interfaces are (grade, encoder, decoder) triples; tools act
// between interfaces and internalize to blocks Enc_Y ∘ τ ∘ Dec_X.
// ---------------------------------------------------------------------------
struct Interface {
  std::string name;
  Grade grade = 0;
  Tensor encoder;  // d_g x n_X
  Tensor decoder;  // n_X x d_g
};

struct Tool {
  std::string name;
  std::string from;
  std::string to;
  Tensor map;  // n_Y x n_X
};

struct ToolCatalog {
  Grading grading;
  std::vector<Interface> interfaces;
  std::vector<Tool> tools;

  const Interface& interface(const std::string& n) const {
    for (const auto& i : interfaces)
      if (i.name == n) return i;
    throw Error("catalog: unknown interface '" + n + "'");
  }
  const Tool& tool(const std::string& n) const {
    for (const auto& t : tools)
      if (t.name == n) return t;
    throw Error("catalog: unknown tool '" + n + "'");
  }

  // Standard-basis injection of an n-dimensional interface at `offset` within grade g.
  Interface& add_interface(std::string name, Grade g, std::size_t n, std::size_t offset = 0) {
    if (offset + n > grading.dim(g)) throw GradingError("catalog: interface does not fit in its grade");
    Tensor enc(grading.dim(g), n);
    for (std::size_t i = 0; i < n; ++i) enc(offset + i, i) = 1.0;
    interfaces.push_back(Interface{std::move(name), g, enc, ops::transpose(enc)});
    return interfaces.back();
  }

  // Max over interfaces of ‖Dec∘Enc − I‖.
  double roundtrip_residual() const {
    double r = 0.0;
    for (const auto& i : interfaces)
      r = std::max(r, operator_norm(ops::sub(ops::matmul(i.decoder, i.encoder), Tensor::identity(i.encoder.cols()))));
    return r;
  }
};

// F(τ) = Enc_Y τ Dec_X as the block V_{g_X} → V_{g_Y}.
inline BlockMap internalize(const ToolCatalog& cat, const Tool& t) {
  const Interface& x = cat.interface(t.from);
  const Interface& y = cat.interface(t.to);
  if (t.map.rows() != y.encoder.cols() || t.map.cols() != x.decoder.rows()) throw ShapeError("internalize", t.map.extents());
  return BlockMap{x.grade, y.grade, ops::matmul(y.encoder, ops::matmul(t.map, x.decoder)), std::nullopt};
}

inline Tool chain(const Tool& t1, const Tool& t2) {
  if (t1.to != t2.from) throw Error("chain: tools are not composable");
  return Tool{t2.name + "∘" + t1.name, t1.from, t2.to, ops::matmul(t2.map, t1.map)};
}

// ‖F(τ₂∘τ₁) − F(τ₂)∘F(τ₁)‖ in operator norm.
inline double check_functoriality(const ToolCatalog& cat, const Tool& t1, const Tool& t2) {
  const BlockMap joint = internalize(cat, chain(t1, t2));
  const Tensor seq = ops::matmul(internalize(cat, t2).weight, internalize(cat, t1).weight);
  return operator_norm(ops::sub(joint.weight, seq));
}

struct TriangleResiduals {
  double left = 0.0;   // ε_F ∘ F(η) vs id_F
  double right = 0.0;  // G(ε) ∘ η_G vs id_G
};

// Unit η_X = Dec∘Enc (realized through Enc), counit ε_g = π_g∘ι_g. Both
// identities hold exactly when every interface round-trips.
inline TriangleResiduals check_adjunction_triangles(const ToolCatalog& cat) {
  TriangleResiduals r;
  for (const auto& i : cat.interfaces) {
    const std::size_t d = cat.grading.dim(i.grade);
    Tensor counit(d, d);
    for (std::size_t c = 0; c < d; ++c) {
      Tensor e(1, d);
      e(0, c) = 1.0;
      const Tensor back = project(include(cat.grading, e, i.grade), i.grade);
      for (std::size_t k = 0; k < d; ++k) counit(k, c) = back(0, k);
    }
    const Tensor unit = ops::matmul(i.decoder, i.encoder);
    const Tensor left = ops::matmul(counit, ops::matmul(i.encoder, unit));
    const Tensor right = ops::matmul(unit, ops::matmul(i.decoder, counit));
    r.left = std::max(r.left, operator_norm(ops::sub(left, i.encoder)));
    r.right = std::max(r.right, operator_norm(ops::sub(right, i.decoder)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Adjoint retrieval/write-back. ι_lin = MᵀME : V_sem → V_ret = ℝ^{d_key}, with
// ⟨x, y⟩_sem = xᵀSy and the standard product on V_ret. ρ = W = S⁻¹EᵀMᵀM is then
// the S-adjoint of ι_lin.
// ---------------------------------------------------------------------------
struct AdjointPair {
  Tensor iota;    // d_ret x d_sem
  Tensor rho;     // d_sem x d_ret
  Tensor metric;  // S, d_sem x d_sem
  double residual = 0.0;
};

// max_{i,j} |⟨ρ(e_i), e_j⟩_S − ⟨e_i, ι(e_j)⟩| over the standard probe bases.
inline double adjunction_residual(const Tensor& iota, const Tensor& rho, const Tensor& metric) {
  const Tensor lhs = ops::matmul(ops::transpose(rho), metric);  // (i, j) = ρ(e_i)ᵀ S e_j
  return ops::max_abs_diff(lhs, iota);
}

inline void require_spd(const Tensor& s) {
  if (s.rows() != s.cols()) throw ShapeError("metric", s.extents());
  const Matrix m = to_eigen(s);
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, m.cwiseAbs().maxCoeff()))
    throw Error("metric is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw Error("metric is singular or indefinite");
}

inline AdjointPair build_retrieval_adjoint(const Tensor& keys, const Tensor& encoder, const Tensor& metric) {
  require_spd(metric);
  if (keys.cols() != encoder.rows() || encoder.cols() != metric.rows())
    throw ShapeError("build_retrieval_adjoint", extents_pair(keys, encoder));
  const Tensor mtm = ops::matmul(ops::transpose(keys), keys);
  AdjointPair pair;
  pair.iota = ops::matmul(mtm, encoder);
  const Matrix w = to_eigen(metric).ldlt().solve(to_eigen(ops::transpose(encoder)) * to_eigen(mtm));
  pair.rho = from_eigen(w);
  pair.metric = metric;
  pair.residual = adjunction_residual(pair.iota, pair.rho, pair.metric);
  return pair;
}

// ι(u) = Mᵀ softmax(M E u / τ).
inline Tensor softmax_retrieval(const Tensor& keys, const Tensor& encoder, const Tensor& u, double tau) {
  const Tensor scores = ops::apply_linear(ops::apply_linear(u, encoder), keys);
  return ops::matmul(ops::softmax_rows(ops::scale(scores, 1.0 / tau)), keys);
}

// Deviation of the softmax retrieval from ι_lin on key-aligned probes (E u = m_i
// for each unit-norm key m_i), maximized over keys.
inline double softmax_linearization_gap(const Tensor& keys, const Tensor& encoder, double tau) {
  const Matrix e = to_eigen(encoder);
  const Matrix pinv = e.completeOrthogonalDecomposition().pseudoInverse();
  const Tensor mtm = ops::matmul(ops::transpose(keys), keys);
  double gap = 0.0;
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    const Tensor u = from_eigen_row(pinv * row_to_eigen(keys, i));
    const Tensor lin = ops::apply_linear(ops::apply_linear(u, encoder), mtm);
    gap = std::max(gap, ops::frobenius(ops::sub(softmax_retrieval(keys, encoder, u, tau), lin)));
  }
  return gap;
}

struct ProjectorReport {
  Tensor projector;          // P = ι∘ρ on V_ret
  Tensor roundtrip;          // Q = ρ∘ι on V_sem
  double idempotence = 0.0;  // ‖P² − P‖_max
  double self_adjoint = 0.0; // ‖P − Pᵀ‖_max (V_ret carries the standard product)
  double iterate = 0.0;      // max_k ‖P^k − P‖_max, k ≤ 10
  double spectrum = 0.0;     // max distance of eig(P) from {0, 1}
  double q_identity = 0.0;   // ‖Q − I‖_max
  bool isometry = false;     // singular values of ι in the S-metric all equal 1
};

inline ProjectorReport round_trip_projector(const AdjointPair& pair) {
  if (pair.residual > 1e-8) throw Error("round_trip_projector: pair is not adjoint");
  ProjectorReport r;
  r.projector = ops::matmul(pair.iota, pair.rho);
  r.roundtrip = ops::matmul(pair.rho, pair.iota);
  const Tensor& p = r.projector;
  r.idempotence = ops::max_abs_diff(ops::matmul(p, p), p);
  r.self_adjoint = ops::max_abs_diff(p, ops::transpose(p));
  Tensor pk = p;
  for (int k = 2; k <= 10; ++k) {
    pk = ops::matmul(pk, p);
    r.iterate = std::max(r.iterate, ops::max_abs_diff(pk, p));
  }
  Eigen::EigenSolver<Matrix> es(to_eigen(p));
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const std::complex<double> ev = es.eigenvalues()(i);
    r.spectrum = std::max(r.spectrum, std::min(std::abs(ev), std::abs(ev - 1.0)));
  }
  r.q_identity = ops::max_abs_diff(r.roundtrip, Tensor::identity(r.roundtrip.rows()));
  // ι as a map from (V_sem, S) to the standard V_ret: A S^{-1/2}.
  Eigen::SelfAdjointEigenSolver<Matrix> es_s(to_eigen(pair.metric));
  const Matrix s_inv_half = es_s.operatorInverseSqrt();
  Eigen::JacobiSVD<Matrix> svd(to_eigen(pair.iota) * s_inv_half);
  r.isometry = true;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    r.isometry = r.isometry && std::abs(svd.singularValues()(i) - 1.0) < 1e-8;
  return r;
}

// Metric pulled back through ι_lin: S = AᵀA makes ι_lin an isometry and P an
// orthogonal projector. Requires A to have full column rank.
inline Tensor pullback_metric(const Tensor& keys, const Tensor& encoder) {
  const Tensor a = ops::matmul(ops::matmul(ops::transpose(keys), keys), encoder);
  return ops::matmul(ops::transpose(a), a);
}

}  // namespace graded
