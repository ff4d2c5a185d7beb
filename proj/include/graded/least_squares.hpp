#pragma once

#include "graded/grading.hpp"
#include "graded/linalg.hpp"

namespace graded {

struct LeastSquaresOptions {
  double max_condition = 1e12;
  double ridge_scale = 1e-10;  // ridge = ridge_scale * trace / d_g
};

// Per-edge normal equations Φ_{h←g} Σ_g = E[y^(h) z^(g)ᵀ], solved independently.
inline BlockSet fit_blocks_least_squares(const GradedVector& z, const GradedVector& y, const EdgeSet& edges,
                                         const LeastSquaresOptions& opt = {}) {
  if (z.batch() != y.batch() || z.batch() == 0) throw ShapeError("least_squares", "sample counts differ");
  const double n = static_cast<double>(z.batch());
  std::map<Grade, Eigen::LDLT<Matrix>> solvers;
  auto solver_for = [&](Grade g) -> const Eigen::LDLT<Matrix>& {
    auto it = solvers.find(g);
    if (it != solvers.end()) return it->second;
    const Matrix zg = to_eigen(z.block(g));
    Matrix sigma = zg.transpose() * zg / n;
    Eigen::SelfAdjointEigenSolver<Matrix> es(sigma);
    const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
    const double rank_tol = std::numeric_limits<double>::epsilon() * static_cast<double>(sigma.rows()) * std::max(hi, 1e-300);
    if (hi <= 0.0 || lo <= rank_tol)
      throw GradingError("least_squares: second-moment matrix of grade '" + z.grading().label(g) + "' is singular");
    if (hi / lo > opt.max_condition)
      sigma += Matrix::Identity(sigma.rows(), sigma.cols()) * (opt.ridge_scale * sigma.trace() / static_cast<double>(sigma.rows()));
    return solvers.emplace(g, Eigen::LDLT<Matrix>(sigma)).first->second;
  };

  BlockSet out;
  for (const Edge& e : edges) {
    const Matrix zg = to_eigen(z.block(e.first));
    const Matrix yh = to_eigen(y.block(e.second));
    const Matrix cross = yh.transpose() * zg / n;  // d_h x d_g
    // Φ Σ = C  <=>  Σ Φᵀ = Cᵀ (Σ symmetric).
    const Matrix phi = solver_for(e.first).solve(cross.transpose()).transpose();
    out[e] = BlockMap{e.first, e.second, from_eigen(phi), std::nullopt};
  }
  return out;
}

// Joint dense least squares on the ambient space: Φ = E[y zᵀ] Σ^{+}.
inline Tensor fit_dense_least_squares(const GradedVector& z, const GradedVector& y) {
  const Matrix zz = to_eigen(z.assemble());
  const Matrix yy = to_eigen(y.assemble());
  const double n = static_cast<double>(z.batch());
  const Matrix sigma = zz.transpose() * zz / n;
  const Matrix cross = yy.transpose() * zz / n;
  return from_eigen(cross * sigma.completeOrthogonalDecomposition().pseudoInverse());
}

}  // namespace graded
