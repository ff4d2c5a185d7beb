#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "graded/grading.hpp"
#include "graded/linalg.hpp"

namespace graded {

// Softmax head: η = W z + b, p = softmax(η).
struct SoftmaxHead {
  Tensor weight;  // C x D
  Tensor bias;    // 1 x C

  Tensor logits(const Tensor& z) const {
    return ops::add(ops::apply_linear(z, weight), ops::broadcast_rows(bias, z.rows()));
  }
  Tensor probs(const Tensor& z) const { return ops::softmax_rows(logits(z)); }
  std::size_t classes() const { return weight.rows(); }
};

// G(η) = diag(p) − p pᵀ.
inline Tensor fisher_matrix(const Tensor& p) {
  if (p.rows() != 1) throw ShapeError("fisher_matrix", p.extents());
  const std::size_t c = p.cols();
  Tensor g(c, c);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) g(i, j) = (i == j ? p(0, i) : 0.0) - p(0, i) * p(0, j);
  return g;
}

inline double quadratic_form(const Tensor& m, const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s += x[i] * m(i, j) * x[j];
  return s;
}

inline void require_positive(const char* what, const Tensor& p) {
  for (double v : p.data())
    if (!(v > 0.0)) throw Error(std::string("zero-probability class in ") + what);
}

inline double kl_divergence(const Tensor& p, const Tensor& q) {
  ops::require_same("kl_divergence", p, q);
  require_positive("kl_divergence (p)", p);
  require_positive("kl_divergence (q)", q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

struct KlIdentity {
  double lhs = 0.0;  // E_{y∼P}[ΔL(z; y)]
  double rhs = 0.0;  // KL(P‖p_z) − KL(P‖p_{z⁺})
  double gap = 0.0;
};

// Both sides are evaluated by enumeration over classes; log-probabilities come
// from a shared log-softmax so the identity is tested, not its rounding.
inline KlIdentity kl_utility_identity(const Tensor& P, const Tensor& z, const Tensor& z_plus, const SoftmaxHead& head) {
  const Tensor lp = ops::log_softmax_rows(head.logits(z));
  const Tensor lq = ops::log_softmax_rows(head.logits(z_plus));
  if (P.cols() != lp.cols() || P.rows() != 1) throw ShapeError("kl_utility_identity", extents_pair(P, lp));
  require_positive("P", P);
  require_positive("p_z", ops::softmax_rows(head.logits(z)));
  require_positive("p_z+", ops::softmax_rows(head.logits(z_plus)));
  KlIdentity r;
  double kl_z = 0.0, kl_zp = 0.0;
  for (std::size_t c = 0; c < P.cols(); ++c) {
    const double w = P(0, c);
    r.lhs += w * (-lp(0, c) + lq(0, c));
    kl_z += w * (std::log(w) - lp(0, c));
    kl_zp += w * (std::log(w) - lq(0, c));
  }
  r.rhs = kl_z - kl_zp;
  r.gap = std::abs(r.lhs - r.rhs);
  return r;
}

// α*(e) ∝ exp((ΔL(e) − τ_e)/T).
inline Tensor gibbs_weights(const Tensor& utility, const Tensor& thresholds, double temperature) {
  if (!(temperature > 0.0)) throw Error("gibbs_weights: temperature must be positive");
  return ops::softmax_rows(ops::scale(ops::sub(utility, thresholds), 1.0 / temperature));
}

// ⟨α, u⟩ + T·H(α), maximized by the Gibbs weights of u.
inline double gibbs_objective(const Tensor& alpha, const Tensor& u, double temperature) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += alpha[i] * u[i] - temperature * ops::xlogx(alpha[i]);
  return s;
}

// Euclidean projection onto {x ≥ 0, Σx = mass} by the sort-and-threshold rule.
inline std::vector<double> project_simplex(std::vector<double> v, double mass = 1.0) {
  std::vector<double> s = v;
  std::sort(s.begin(), s.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    cum += s[i];
    const double t = (cum - mass) / static_cast<double>(i + 1);
    if (s[i] - t > 0.0) theta = t;
  }
  for (auto& x : v) x = std::max(0.0, x - theta);
  return v;
}

// Projected-gradient maximizer of ⟨α,u⟩ + T·H(α) over the simplex. Iterates stay
// in {α ≥ a}, with a = e^{(u_min − u_max)/T}/n a floor every maximizer clears, so the
// curvature T/α is bounded by L = T/a and the step 1/L is monotone.
inline Tensor gibbs_projected_gradient(const Tensor& u, double temperature, std::size_t iterations = 10000) {
  const std::size_t n = u.size();
  const auto [lo, hi] = std::minmax_element(u.data().begin(), u.data().end());
  const double floor = std::exp((*lo - *hi) / temperature) / static_cast<double>(n) * 0.5;
  const double step = floor / temperature;
  std::vector<double> a(n, 1.0 / static_cast<double>(n));
  for (std::size_t it = 0; it < iterations; ++it) {
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + step * (u[i] - temperature * (std::log(a[i]) + 1.0)) - floor;
    y = project_simplex(y, 1.0 - floor * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) a[i] = y[i] + floor;
  }
  Tensor out(1, n);
  for (std::size_t i = 0; i < n; ++i) out(0, i) = a[i];
  return out;
}

struct FisherGain {
  double kl = 0.0;                // KL(p_z ‖ p_{z+δz})
  double expected_utility = 0.0;  // E_{y∼p_z}[ΔL] = −KL
  double quadratic = 0.0;         // ½ δηᵀ G δη
  double gap = 0.0;               // |KL − quadratic|
};

inline FisherGain fisher_quadratic_gain(const Tensor& z, const Tensor& dz, const SoftmaxHead& head) {
  const Tensor p = head.probs(z);
  const Tensor q = head.probs(ops::add(z, dz));
  const Tensor deta = ops::apply_linear(dz, head.weight);
  FisherGain r;
  r.kl = kl_divergence(p, q);
  r.expected_utility = -r.kl;
  r.quadratic = 0.5 * quadratic_form(fisher_matrix(p), deta);
  r.gap = std::abs(r.kl - r.quadratic);
  return r;
}

// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// Orthonormal basis of span(columns of S); singular values below 1e-12·σ_max
// count as zero, so duplicated or dependent columns are handled.
inline Matrix span_basis(const Matrix& s) {
  Eigen::JacobiSVD<Matrix> svd(s, Eigen::ComputeThinU);
  const auto& sv = svd.singularValues();
  const double tol = 1e-12 * std::max(1.0, sv.size() ? sv(0) : 0.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  return svd.matrixU().leftCols(rank);
}

// u* = z − η Π_S ∇, with Π_S the orthogonal projector onto span(columns of S).
inline Tensor mirror_step(const Tensor& z, const Tensor& grad, const Tensor& span, double eta) {
  const Matrix q = span_basis(to_eigen(span));
  const Vector g = row_to_eigen(grad);
  const Vector u = row_to_eigen(z) - eta * (q * (q.transpose() * g));
  return from_eigen_row(u);
}

// Generic equality-constrained quadratic: min ⟨g, u⟩ + ‖u − z‖²/(2η) s.t. u − z ∈ span(S),
// solved through its KKT system with the constraint Nᵀ(u − z) = 0, N ⊥ span(S).
inline Tensor constrained_quadratic_oracle(const Tensor& z, const Tensor& grad, const Tensor& span, double eta) {
  const Matrix s = to_eigen(span);
  const Eigen::Index d = s.rows();
  Eigen::JacobiSVD<Matrix> svd(s, Eigen::ComputeFullU);
  const double tol = 1e-12 * std::max(1.0, svd.singularValues().size() ? svd.singularValues()(0) : 0.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i)
    if (svd.singularValues()(i) > tol) ++rank;
  const Matrix n = svd.matrixU().rightCols(d - rank);
  const Eigen::Index c = n.cols();
  Matrix kkt = Matrix::Zero(d + c, d + c);
  kkt.topLeftCorner(d, d) = Matrix::Identity(d, d) / eta;
  kkt.topRightCorner(d, c) = n;
  kkt.bottomLeftCorner(c, d) = n.transpose();
  Vector rhs(d + c);
  const Vector zz = row_to_eigen(z);
  rhs.head(d) = zz / eta - row_to_eigen(grad);
  rhs.tail(c) = n.transpose() * zz;
  const Vector sol = kkt.fullPivLu().solve(rhs);
  return from_eigen_row(sol.head(d));
}

inline double bregman_euclidean(const Tensor& u, const Tensor& z) {
  const double d = ops::frobenius(ops::sub(u, z));
  return 0.5 * d * d;
}

struct UtilityBounds {
  double utility = 0.0;
  double lower = 0.0;  // −⟨∇,δ⟩ − (L/2)‖δ‖²
  double upper = 0.0;  // −⟨∇,δ⟩ − (μ/2)‖δ‖²
  double mu = 0.0;
  double lipschitz = 0.0;
  bool holds(double slack = 0.0) const { return lower <= utility + slack && utility <= upper + slack; }
};

// Quadratic loss ½(z − z*)ᵀA(z − z*); μ and L are A's extreme eigenvalues.
inline UtilityBounds utility_bounds_check(const Tensor& a, const Tensor& z_star, const Tensor& z, const Tensor& delta) {
  const Matrix am = to_eigen(a);
  Eigen::SelfAdjointEigenSolver<Matrix> es(am);
  UtilityBounds r;
  r.mu = es.eigenvalues().minCoeff();
  r.lipschitz = es.eigenvalues().maxCoeff();
  if (!(r.mu > 0.0)) throw Error("utility_bounds_check: A must be positive definite");
  const Vector zz = row_to_eigen(z), zs = row_to_eigen(z_star), dd = row_to_eigen(delta);
  auto f = [&](const Vector& x) { return 0.5 * (x - zs).dot(am * (x - zs)); };
  const Vector g = am * (zz - zs);
  r.utility = f(zz) - f(zz + dd);
  const double lin = -g.dot(dd), sq = dd.squaredNorm();
  r.lower = lin - 0.5 * r.lipschitz * sq;
  r.upper = lin - 0.5 * r.mu * sq;
  return r;
}

// ΔL ≥ a(1 − La/2)‖∇‖² for δ = −a∇.
inline double gradient_step_lower_bound(double a, double lipschitz, double grad_sq) {
  return a * (1.0 - 0.5 * lipschitz * a) * grad_sq;
}

struct GradeUpdate {
  Grade grade;
  Tensor delta;  // 1 x d_g
};

struct AdditiveGains {
  double joint = 0.0;
  double sum = 0.0;
  double gap = 0.0;
};

using GradedLoss = std::function<double(const GradedVector&)>;

// Joint versus summed utilities of updates with mutually orthogonal images.
inline AdditiveGains additive_gains_check(const GradedLoss& loss, const GradedVector& z, const std::vector<GradeUpdate>& updates) {
  for (std::size_t i = 0; i < updates.size(); ++i)
    for (std::size_t j = i + 1; j < updates.size(); ++j)
      if (updates[i].grade == updates[j].grade && std::abs(ops::dot(updates[i].delta, updates[j].delta)) > 1e-12)
        throw Error("additive_gains_check: update images are not orthogonal");
  const double base = loss(z);
  AdditiveGains r;
  GradedVector joint = z;
  for (const auto& u : updates) {
    GradedVector single = z;
    single.block(u.grade) = ops::add(single.block(u.grade), u.delta);
    r.sum += base - loss(single);
    joint.block(u.grade) = ops::add(joint.block(u.grade), u.delta);
  }
  r.joint = base - loss(joint);
  r.gap = std::abs(r.joint - r.sum);
  return r;
}

// One program step writes z^(h) ← W z^(g).
struct ProgramStep {
  Grade source;
  Grade target;
  Tensor weight;  // d_target x d_source
};

struct DepthGap {
  double program = 0.0;     // ΔL(Π) of the chained steps
  double step_sum = 0.0;    // Σ_i ΔL(step_i), each applied alone to z
  double cross = 0.0;       // Σ_{i<j} ‖z^(g_{i−1})‖ ‖z^(g_{j−1})‖
  double constant = 0.0;    // smallest C with ΔL(Π) ≥ Σ − C·cross
};

inline GradedVector apply_step(const GradedVector& z, const ProgramStep& s) {
  GradedVector out = z;
  out.block(s.target) = ops::apply_linear(z.block(s.source), s.weight);
  return out;
}

inline DepthGap program_depth_gap(const std::vector<ProgramStep>& program, const GradedVector& z, const GradedLoss& loss) {
  DepthGap r;
  const double base = loss(z);
  GradedVector chained = z;
  std::vector<double> norms;
  for (const auto& s : program) {
    r.step_sum += base - loss(apply_step(z, s));
    norms.push_back(ops::frobenius(z.block(s.source)));
    chained = apply_step(chained, s);
  }
  r.program = base - loss(chained);
  for (std::size_t i = 0; i < norms.size(); ++i)
    for (std::size_t j = i + 1; j < norms.size(); ++j) r.cross += norms[i] * norms[j];
  const double shortfall = r.step_sum - r.program;
  r.constant = shortfall <= 0.0 ? 0.0 : (r.cross > 0.0 ? shortfall / r.cross : std::numeric_limits<double>::infinity());
  return r;
}

// 1 − exp(−(β/(2T))(γ − γ')).
inline double selectivity_bound(double beta, double temperature, double gap) {
  return 1.0 - std::exp(-(beta / (2.0 * temperature)) * gap);
}

}  // namespace graded
