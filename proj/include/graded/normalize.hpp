#pragma once

#include <string>
#include <vector>

#include "graded/grading.hpp"

namespace graded {

enum class NormKind { kNone, kLayerNorm, kRmsNorm };

inline std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::kNone: return "none";
    case NormKind::kLayerNorm: return "layernorm";
    case NormKind::kRmsNorm: return "rmsnorm";
  }
  return "none";
}

inline NormKind norm_kind_from(const std::string& s) {
  if (s == "none") return NormKind::kNone;
  if (s == "layernorm") return NormKind::kLayerNorm;
  if (s == "rmsnorm") return NormKind::kRmsNorm;
  throw Error("unknown norm kind '" + s + "'");
}

// Per-grade affine parameters; beta is unused by rmsnorm.
struct GradeNormParams {
  Tensor gamma;
  Tensor beta;

  static GradeNormParams unit(std::size_t d) { return {Tensor(1, d, 1.0), Tensor(1, d, 0.0)}; }
};

inline Tensor normalize_block(const Tensor& x, NormKind kind, const GradeNormParams& p, double eps) {
  switch (kind) {
    case NormKind::kNone: return x;
    case NormKind::kLayerNorm: return ops::layernorm_rows(x, p.gamma, p.beta, eps);
    case NormKind::kRmsNorm: return ops::rmsnorm_rows(x, p.gamma, eps);
  }
  return x;
}

// Normalizes each selected grade on its own statistics; others pass through.
inline GradedVector graded_normalize(const GradedVector& z, NormKind kind, const std::vector<GradeNormParams>& params,
                                     double eps, const std::vector<bool>& active = {}) {
  if (eps <= 0.0) throw Error("graded_normalize: eps must be positive");
  std::vector<Tensor> out;
  for (Grade g = 0; g < z.grading().size(); ++g) {
    const bool on = active.empty() || active[g];
    out.push_back(on ? normalize_block(z.block(g), kind, params.at(g), eps) : z.block(g));
  }
  return GradedVector(z.grading(), std::move(out));
}

}  // namespace graded
