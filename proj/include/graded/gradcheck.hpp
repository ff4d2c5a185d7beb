#pragma once

#include <functional>
#include <vector>

#include "graded/tape.hpp"

namespace graded {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Builds a scalar loss on `tape` from leaves bound to `params` (same order).
using MultiLoss = std::function<Var(Tape&, const std::vector<Var>&)>;

// Compares tape gradients with central differences over every coordinate.
// Error per coordinate is |analytic - numeric| / (|analytic| + eps_abs).
inline GradCheckReport finite_diff_check(const MultiLoss& f, std::vector<Tensor> params, double h,
                                         double eps_abs = 1e-6) {
  auto eval = [&](const std::vector<Tensor>& ps) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : ps) leaves.push_back(tape.leaf(p));
    return f(tape, leaves).value().item();
  };

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  const Gradients grads = tape.backward(f(tape, leaves));

  GradCheckReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = grads[leaves[p]];
    for (std::size_t k = 0; k < params[p].size(); ++k) {
      const double orig = params[p][k];
      params[p][k] = orig + h;
      const double fp = eval(params);
      params[p][k] = orig - h;
      const double fm = eval(params);
      params[p][k] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double err = std::abs(analytic[k] - numeric) / (std::abs(analytic[k]) + eps_abs);
      ++rep.coordinates;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = p;
        rep.worst_index = k;
      }
    }
  }
  return rep;
}

inline double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& theta, double h,
                                double eps_abs = 1e-6) {
  MultiLoss wrapped = [&f](Tape& t, const std::vector<Var>& v) { return f(t, v[0]); };
  return finite_diff_check(wrapped, {theta}, h, eps_abs).max_rel_error;
}

}  // namespace graded
