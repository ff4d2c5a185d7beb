// Builds the two-step mod-p program sem -> num -> sem by hand, checks that it
// realizes the shift P_a, and prints the loss before and after the update.

#include <cmath>
#include <iostream>

#include "graded/graded.hpp"

int main() {
  using namespace graded;
  const std::size_t p = 7, a = 3;
  const double s = 5.0;

  const Grading g({"sem", "num"}, {p, p});
  const MorphicProgram prog{g, {BlockMap{0, 1, modp_shift_matrix(p, a), std::nullopt},
                                BlockMap{1, 0, Tensor::identity(p), std::nullopt}}};
  const Tensor composite = program_composite(prog);
  const double err = ops::max_abs_diff(composite, modp_shift_matrix(p, a));
  std::cout << "composite vs P_a max error: " << err << '\n';

  for (std::size_t d = 0; d < p; ++d) {
    Tensor x(1, p);
    x(0, d) = 1.0;
    const Tensor y = apply_program(prog, x);
    std::size_t arg = 0;
    for (std::size_t j = 1; j < p; ++j)
      if (y(0, j) > y(0, arg)) arg = j;
    std::cout << d << " + " << a << " = " << arg << " (mod " << p << ")\n";
  }

  const ModPUtility u = modp_exact_utility(p, a, s);
  std::cout << "loss before " << u.pre << ", after " << u.post << ", utility " << u.utility << '\n';
  std::cout << "closed form log(1+(p-1)e^-s) = " << std::log1p(static_cast<double>(p - 1) * std::exp(-s)) << '\n';
  return err == 0.0 ? 0 : 1;
}
