#pragma once

#include <Eigen/Dense>

#include "graded/tensor.hpp"

namespace graded {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline Matrix to_eigen(const Tensor& t) {
  Matrix m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(i, j) = t(i, j);
  return m;
}

inline Tensor from_eigen(const Matrix& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t(i, j) = m(i, j);
  return t;
}

inline Tensor from_eigen_row(const Vector& v) {
  Tensor t(1, static_cast<std::size_t>(v.size()));
  for (Eigen::Index j = 0; j < v.size(); ++j) t(0, j) = v(j);
  return t;
}

inline Vector row_to_eigen(const Tensor& t, std::size_t row = 0) {
  Vector v(t.cols());
  for (std::size_t j = 0; j < t.cols(); ++j) v(j) = t(row, j);
  return v;
}

inline double condition_number_spd(const Matrix& a) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(a);
  const auto& ev = es.eigenvalues();
  if (ev.minCoeff() <= 0.0) return std::numeric_limits<double>::infinity();
  return ev.maxCoeff() / ev.minCoeff();
}

}  // namespace graded
