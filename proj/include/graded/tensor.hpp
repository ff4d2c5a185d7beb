#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace graded {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(const std::string& primitive, const std::string& detail)
      : Error(primitive + ": shape mismatch " + detail), primitive_(primitive) {}
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// Sentinel for inadmissible logits; softmax zeroes these entries exactly.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

// Dense row-major matrix of doubles. Rank is fixed at two; a row vector is
// 1 x n and a scalar is 1 x 1. The leading extent is the batch dimension.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (rows == 0 || cols == 0) throw ShapeError("tensor", "(zero extent)");
  }
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0 || data_.size() != rows * cols)
      throw ShapeError("tensor", "(" + std::to_string(rows) + "x" + std::to_string(cols) +
                                     ") vs data length " + std::to_string(data_.size()));
  }

  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor row(std::initializer_list<double> v) {
    return Tensor(1, v.size(), std::vector<double>(v));
  }
  static Tensor row(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(1, n, std::move(v));
  }
  static Tensor column(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(n, 1, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row_span(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * cols_, cols_);
  }
  const std::vector<double>& values() const { return data_; }

  double item() const {
    if (size() != 1) throw ShapeError("item", extents());
    return data_[0];
  }

  std::string extents() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }
  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Tensor& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string extents_pair(const Tensor& a, const Tensor& b) {
  return a.extents() + " vs " + b.extents();
}

// ---------------------------------------------------------------------------
// Eager primitives. The tape reuses these for its forward values.
// ---------------------------------------------------------------------------
namespace ops {

inline void require_same(const char* name, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError(name, extents_pair(a, b));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}

template <class F>
Tensor zip(const char* name, const Tensor& a, const Tensor& b, F f) {
  require_same(name, a, b);
  Tensor out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t k = 0; k < o.size(); ++k) o[k] = f(o[k], bd[k]);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return zip("add", a, b, [](double x, double y) { return x + y; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return zip("sub", a, b, [](double x, double y) { return x - y; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return zip("mul", a, b, [](double x, double y) { return x * y; });
}
inline Tensor scale(const Tensor& a, double c) {
  return map(a, [c](double x) { return c * x; });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", extents_pair(a, b));
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// x W^T for a batch x (B x n) and a weight W (m x n).
inline Tensor apply_linear(const Tensor& x, const Tensor& w) {
  if (x.cols() != w.cols()) throw ShapeError("linear", extents_pair(x, w));
  Tensor out(x.rows(), w.rows());
  for (std::size_t b = 0; b < x.rows(); ++b)
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) s += w(i, j) * x(b, j);
      out(b, i) = s;
    }
  return out;
}

// Repeats a 1 x n row across `rows` batch rows.
inline Tensor broadcast_rows(const Tensor& r, std::size_t rows) {
  if (r.rows() != 1) throw ShapeError("broadcast_rows", r.extents());
  Tensor out(rows, r.cols());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < r.cols(); ++j) out(i, j) = r(0, j);
  return out;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

inline Tensor sum_cols(const Tensor& a) {
  Tensor out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
    out(i, 0) = s;
  }
  return out;
}

inline Tensor mean_rows(const Tensor& a) {
  Tensor out(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  return scale(out, 1.0 / static_cast<double>(a.rows()));
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat", "(no inputs)");
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("concat", extents_pair(parts[0], p));
    cols += p.cols();
  }
  Tensor out(parts[0].rows(), cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (count == 0 || begin + count > a.cols())
    throw ShapeError("slice", a.extents() + " columns [" + std::to_string(begin) + ", " +
                                  std::to_string(begin + count) + ")");
  Tensor out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = a(i, begin + j);
  return out;
}

inline Tensor scale_rows(const Tensor& a, const Tensor& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) throw ShapeError("scale_rows", extents_pair(a, w));
  Tensor out = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) *= w(i, 0);
  return out;
}

// Row-wise log-sum-exp; masked entries contribute exactly zero mass.
inline Tensor logsumexp_rows(const Tensor& x) {
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = kMaskedLogit;
    for (std::size_t j = 0; j < x.cols(); ++j) m = std::max(m, x(i, j));
    if (m == kMaskedLogit) {
      out(i, 0) = kMaskedLogit;
      continue;
    }
    double s = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j)
      if (x(i, j) != kMaskedLogit) s += std::exp(x(i, j) - m);
    out(i, 0) = m + std::log(s);
  }
  return out;
}

// Softmax restricted to the columns listed in `scope` for row i.
inline void softmax_scope(const Tensor& x, Tensor& out, std::size_t i,
                          std::span<const std::size_t> scope) {
  double m = kMaskedLogit;
  for (std::size_t j : scope) m = std::max(m, x(i, j));
  if (m == kMaskedLogit) {
    for (std::size_t j : scope) out(i, j) = 0.0;
    return;
  }
  double s = 0.0;
  for (std::size_t j : scope) {
    const double e = x(i, j) == kMaskedLogit ? 0.0 : std::exp(x(i, j) - m);
    out(i, j) = e;
    s += e;
  }
  for (std::size_t j : scope) out(i, j) = x(i, j) == kMaskedLogit ? 0.0 : out(i, j) / s;
}

inline Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  std::vector<std::size_t> all(x.cols());
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < x.rows(); ++i) softmax_scope(x, out, i, all);
  return out;
}

// Softmax within column groups: group[j] names the scope of column j.
inline Tensor grouped_softmax_rows(const Tensor& x, std::span<const std::size_t> group) {
  if (group.size() != x.cols()) throw ShapeError("grouped_softmax", x.extents());
  std::size_t ngroups = 0;
  for (std::size_t g : group) ngroups = std::max(ngroups, g + 1);
  std::vector<std::vector<std::size_t>> scopes(ngroups);
  for (std::size_t j = 0; j < group.size(); ++j) scopes[group[j]].push_back(j);
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (const auto& s : scopes)
      if (!s.empty()) softmax_scope(x, out, i, s);
  return out;
}

inline Tensor log_softmax_rows(const Tensor& x) {
  const Tensor lse = logsumexp_rows(x);
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) -= lse(i, 0);
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + e^x) without overflow or cancellation.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

// Per-row cross-entropy of logits (B x C) against class indices.
inline Tensor cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> targets) {
  if (targets.size() != logits.rows())
    throw ShapeError("cross_entropy", logits.extents() + " vs " + std::to_string(targets.size()) +
                                          " targets");
  const Tensor lse = logsumexp_rows(logits);
  Tensor out(logits.rows(), 1);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] >= logits.cols())
      throw ShapeError("cross_entropy", "target " + std::to_string(targets[i]) + " outside " +
                                            logits.extents());
    out(i, 0) = lse(i, 0) - logits(i, targets[i]);
  }
  return out;
}

struct NormStats {
  Tensor mean;     // B x 1
  Tensor inv_std;  // B x 1
};

inline NormStats layernorm_stats(const Tensor& x, double eps) {
  NormStats s{Tensor(x.rows(), 1), Tensor(x.rows(), 1)};
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) m += x(i, j);
    m /= n;
    double v = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) v += (x(i, j) - m) * (x(i, j) - m);
    v /= n;
    s.mean(i, 0) = m;
    s.inv_std(i, 0) = 1.0 / std::sqrt(v + eps);
  }
  return s;
}

inline Tensor rmsnorm_inv(const Tensor& x, double eps) {
  Tensor inv(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double q = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) q += x(i, j) * x(i, j);
    inv(i, 0) = 1.0 / std::sqrt(q / static_cast<double>(x.cols()) + eps);
  }
  return inv;
}

inline void check_affine(const char* name, const Tensor& x, const Tensor& gamma) {
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) throw ShapeError(name, extents_pair(x, gamma));
}

inline Tensor layernorm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_affine("layernorm", x, gamma);
  check_affine("layernorm", x, beta);
  const NormStats s = layernorm_stats(x, eps);
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      out(i, j) = gamma(0, j) * (x(i, j) - s.mean(i, 0)) * s.inv_std(i, 0) + beta(0, j);
  return out;
}

inline Tensor rmsnorm_rows(const Tensor& x, const Tensor& gamma, double eps) {
  check_affine("rmsnorm", x, gamma);
  const Tensor inv = rmsnorm_inv(x, eps);
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = gamma(0, j) * x(i, j) * inv(i, 0);
  return out;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

inline double frobenius(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same("dot", a, b);
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace ops

// Named primitive kinds for table-driven evaluation and tests.
enum class Primitive {
  kMatmul,
  kAdd,
  kScale,
  kSoftmax,
  kLogSumExp,
  kTanh,
  kSigmoid,
  kLayerNorm,
  kRmsNorm,
  kCrossEntropy,
  kConcat,
  kSlice,
};

struct PrimitiveArgs {
  double scalar = 1.0;                  // scale factor or norm epsilon
  std::vector<std::size_t> indices;     // targets (cross-entropy) or {begin, count} (slice)
};

inline Tensor eval_primitive(Primitive op, std::span<const Tensor> in, const PrimitiveArgs& args = {}) {
  auto need = [&](std::size_t n, const char* name) {
    if (in.size() != n)
      throw ShapeError(name, "expected " + std::to_string(n) + " inputs, got " +
                                 std::to_string(in.size()));
  };
  switch (op) {
    case Primitive::kMatmul: need(2, "matmul"); return ops::matmul(in[0], in[1]);
    case Primitive::kAdd: need(2, "add"); return ops::add(in[0], in[1]);
    case Primitive::kScale: need(1, "scale"); return ops::scale(in[0], args.scalar);
    case Primitive::kSoftmax: need(1, "softmax"); return ops::softmax_rows(in[0]);
    case Primitive::kLogSumExp: need(1, "logsumexp"); return ops::logsumexp_rows(in[0]);
    case Primitive::kTanh: need(1, "tanh"); return ops::map(in[0], [](double x) { return std::tanh(x); });
    case Primitive::kSigmoid: need(1, "sigmoid"); return ops::map(in[0], ops::sigmoid);
    case Primitive::kLayerNorm: need(3, "layernorm"); return ops::layernorm_rows(in[0], in[1], in[2], args.scalar);
    case Primitive::kRmsNorm: need(2, "rmsnorm"); return ops::rmsnorm_rows(in[0], in[1], args.scalar);
    case Primitive::kCrossEntropy: need(1, "cross_entropy"); return ops::cross_entropy_rows(in[0], args.indices);
    case Primitive::kConcat: return ops::concat_cols(in);
    case Primitive::kSlice:
      need(1, "slice");
      if (args.indices.size() != 2) throw ShapeError("slice", "expects {begin, count}");
      return ops::slice_cols(in[0], args.indices[0], args.indices[1]);
  }
  throw Error("eval_primitive: unknown primitive");
}

}  // namespace graded
