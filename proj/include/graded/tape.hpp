#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "graded/tensor.hpp"

namespace graded {

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> g) : grads_(std::move(g)) {}
  const Tensor& operator[](Var v) const { return grads_.at(v.id); }

 private:
  std::vector<Tensor> grads_;
};

// Records primitive applications in topological order and replays their
// adjoints in reverse. Single-threaded by construction.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Records an op whose inputs are `inputs`. `bw` receives the output cotangent
  // and must call accumulate() for each differentiable input.
  Var record(Tensor value, std::vector<std::size_t> inputs, Backward bw) {
    bool rg = false;
    for (std::size_t i : inputs) rg = rg || nodes_.at(i).requires_grad;
    return push(std::move(value), std::move(inputs), rg ? std::move(bw) : nullptr, rg);
  }

  void accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& slot = work_[id];
    if (slot.empty()) {
      slot = g;
    } else {
      if (!slot.same_shape(g)) throw ShapeError("backward", extents_pair(slot, g));
      for (std::size_t k = 0; k < g.size(); ++k) slot[k] += g[k];
    }
  }

  Gradients backward(Var loss) {
    if (loss.tape != this) throw Error("backward: variable belongs to another tape");
    if (value(loss.id).size() != 1)
      throw ShapeError("backward", "loss must be scalar, got " + value(loss.id).extents());
    work_.assign(nodes_.size(), Tensor{});
    work_[loss.id] = Tensor::scalar(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      if (work_[i].empty() || !nodes_[i].backward) continue;
      const Tensor g = work_[i];
      nodes_[i].backward(*this, g);
    }
    std::vector<Tensor> out(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].is_leaf && nodes_[i].requires_grad)
        out[i] = work_[i].empty() ? Tensor(nodes_[i].value.rows(), nodes_[i].value.cols()) : work_[i];
    }
    work_.clear();
    return Gradients(std::move(out));
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Backward backward;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, Backward bw, bool rg) {
    const bool leaf = inputs.empty();
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(bw), rg, leaf});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> work_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Differentiable operations.
// ---------------------------------------------------------------------------
namespace ad {

inline Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
  return *a.tape;
}

inline Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(ops::add(a.value(), b.value()), {a.id, b.id}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(ops::sub(a.value(), b.value()), {a.id, b.id}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, ops::scale(g, -1.0));
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(ops::mul(a.value(), b.value()), {a.id, b.id}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a.id, ops::mul(g, t.value(b.id)));
    t.accumulate(b.id, ops::mul(g, t.value(a.id)));
  });
}

inline Var scale(Var a, double c) {
  return a.tape->record(ops::scale(a.value(), c), {a.id},
                        [a, c](Tape& t, const Tensor& g) { t.accumulate(a.id, ops::scale(g, c)); });
}

inline Var add_constant(Var a, double c) {
  return a.tape->record(ops::map(a.value(), [c](double x) { return x + c; }), {a.id},
                        [a](Tape& t, const Tensor& g) { t.accumulate(a.id, g); });
}

inline Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record(ops::matmul(a.value(), b.value()), {a.id, b.id}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, ops::matmul(g, ops::transpose(t.value(b.id))));
    if (t.requires_grad(b.id)) t.accumulate(b.id, ops::matmul(ops::transpose(t.value(a.id)), g));
  });
}

// Batch x (B x n) through weight w (m x n): x w^T.
inline Var linear(Var x, Var w) {
  Tape& t = tape_of(x, w);
  return t.record(ops::apply_linear(x.value(), w.value()), {x.id, w.id},
                  [x, w](Tape& t, const Tensor& g) {
                    if (t.requires_grad(x.id)) t.accumulate(x.id, ops::matmul(g, t.value(w.id)));
                    if (t.requires_grad(w.id))
                      t.accumulate(w.id, ops::matmul(ops::transpose(g), t.value(x.id)));
                  });
}

inline Var transpose(Var a) {
  return a.tape->record(ops::transpose(a.value()), {a.id},
                        [a](Tape& t, const Tensor& g) { t.accumulate(a.id, ops::transpose(g)); });
}

inline Var broadcast_rows(Var r, std::size_t rows) {
  return r.tape->record(ops::broadcast_rows(r.value(), rows), {r.id},
                        [r](Tape& t, const Tensor& g) { t.accumulate(r.id, ops::scale(ops::mean_rows(g), static_cast<double>(g.rows()))); });
}

inline Var sum(Var a) {
  return a.tape->record(Tensor::scalar(ops::sum(a.value())), {a.id}, [a](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(a.id);
    t.accumulate(a.id, Tensor(v.rows(), v.cols(), g.item()));
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

inline Var sum_cols(Var a) {
  return a.tape->record(ops::sum_cols(a.value()), {a.id}, [a](Tape& t, const Tensor& g) {
    const Tensor& v = t.value(a.id);
    Tensor d(v.rows(), v.cols());
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) d(i, j) = g(i, 0);
    t.accumulate(a.id, d);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat", "(no inputs)");
  std::vector<Tensor> vals;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    tape_of(parts[0], p);
    vals.push_back(p.value());
    ids.push_back(p.id);
  }
  std::vector<std::size_t> widths;
  for (const auto& v : vals) widths.push_back(v.cols());
  return parts[0].tape->record(ops::concat_cols(vals), ids, [ids, widths](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) t.accumulate(ids[k], ops::slice_cols(g, off, widths[k]));
      off += widths[k];
    }
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  return a.tape->record(ops::slice_cols(a.value(), begin, count), {a.id},
                        [a, begin](Tape& t, const Tensor& g) {
                          const Tensor& v = t.value(a.id);
                          Tensor d(v.rows(), v.cols());
                          for (std::size_t i = 0; i < g.rows(); ++i)
                            for (std::size_t j = 0; j < g.cols(); ++j) d(i, begin + j) = g(i, j);
                          t.accumulate(a.id, d);
                        });
}

// Multiplies row i of a by the scalar w(i, 0).
inline Var scale_rows(Var a, Var w) {
  Tape& t = tape_of(a, w);
  return t.record(ops::scale_rows(a.value(), w.value()), {a.id, w.id}, [a, w](Tape& t, const Tensor& g) {
    if (t.requires_grad(a.id)) t.accumulate(a.id, ops::scale_rows(g, t.value(w.id)));
    if (t.requires_grad(w.id)) t.accumulate(w.id, ops::sum_cols(ops::mul(g, t.value(a.id))));
  });
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
  Tensor out = ops::map(a.value(), f);
  return a.tape->record(std::move(out), {a.id}, [a, df](Tape& t, const Tensor& g) {
    Tensor d = ops::map(t.value(a.id), df);
    t.accumulate(a.id, ops::mul(g, d));
  });
}

inline Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}
inline Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}
inline Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double x) { const double y = std::tanh(x); return 1.0 - y * y; });
}
inline Var sigmoid(Var a) {
  return unary(a, ops::sigmoid, [](double x) { const double s = ops::sigmoid(x); return s * (1.0 - s); });
}
inline Var softplus(Var a) { return unary(a, ops::softplus, ops::sigmoid); }
inline Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}
// x log x with the 0 log 0 = 0 convention; the derivative at 0 is taken as 0.
inline Var xlogx(Var a) {
  return unary(a, ops::xlogx, [](double x) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}
inline Var sqrt(Var a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

inline Var detach(Var a) { return a.tape->constant(a.value()); }

namespace detail {
inline Tensor softmax_backward(const Tensor& y, const Tensor& g, std::span<const std::size_t> group) {
  Tensor d(y.rows(), y.cols());
  std::size_t ngroups = 0;
  for (std::size_t k : group) ngroups = std::max(ngroups, k + 1);
  std::vector<double> dotg(ngroups);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    std::fill(dotg.begin(), dotg.end(), 0.0);
    for (std::size_t j = 0; j < y.cols(); ++j) dotg[group[j]] += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) d(i, j) = y(i, j) * (g(i, j) - dotg[group[j]]);
  }
  return d;
}
}  // namespace detail

inline Var grouped_softmax_rows(Var x, std::vector<std::size_t> group) {
  Tensor y = ops::grouped_softmax_rows(x.value(), group);
  const std::size_t out_id = x.tape->size();
  return x.tape->record(std::move(y), {x.id}, [x, group, out_id](Tape& t, const Tensor& g) {
    t.accumulate(x.id, detail::softmax_backward(t.value(out_id), g, group));
  });
}

inline Var softmax_rows(Var x) {
  return grouped_softmax_rows(x, std::vector<std::size_t>(x.value().cols(), 0));
}

inline Var logsumexp_rows(Var x) {
  return x.tape->record(ops::logsumexp_rows(x.value()), {x.id}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x.id, ops::scale_rows(ops::softmax_rows(t.value(x.id)), g));
  });
}

// Per-row cross-entropy, shape (B x 1).
inline Var cross_entropy_rows(Var logits, std::vector<std::size_t> targets) {
  Tensor out = ops::cross_entropy_rows(logits.value(), targets);
  return logits.tape->record(std::move(out), {logits.id}, [logits, targets](Tape& t, const Tensor& g) {
    Tensor p = ops::softmax_rows(t.value(logits.id));
    for (std::size_t i = 0; i < p.rows(); ++i) p(i, targets[i]) -= 1.0;
    t.accumulate(logits.id, ops::scale_rows(p, g));
  });
}

inline Var layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  Tensor y = ops::layernorm_rows(x.value(), gamma.value(), beta.value(), eps);
  return t.record(std::move(y), {x.id, gamma.id, beta.id}, [x, gamma, beta, eps](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    const Tensor& gv = t.value(gamma.id);
    const auto s = ops::layernorm_stats(xv, eps);
    const std::size_t n = xv.cols();
    Tensor dx(xv.rows(), n), dgamma(1, n), dbeta(1, n);
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = (xv(i, j) - s.mean(i, 0)) * s.inv_std(i, 0);
        dxhat[j] = g(i, j) * gv(0, j);
        dgamma(0, j) += g(i, j) * xhat[j];
        dbeta(0, j) += g(i, j);
        sum_d += dxhat[j];
        sum_dx += dxhat[j] * xhat[j];
      }
      const double nn = static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        dx(i, j) = s.inv_std(i, 0) / nn * (nn * dxhat[j] - sum_d - xhat[j] * sum_dx);
    }
    t.accumulate(x.id, dx);
    t.accumulate(gamma.id, dgamma);
    t.accumulate(beta.id, dbeta);
  });
}

inline Var rmsnorm_rows(Var x, Var gamma, double eps) {
  Tape& t = tape_of(x, gamma);
  Tensor y = ops::rmsnorm_rows(x.value(), gamma.value(), eps);
  return t.record(std::move(y), {x.id, gamma.id}, [x, gamma, eps](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x.id);
    const Tensor& gv = t.value(gamma.id);
    const Tensor inv = ops::rmsnorm_inv(xv, eps);
    const std::size_t n = xv.cols();
    Tensor dx(xv.rows(), n), dgamma(1, n);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
      double proj = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        proj += g(i, j) * gv(0, j) * xv(i, j);
        dgamma(0, j) += g(i, j) * xv(i, j) * inv(i, 0);
      }
      const double r3 = inv(i, 0) * inv(i, 0) * inv(i, 0) / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j)
        dx(i, j) = inv(i, 0) * g(i, j) * gv(0, j) - xv(i, j) * r3 * proj;
    }
    t.accumulate(x.id, dx);
    t.accumulate(gamma.id, dgamma);
  });
}

// Row-wise inner product of two (B x n) variables, shape (B x 1).
inline Var row_dot(Var a, Var b) { return sum_cols(mul(a, b)); }

}  // namespace ad
}  // namespace graded
