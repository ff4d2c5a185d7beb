#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include "graded/grading.hpp"
#include "graded/linalg.hpp"
#include "graded/random.hpp"

namespace graded {

using SharedTensor = std::shared_ptr<Tensor>;

inline int increment(const Edge& e) { return static_cast<int>(e.second) - static_cast<int>(e.first); }

// Banded layer whose blocks alias one kernel per increment.
struct LgtLayer {
  Grading grading;
  EdgeSet edges;
  std::map<int, SharedTensor> kernels;

  const Tensor& block(const Edge& e) const {
    if (!edges.contains(e)) throw GradingError("lgt: inadmissible edge " + edge_name(grading, e));
    return *kernels.at(increment(e));
  }

  BlockSet realize() const {
    BlockSet out;
    for (const Edge& e : edges) out[e] = BlockMap{e.first, e.second, block(e), std::nullopt};
    return out;
  }
};

// Every realized shape for increment δ must agree, else the kernel cannot be shared.
inline std::map<int, std::pair<std::size_t, std::size_t>> lgt_kernel_shapes(const Grading& grading,
                                                                           const std::vector<int>& deltas) {
  std::map<int, std::pair<std::size_t, std::size_t>> shapes;
  const int n = static_cast<int>(grading.size());
  for (int d : std::set<int>(deltas.begin(), deltas.end())) {
    bool realized = false;
    for (int g = 0; g < n; ++g) {
      if (g + d < 0 || g + d >= n) continue;
      const std::pair<std::size_t, std::size_t> s{grading.dim(g + d), grading.dim(g)};
      if (realized && shapes[d] != s)
        throw GradingError("lgt: increment " + std::to_string(d) + " spans grades of different shapes");
      shapes[d] = s;
      realized = true;
    }
    if (!realized) throw GradingError("lgt: increment " + std::to_string(d) + " leaves G at every grade");
  }
  return shapes;
}

inline LgtLayer build_banded_lgt(const Grading& grading, const std::vector<int>& deltas, std::uint64_t seed,
                                 double init_scale = 1.0) {
  const auto shapes = lgt_kernel_shapes(grading, deltas);
  LgtLayer layer{grading, EdgeSet::banded(grading, deltas), {}};
  Rng rng(seed);
  for (const auto& [d, s] : shapes)
    layer.kernels[d] = std::make_shared<Tensor>(
        rng.normal_tensor(s.first, s.second, init_scale / std::sqrt(static_cast<double>(s.second))));
  return layer;
}

// Scalar count over the distinct tensors in a list (aliases counted once).
inline std::size_t count_distinct(const std::vector<SharedTensor>& tensors) {
  std::set<const Tensor*> seen;
  std::size_t n = 0;
  for (const auto& t : tensors)
    if (seen.insert(t.get()).second) n += t->size();
  return n;
}

inline std::size_t enumerate_parameters(const LgtLayer& layer) {
  std::vector<SharedTensor> all;
  for (const Edge& e : layer.edges) all.push_back(layer.kernels.at(increment(e)));
  return count_distinct(all);
}

// Σ_δ d_g d_{g+δ} for any g at which both grades exist.
inline std::size_t param_count_lgt(const Grading& grading, const std::vector<int>& deltas) {
  std::size_t n = 0;
  for (const auto& [d, s] : lgt_kernel_shapes(grading, deltas)) n += s.first * s.second;
  return n;
}

// H (2 d d_q + 2 |Δ| d²).
inline std::size_t param_count_attention(std::size_t heads, std::size_t d, std::size_t d_q, std::size_t n_deltas) {
  return heads * (2 * d * d_q + 2 * n_deltas * d * d);
}

// 2 d Σ_δ m_δ.
inline std::size_t param_count_ffn(std::size_t d, const std::vector<std::size_t>& widths) {
  std::size_t m = 0;
  for (std::size_t w : widths) m += w;
  return 2 * d * m;
}

// ---------------------------------------------------------------------------
// Exponential-in-grade reweighting.
// ---------------------------------------------------------------------------
struct EgtReweighting {
  std::vector<Tensor> scalings;  // D_g, one per grade
  Tensor ratio;                  // R with D_{g+1} = R D_g
  bool diagonal = false;

  // D_g = R^g D_0.
  static EgtReweighting from_ratio(const Tensor& ratio, const Tensor& base, std::size_t grades) {
    if (ratio.rows() != ratio.cols() || !ratio.same_shape(base))
      throw ShapeError("egt", extents_pair(ratio, base));
    EgtReweighting r;
    r.ratio = ratio;
    Tensor d = base;
    for (std::size_t g = 0; g < grades; ++g) {
      r.scalings.push_back(d);
      d = ops::matmul(ratio, d);
    }
    r.diagonal = is_diagonal(ratio) && is_diagonal(base);
    r.validate();
    if (r.ratio_residual() > 1e-10) throw GradingError("egt: ratio law violated on construction");
    return r;
  }

  static bool is_diagonal(const Tensor& m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j)
        if (i != j && m(i, j) != 0.0) return false;
    return true;
  }

  void validate() const {
    for (std::size_t g = 0; g < scalings.size(); ++g) {
      Eigen::FullPivLU<Matrix> lu(to_eigen(scalings[g]));
      if (!lu.isInvertible()) throw GradingError("egt: D_" + std::to_string(g) + " is singular");
    }
  }

  // max_g |D_{g+1} - R D_g| relative to |D_{g+1}|.
  double ratio_residual() const {
    double r = 0.0;
    for (std::size_t g = 0; g + 1 < scalings.size(); ++g) {
      const Tensor pred = ops::matmul(ratio, scalings[g]);
      r = std::max(r, ops::max_abs_diff(pred, scalings[g + 1]) / std::max(1.0, ops::max_abs(scalings[g + 1])));
    }
    return r;
  }

  Tensor inverse(Grade g) const {
    if (diagonal) {
      Tensor inv(scalings[g].rows(), scalings[g].cols());
      for (std::size_t i = 0; i < inv.rows(); ++i) inv(i, i) = 1.0 / scalings[g](i, i);
      return inv;
    }
    return from_eigen(to_eigen(scalings[g]).inverse());
  }

  static EgtReweighting identity(const Grading& grading) {
    EgtReweighting r;
    for (Grade g = 0; g < grading.size(); ++g) r.scalings.push_back(Tensor::identity(grading.dim(g)));
    r.ratio = Tensor::identity(grading.dim(0));
    r.diagonal = true;
    return r;
  }
};

enum class ConjugateDirection { kToLgt, kFromLgt };

// to-lgt: D_h^{-1} Φ D_g.  from-lgt: D_h Φ D_g^{-1}.
inline BlockSet egt_conjugate(const BlockSet& blocks, const EgtReweighting& d, ConjugateDirection dir) {
  d.validate();
  BlockSet out;
  for (const auto& [e, b] : blocks) {
    const Tensor left = dir == ConjugateDirection::kToLgt ? d.inverse(e.second) : d.scalings.at(e.second);
    const Tensor right = dir == ConjugateDirection::kToLgt ? d.scalings.at(e.first) : d.inverse(e.first);
    BlockMap nb{e.first, e.second, ops::matmul(left, ops::matmul(b.weight, right)), std::nullopt};
    if (b.bias) nb.bias = ops::transpose(ops::matmul(left, ops::transpose(*b.bias)));
    out[e] = std::move(nb);
  }
  return out;
}

inline Tensor block_diagonal(const std::vector<Tensor>& blocks) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.rows();
  Tensor m(n, n);
  std::size_t off = 0;
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) m(off + i, off + j) = b(i, j);
    off += b.rows();
  }
  return m;
}

// Readout transport R ↦ R·D, so that (R D)(D^{-1} z) = R z.
inline Tensor transport_readout(const Tensor& readout, const EgtReweighting& d) {
  return ops::matmul(readout, block_diagonal(d.scalings));
}

// z ↦ D^{-1} z (to-lgt) or D z (from-lgt), blockwise on a batch.
inline GradedVector conjugate_state(const GradedVector& z, const EgtReweighting& d, ConjugateDirection dir) {
  std::vector<Tensor> out;
  for (Grade g = 0; g < z.grading().size(); ++g) {
    const Tensor m = dir == ConjugateDirection::kToLgt ? d.inverse(g) : d.scalings.at(g);
    out.push_back(ops::apply_linear(z.block(g), m));
  }
  return GradedVector(z.grading(), std::move(out));
}

// EGT layer stored as its LGT conjugate plus the fixed reweighting.
struct EgtLayer {
  LgtLayer conjugate;
  EgtReweighting reweighting;

  BlockSet realize() const {
    return egt_conjugate(conjugate.realize(), reweighting, ConjugateDirection::kFromLgt);
  }
};

// Free parameters are the shared kernels; D is fixed per layer.
inline std::size_t enumerate_parameters(const EgtLayer& layer) { return enumerate_parameters(layer.conjugate); }

// ---------------------------------------------------------------------------
// Graded attention and feed-forward blocks under LGT sharing.
// ---------------------------------------------------------------------------
struct AttentionHead {
  SharedTensor query;                    // d_q x d, shared across grades
  SharedTensor key;                      // d_q x d, shared across grades
  std::map<int, SharedTensor> value;     // δ -> d x d
  std::map<int, SharedTensor> output;    // δ -> d x d
};

struct GradedAttention {
  Grading grading;
  EdgeSet edges;
  std::vector<AttentionHead> heads;
  std::size_t d_q = 0;

  std::vector<SharedTensor> all_tensors() const {
    std::vector<SharedTensor> t;
    for (const auto& h : heads) {
      t.push_back(h.query);
      t.push_back(h.key);
      for (const Edge& e : edges) {
        t.push_back(h.value.at(increment(e)));
        t.push_back(h.output.at(increment(e)));
      }
    }
    return t;
  }
};

inline GradedAttention build_lgt_attention(const Grading& grading, const std::vector<int>& deltas,
                                           std::size_t heads, std::size_t d_q, std::uint64_t seed) {
  if (!grading.constant_dim()) throw GradingError("attention: LGT sharing requires constant grade dimension");
  lgt_kernel_shapes(grading, deltas);
  const std::size_t d = grading.dim(0);
  Rng rng(seed);
  GradedAttention att{grading, EdgeSet::banded(grading, deltas), {}, d_q};
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t a = 0; a < heads; ++a) {
    AttentionHead h;
    h.query = std::make_shared<Tensor>(rng.normal_tensor(d_q, d, sd));
    h.key = std::make_shared<Tensor>(rng.normal_tensor(d_q, d, sd));
    for (int dl : std::set<int>(deltas.begin(), deltas.end())) {
      h.value[dl] = std::make_shared<Tensor>(rng.normal_tensor(d, d, sd));
      h.output[dl] = std::make_shared<Tensor>(rng.normal_tensor(d, d, sd));
    }
    att.heads.push_back(std::move(h));
  }
  return att;
}

inline std::size_t enumerate_parameters(const GradedAttention& att) { return count_distinct(att.all_tensors()); }

// Causal graded attention over one sequence (rows = positions). For each edge
// (g, h), queries come from grade h at t, keys and values from grade g at s ≤ t,
// and the output is written only into grade h.
inline GradedVector attention_forward(const GradedAttention& att, const GradedVector& seq) {
  const std::size_t T = seq.batch();
  GradedVector out = GradedVector::zeros(att.grading, T);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(att.d_q));
  for (const Edge& e : att.edges) {
    const int dl = increment(e);
    for (const auto& head : att.heads) {
      const Tensor q = ops::apply_linear(seq.block(e.second), *head.query);
      const Tensor k = ops::apply_linear(seq.block(e.first), *head.key);
      const Tensor v = ops::apply_linear(ops::apply_linear(seq.block(e.first), *head.value.at(dl)), *head.output.at(dl));
      Tensor scores(T, T, kMaskedLogit);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t s = 0; s <= t; ++s) {
          double acc = 0.0;
          for (std::size_t j = 0; j < att.d_q; ++j) acc += q(t, j) * k(s, j);
          scores(t, s) = inv_sqrt * acc;
        }
      const Tensor w = ops::softmax_rows(scores);
      out.block(e.second) = ops::add(out.block(e.second), ops::matmul(w, v));
    }
  }
  return out;
}

enum class Activation { kTanh, kRelu, kGelu };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::kTanh: return std::tanh(x);
    case Activation::kRelu: return x > 0 ? x : 0.0;
    case Activation::kGelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  }
  return x;
}

struct GradedFfn {
  Grading grading;
  EdgeSet edges;
  std::map<int, SharedTensor> w1;  // δ -> m_δ x d
  std::map<int, SharedTensor> w2;  // δ -> d x m_δ
  Activation activation = Activation::kGelu;

  std::vector<SharedTensor> all_tensors() const {
    std::vector<SharedTensor> t;
    for (const Edge& e : edges) {
      t.push_back(w1.at(increment(e)));
      t.push_back(w2.at(increment(e)));
    }
    return t;
  }
};

inline GradedFfn build_lgt_ffn(const Grading& grading, const std::vector<int>& deltas,
                               const std::vector<std::size_t>& widths, std::uint64_t seed,
                               Activation act = Activation::kGelu) {
  if (!grading.constant_dim()) throw GradingError("ffn: LGT sharing requires constant grade dimension");
  const std::set<int> uniq(deltas.begin(), deltas.end());
  if (uniq.size() != widths.size()) throw GradingError("ffn: one hidden width per increment required");
  lgt_kernel_shapes(grading, deltas);
  const std::size_t d = grading.dim(0);
  Rng rng(seed);
  GradedFfn f{grading, EdgeSet::banded(grading, deltas), {}, {}, act};
  std::size_t k = 0;
  for (int dl : uniq) {
    const std::size_t m = widths[k++];
    f.w1[dl] = std::make_shared<Tensor>(rng.normal_tensor(m, d, 1.0 / std::sqrt(static_cast<double>(d))));
    f.w2[dl] = std::make_shared<Tensor>(rng.normal_tensor(d, m, 1.0 / std::sqrt(static_cast<double>(m))));
  }
  return f;
}

inline std::size_t enumerate_parameters(const GradedFfn& f) { return count_distinct(f.all_tensors()); }

inline GradedVector ffn_forward(const GradedFfn& f, const GradedVector& z) {
  GradedVector out = GradedVector::zeros(f.grading, z.batch());
  for (const Edge& e : f.edges) {
    const int dl = increment(e);
    Tensor hidden = ops::apply_linear(z.block(e.first), *f.w1.at(dl));
    hidden = ops::map(hidden, [&](double x) { return activate(f.activation, x); });
    out.block(e.second) = ops::add(out.block(e.second), ops::apply_linear(hidden, *f.w2.at(dl)));
  }
  return out;
}

}  // namespace graded
