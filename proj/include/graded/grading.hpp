#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "graded/tensor.hpp"

namespace graded {

class GradingError : public Error {
 public:
  using Error::Error;
};

using Grade = std::size_t;

// Ordered grades with contiguous block layout inside the ambient vector.
class Grading {
 public:
  Grading() = default;
  Grading(std::vector<std::string> labels, std::vector<std::size_t> dims)
      : labels_(std::move(labels)), dims_(std::move(dims)) {
    if (labels_.size() != dims_.size() || labels_.empty())
      throw GradingError("grading: labels and dims must be non-empty and equal length");
    std::set<std::string> seen(labels_.begin(), labels_.end());
    if (seen.size() != labels_.size()) throw GradingError("grading: duplicate grade label");
    std::size_t off = 0;
    for (std::size_t d : dims_) {
      if (d == 0) throw GradingError("grading: zero-dimensional grade");
      offsets_.push_back(off);
      off += d;
    }
    ambient_ = off;
  }

  // |G| grades of common dimension d, labelled "g0", "g1", ...
  static Grading uniform(std::size_t count, std::size_t d) {
    std::vector<std::string> labels;
    for (std::size_t g = 0; g < count; ++g) labels.push_back("g" + std::to_string(g));
    return Grading(std::move(labels), std::vector<std::size_t>(count, d));
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t ambient_dim() const { return ambient_; }
  std::size_t dim(Grade g) const { check(g); return dims_[g]; }
  std::size_t offset(Grade g) const { check(g); return offsets_[g]; }
  const std::string& label(Grade g) const { check(g); return labels_[g]; }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::size_t>& dims() const { return dims_; }

  bool constant_dim() const {
    return std::all_of(dims_.begin(), dims_.end(), [&](std::size_t d) { return d == dims_[0]; });
  }

  Grade index_of(const std::string& label) const {
    for (std::size_t g = 0; g < labels_.size(); ++g)
      if (labels_[g] == label) return g;
    // Integer labels are accepted as raw indices.
    try {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(label, &pos);
      if (pos == label.size() && v < labels_.size()) return v;
    } catch (const std::exception&) {
    }
    throw GradingError("unknown grade '" + label + "'");
  }

  void check(Grade g) const {
    if (g >= labels_.size()) throw GradingError("unknown grade index " + std::to_string(g));
  }

  bool operator==(const Grading&) const = default;

 private:
  std::vector<std::string> labels_;
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> offsets_;
  std::size_t ambient_ = 0;
};

// One (batch x d_g) block per grade.
class GradedVector {
 public:
  GradedVector() = default;
  GradedVector(Grading grading, std::vector<Tensor> blocks) : grading_(std::move(grading)), blocks_(std::move(blocks)) {
    if (blocks_.size() != grading_.size()) throw GradingError("graded vector: block count != |G|");
    for (Grade g = 0; g < blocks_.size(); ++g)
      if (blocks_[g].cols() != grading_.dim(g) || blocks_[g].rows() != blocks_[0].rows())
        throw ShapeError("graded_vector", "grade " + grading_.label(g) + " block " + blocks_[g].extents());
  }

  static GradedVector zeros(const Grading& grading, std::size_t batch) {
    std::vector<Tensor> b;
    for (Grade g = 0; g < grading.size(); ++g) b.emplace_back(batch, grading.dim(g));
    return GradedVector(grading, std::move(b));
  }

  // Splits an ambient (batch x D) tensor along the grading.
  static GradedVector split(const Grading& grading, const Tensor& ambient) {
    if (ambient.cols() != grading.ambient_dim())
      throw ShapeError("split", ambient.extents() + " vs ambient " + std::to_string(grading.ambient_dim()));
    std::vector<Tensor> b;
    for (Grade g = 0; g < grading.size(); ++g)
      b.push_back(ops::slice_cols(ambient, grading.offset(g), grading.dim(g)));
    return GradedVector(grading, std::move(b));
  }

  Tensor assemble() const { return ops::concat_cols(blocks_); }

  const Grading& grading() const { return grading_; }
  std::size_t batch() const { return blocks_.empty() ? 0 : blocks_[0].rows(); }
  const Tensor& block(Grade g) const { grading_.check(g); return blocks_[g]; }
  Tensor& block(Grade g) { grading_.check(g); return blocks_[g]; }
  const std::vector<Tensor>& blocks() const { return blocks_; }

  bool operator==(const GradedVector&) const = default;

 private:
  Grading grading_;
  std::vector<Tensor> blocks_;
};

inline Tensor project(const GradedVector& z, Grade g) { return z.block(g); }

inline Tensor project(const Grading& grading, const Tensor& ambient, Grade g) {
  return GradedVector::split(grading, ambient).block(g);
}

// ι_g: places x in grade g, zero elsewhere.
inline GradedVector include(const Grading& grading, const Tensor& x, Grade g) {
  GradedVector z = GradedVector::zeros(grading, x.rows());
  if (x.cols() != grading.dim(g))
    throw ShapeError("include", x.extents() + " into grade " + grading.label(g));
  z.block(g) = x;
  return z;
}

using Edge = std::pair<Grade, Grade>;  // (source g, target h)

inline std::string edge_name(const Grading& grading, const Edge& e) {
  return grading.label(e.first) + ":" + grading.label(e.second);
}

// Admissible transitions, kept sorted so edge indices are deterministic.
class EdgeSet {
 public:
  EdgeSet() = default;
  explicit EdgeSet(std::vector<Edge> edges) : edges_(std::move(edges)) {
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
  }

  // (g, h) admissible iff h - g ∈ Δ.
  static EdgeSet banded(const Grading& grading, const std::vector<int>& deltas) {
    std::vector<Edge> e;
    const int n = static_cast<int>(grading.size());
    for (int g = 0; g < n; ++g)
      for (int d : deltas)
        if (g + d >= 0 && g + d < n) e.emplace_back(g, g + d);
    EdgeSet s(std::move(e));
    s.band_ = std::set<int>(deltas.begin(), deltas.end());
    return s;
  }

  static EdgeSet complete(const Grading& grading) {
    std::vector<Edge> e;
    for (Grade g = 0; g < grading.size(); ++g)
      for (Grade h = 0; h < grading.size(); ++h) e.emplace_back(g, h);
    return EdgeSet(std::move(e));
  }

  std::size_t size() const { return edges_.size(); }
  bool empty() const { return edges_.empty(); }
  const Edge& operator[](std::size_t i) const { return edges_.at(i); }
  const std::vector<Edge>& edges() const { return edges_; }
  auto begin() const { return edges_.begin(); }
  auto end() const { return edges_.end(); }
  const std::optional<std::set<int>>& band() const { return band_; }

  bool contains(const Edge& e) const { return std::binary_search(edges_.begin(), edges_.end(), e); }
  std::optional<std::size_t> index_of(const Edge& e) const {
    auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
    if (it == edges_.end() || *it != e) return std::nullopt;
    return static_cast<std::size_t>(it - edges_.begin());
  }
  std::vector<std::size_t> incoming(Grade h) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < edges_.size(); ++i)
      if (edges_[i].second == h) out.push_back(i);
    return out;
  }

  bool operator==(const EdgeSet& o) const { return edges_ == o.edges_; }

 private:
  std::vector<Edge> edges_;
  std::optional<std::set<int>> band_;
};

// φ_{h←g}: weight (d_h x d_g), optional bias (1 x d_h).
struct BlockMap {
  Grade source = 0;
  Grade target = 0;
  Tensor weight;
  std::optional<Tensor> bias;

  Edge edge() const { return {source, target}; }
};

inline Tensor apply_block(const BlockMap& phi, const Tensor& x) {
  if (x.cols() != phi.weight.cols()) throw ShapeError("apply_block", extents_pair(x, phi.weight));
  Tensor y = ops::apply_linear(x, phi.weight);
  if (phi.bias) y = ops::add(y, ops::broadcast_rows(*phi.bias, y.rows()));
  return y;
}

inline Tensor apply_block(const BlockMap& phi, const GradedVector& z) { return apply_block(phi, z.block(phi.source)); }

// A layer's worth of blocks keyed by edge.
using BlockSet = std::map<Edge, BlockMap>;

inline BlockSet identity_blocks(const Grading& grading) {
  BlockSet s;
  for (Grade g = 0; g < grading.size(); ++g)
    s[{g, g}] = BlockMap{g, g, Tensor::identity(grading.dim(g)), std::nullopt};
  return s;
}

inline EdgeSet edges_of(const BlockSet& blocks) {
  std::vector<Edge> e;
  for (const auto& [k, v] : blocks) e.push_back(k);
  return EdgeSet(std::move(e));
}

// (ψ∘φ)_{k←g} = Σ_h ψ_{k←h} φ_{h←g}. Linear (bias-free) blocks only.
inline BlockSet compose_blocks(const BlockSet& psi, const BlockSet& phi) {
  BlockSet out;
  for (const auto& [e1, f] : phi) {
    if (f.bias) throw GradingError("compose_blocks: affine blocks do not compose blockwise");
    for (const auto& [e2, p] : psi) {
      if (p.bias) throw GradingError("compose_blocks: affine blocks do not compose blockwise");
      if (e2.first != e1.second) continue;
      const Edge e{e1.first, e2.second};
      Tensor w = ops::matmul(p.weight, f.weight);
      auto it = out.find(e);
      if (it == out.end())
        out[e] = BlockMap{e.first, e.second, std::move(w), std::nullopt};
      else
        it->second.weight = ops::add(it->second.weight, w);
    }
  }
  return out;
}

// Dense (D x D) ambient operator of a block set.
inline Tensor to_dense(const Grading& grading, const BlockSet& blocks) {
  Tensor m(grading.ambient_dim(), grading.ambient_dim());
  for (const auto& [e, b] : blocks) {
    const std::size_t r0 = grading.offset(e.second), c0 = grading.offset(e.first);
    if (b.weight.rows() != grading.dim(e.second) || b.weight.cols() != grading.dim(e.first))
      throw ShapeError("to_dense", b.weight.extents() + " on edge " + edge_name(grading, e));
    for (std::size_t i = 0; i < b.weight.rows(); ++i)
      for (std::size_t j = 0; j < b.weight.cols(); ++j) m(r0 + i, c0 + j) = b.weight(i, j);
  }
  return m;
}

}  // namespace graded
