#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "graded/lgt.hpp"
#include "graded/random.hpp"
#include "graded/routing.hpp"
#include "graded/tape.hpp"

namespace graded {

enum class ParamRole { kBlock, kRouter, kNorm, kThreshold, kReadout, kConstant };

struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;
  ParamRole role = ParamRole::kBlock;
};

// Named parameters in insertion order; the order fixes serialization and the
// optimizer's iteration order.
class ParameterStore {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable, ParamRole role) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_[name] = params_.size();
    params_.push_back(Param{std::move(name), std::move(value), trainable, role});
    return params_.size() - 1;
  }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Param& at(const std::string& name) { return params_[index(name)]; }
  const Param& at(const std::string& name) const { return params_[index(name)]; }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

// A readout-grade retrieval block: r = softmax(M W_q z^(g) / σ²), written into V_h = ℝ^k.
struct RetrievalBlockSpec {
  Tensor keys;  // k x d_key, rows are keys
  double sigma2 = 0.5;
  std::size_t key_dim() const { return keys.cols(); }
};

struct ModelSpec {
  Grading grading;
  std::size_t layers = 2;
  EdgeSet edges;
  bool lgt_sharing = false;
  bool block_bias = false;
  NormKind norm = NormKind::kLayerNorm;
  double norm_eps = 1e-5;
  std::size_t classes = 2;
  RoutingConfig routing;
  double initial_threshold = 0.0;
  double block_init_scale = 1.0;
  double router_init_scale = 0.02;
  std::map<Edge, RetrievalBlockSpec> retrieval;
};

struct Batch {
  GradedVector inputs;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> sequence;  // sequence id per token; contiguous, ordered

  std::size_t size() const { return targets.size(); }
};

struct ForwardOptions {
  // Per layer (B x |E|) values substituted for the detached utilities inside
  // the routing logits. Holding them fixed makes the stop-gradient exact under
  // finite differences.
  const std::vector<Tensor>* frozen_utilities = nullptr;
  std::vector<std::vector<bool>> ablated;  // per layer, per edge: α ≡ 0
  std::optional<GateKind> gate_override;
  bool zero_gates = false;
  std::optional<std::size_t> forced_edge;  // one-hot gate on this edge in every layer
};

struct LayerRecord {
  Var logits;     // ℓ, B x |E|
  Var utility;    // ΔL with gradient, B x |E|
  Tensor utility_in_logits;
  Var augmented;  // ℓ̃, B x |E|
  Var alpha;      // gates, B x |E|
  Var thresholds; // 1 x |E|
};

struct ForwardResult {
  std::vector<Var> state;        // final grade blocks
  Var logits;                    // B x C
  Var token_loss;                // B x 1
  Var lm_loss;                   // scalar mean
  std::vector<LayerRecord> layers;
};

enum class BlockKind { kLinear, kRetrieval };

struct KernelRef {
  BlockKind kind = BlockKind::kLinear;
  std::string weight;  // linear weight, or retrieval query projection
  std::string bias;    // empty when absent
  std::string keys;    // retrieval only
  double sigma2 = 1.0;
};

class GradedModel {
 public:
  GradedModel() = default;
  GradedModel(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.routing.validate();
    if (spec_.edges.empty()) throw GradingError("model: empty edge set");
    if (spec_.layers == 0) throw Error("model: at least one layer required");
    build(seed);
  }

  // Rebuilds a model around stored parameters; every parameter the spec
  // implies must be present with its construction shape.
  static GradedModel restore(ModelSpec spec, const ParameterStore& stored) {
    GradedModel m(spec, 0);
    for (auto& p : m.params_) {
      if (!stored.contains(p.name)) throw Error("restore: missing parameter '" + p.name + "'");
      const Param& s = stored.at(p.name);
      if (!s.value.same_shape(p.value)) throw ShapeError("restore", p.name + " " + extents_pair(p.value, s.value));
      p.value = s.value;
      p.trainable = s.trainable;
    }
    if (stored.size() != m.params_.size()) throw Error("restore: stored parameters do not match the spec");
    return m;
  }

  const ModelSpec& spec() const { return spec_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const Grading& grading() const { return spec_.grading; }
  const EdgeSet& edges() const { return spec_.edges; }
  std::size_t layers() const { return spec_.layers; }

  const KernelRef& kernel(std::size_t layer, std::size_t edge) const { return kernels_.at(layer).at(edge_kernel_.at(layer).at(edge)); }

  static std::string prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }
  std::string threshold_name(std::size_t l) const { return prefix(l) + "tau"; }

  // Overwrites the block of (layer, edge) and optionally freezes it. With LGT
  // sharing this writes the shared kernel.
  void set_block(std::size_t layer, const Edge& e, const Tensor& w, bool frozen) {
    const auto k = spec_.edges.index_of(e);
    if (!k) throw GradingError("set_block: inadmissible edge " + edge_name(grading(), e));
    Param& p = params_.at(kernel(layer, *k).weight);
    if (!p.value.same_shape(w)) throw ShapeError("set_block", extents_pair(p.value, w));
    p.value = w;
    if (frozen) p.trainable = false;
  }

  void set_readout(const Tensor& w, const Tensor& b, bool trainable) {
    Param& pw = params_.at("readout.weight");
    Param& pb = params_.at("readout.bias");
    if (!pw.value.same_shape(w) || !pb.value.same_shape(b)) throw ShapeError("set_readout", extents_pair(pw.value, w));
    pw.value = w;
    pb.value = b;
    pw.trainable = pb.trainable = trainable;
  }

  std::vector<Var> bind(Tape& tape) const {
    std::vector<Var> v;
    for (const auto& p : params_) v.push_back(p.trainable ? tape.leaf(p.value) : tape.constant(p.value));
    return v;
  }

  Var readout(const std::vector<Var>& vars, const std::vector<Var>& z) const {
    const Var x = ad::concat_cols(z);
    const Var w = vars[params_.index("readout.weight")];
    const Var b = vars[params_.index("readout.bias")];
    return ad::add(ad::linear(x, w), ad::broadcast_rows(b, x.rows()));
  }

  Var token_loss(const std::vector<Var>& vars, const std::vector<Var>& z, const Batch& batch) const {
    return ad::cross_entropy_rows(readout(vars, z), batch.targets);
  }

  Var apply_kernel(const std::vector<Var>& vars, std::size_t layer, std::size_t edge, Var x) const {
    const KernelRef& k = kernel(layer, edge);
    const Var w = vars[params_.index(k.weight)];
    if (k.kind == BlockKind::kRetrieval) {
      const Var keys = vars[params_.index(k.keys)];
      const Var q = ad::linear(x, w);
      return ad::softmax_rows(ad::scale(ad::linear(q, keys), 1.0 / k.sigma2));
    }
    Var y = ad::linear(x, w);
    if (!k.bias.empty()) y = ad::add(y, ad::broadcast_rows(vars[params_.index(k.bias)], y.rows()));
    return y;
  }

  ForwardResult forward(Tape& tape, const std::vector<Var>& vars, const Batch& batch,
                        const ForwardOptions& opt = {}) const {
    if (batch.inputs.grading() != grading()) throw GradingError("forward: batch grading differs from model grading");
    if (batch.sequence.size() != batch.size() || batch.inputs.batch() != batch.size())
      throw ShapeError("forward", "batch fields disagree on token count");
    const std::size_t B = batch.size();
    const std::size_t E = edges().size();
    const Grading& G = grading();

    std::vector<Var> z;
    for (Grade g = 0; g < G.size(); ++g) z.push_back(tape.constant(batch.inputs.block(g)));
    const Var pool = tape.constant(prefix_mean_matrix(batch.sequence));

    ForwardResult res;
    for (std::size_t l = 0; l < spec_.layers; ++l) {
      const std::string p = prefix(l);
      // Router features.
      const Var ctx = ad::matmul(pool, ad::concat_cols(z));
      const Var u = ad::linear(ctx, vars[params_.index(p + "router.context")]);
      std::vector<Var> v;
      for (Grade g = 0; g < G.size(); ++g) v.push_back(ad::linear(z[g], vars[params_.index(p + "router.value." + std::to_string(g))]));

      const Var base = token_loss(vars, z, batch);
      std::vector<Var> logit_cols, util_cols, deltas;
      for (std::size_t k = 0; k < E; ++k) {
        const Edge& e = edges()[k];
        const Var phi = apply_kernel(vars, l, k, z[e.first]);
        const bool add = spec_.routing.mode == UpdateMode::kResidual && e.first != e.second;
        const Var target = add ? ad::add(z[e.second], phi) : phi;
        deltas.push_back(add ? phi : ad::sub(phi, z[e.second]));
        std::vector<Var> zp = z;
        zp[e.second] = target;
        util_cols.push_back(ad::sub(base, token_loss(vars, zp, batch)));
        const Var uw = ad::matmul(u, vars[params_.index(p + "router.bilinear." + std::to_string(k))]);
        logit_cols.push_back(ad::row_dot(uw, v[e.first]));
      }
      LayerRecord rec;
      rec.logits = ad::concat_cols(logit_cols);
      rec.utility = ad::concat_cols(util_cols);
      rec.thresholds = vars[params_.index(threshold_name(l))];
      if (!rec.utility.value().all_finite()) throw NonFiniteError("forward: non-finite utility in layer " + std::to_string(l));

      Var aug = rec.logits;
      if (spec_.routing.utility_in_logits) {
        const Var held = opt.frozen_utilities ? tape.constant(opt.frozen_utilities->at(l)) : ad::detach(rec.utility);
        rec.utility_in_logits = held.value();
        const Var shift = ad::sub(held, ad::broadcast_rows(rec.thresholds, B));
        aug = ad::add(aug, ad::scale(shift, spec_.routing.beta));
      } else {
        rec.utility_in_logits = rec.utility.value();
      }
      rec.augmented = aug;

      const GateKind kind = opt.gate_override.value_or(spec_.routing.gate);
      const Var scaled = ad::scale(aug, 1.0 / spec_.routing.temperature);
      Var alpha;
      switch (kind) {
        case GateKind::kSoftmaxGlobal: alpha = ad::softmax_rows(scaled); break;
        case GateKind::kSoftmaxPerDestination: {
          std::vector<std::size_t> groups;
          for (const Edge& e : edges()) groups.push_back(e.second);
          alpha = ad::grouped_softmax_rows(scaled, groups);
          break;
        }
        case GateKind::kLogistic: alpha = ad::sigmoid(scaled); break;
        case GateKind::kHardArgmax: {
          RoutingConfig hard = spec_.routing;
          hard.gate = GateKind::kHardArgmax;
          hard.temperature = 1.0;
          alpha = tape.constant(gate(scaled.value(), hard, edges().edges()));
          break;
        }
      }
      if (opt.zero_gates) {
        alpha = tape.constant(Tensor(B, E));
      } else if (opt.forced_edge) {
        Tensor onehot(B, E);
        for (std::size_t i = 0; i < B; ++i) onehot(i, opt.forced_edge.value()) = 1.0;
        alpha = tape.constant(onehot);
      } else if (l < opt.ablated.size() && !opt.ablated[l].empty()) {
        Tensor mask(B, E, 1.0);
        for (std::size_t k = 0; k < E; ++k)
          if (opt.ablated[l].at(k))
            for (std::size_t i = 0; i < B; ++i) mask(i, k) = 0.0;
        alpha = ad::mul(alpha, tape.constant(mask));
      }
      rec.alpha = alpha;

      // Routed update, grade by grade.
      std::vector<Var> next = z;
      for (Grade h = 0; h < G.size(); ++h) {
        const auto incoming = edges().incoming(h);
        if (incoming.empty()) continue;
        Var acc = z[h];
        for (std::size_t k : incoming) acc = ad::add(acc, ad::scale_rows(deltas[k], ad::slice_cols(alpha, k, 1)));
        next[h] = normalize(vars, l, h, acc);
      }
      z = std::move(next);
      res.layers.push_back(rec);
    }
    res.state = z;
    res.logits = readout(vars, z);
    res.token_loss = ad::cross_entropy_rows(res.logits, batch.targets);
    res.lm_loss = ad::mean(res.token_loss);
    return res;
  }

  Var normalize(const std::vector<Var>& vars, std::size_t l, Grade h, Var x) const {
    const std::string p = prefix(l) + "norm." + std::to_string(h);
    switch (spec_.norm) {
      case NormKind::kNone: return x;
      case NormKind::kLayerNorm:
        return ad::layernorm_rows(x, vars[params_.index(p + ".gamma")], vars[params_.index(p + ".beta")], spec_.norm_eps);
      case NormKind::kRmsNorm: return ad::rmsnorm_rows(x, vars[params_.index(p + ".gamma")], spec_.norm_eps);
    }
    return x;
  }

  // Eager view of one layer's linear blocks.
  MorphicLayer snapshot_layer(std::size_t l) const {
    MorphicLayer m{grading(), edges(), {}};
    for (std::size_t k = 0; k < edges().size(); ++k) {
      const KernelRef& kr = kernel(l, k);
      if (kr.kind != BlockKind::kLinear) throw Error("snapshot_layer: retrieval blocks have no linear snapshot");
      BlockMap b{edges()[k].first, edges()[k].second, params_.at(kr.weight).value, std::nullopt};
      if (!kr.bias.empty()) b.bias = params_.at(kr.bias).value;
      m.blocks[edges()[k]] = b;
    }
    return m;
  }

  NormSpec snapshot_norm(std::size_t l) const {
    NormSpec n{spec_.norm, {}, spec_.norm_eps};
    for (Grade g = 0; g < grading().size(); ++g) {
      const std::string p = prefix(l) + "norm." + std::to_string(g);
      GradeNormParams gp = GradeNormParams::unit(grading().dim(g));
      if (params_.contains(p + ".gamma")) gp.gamma = params_.at(p + ".gamma").value;
      if (params_.contains(p + ".beta")) gp.beta = params_.at(p + ".beta").value;
      n.params.push_back(gp);
    }
    return n;
  }

  RouterParams snapshot_router(std::size_t l) const {
    const std::string p = prefix(l);
    RouterParams r;
    r.context = params_.at(p + "router.context").value;
    for (Grade g = 0; g < grading().size(); ++g) r.value.push_back(params_.at(p + "router.value." + std::to_string(g)).value);
    for (std::size_t k = 0; k < edges().size(); ++k)
      r.bilinear[edges()[k]] = params_.at(p + "router.bilinear." + std::to_string(k)).value;
    return r;
  }

  // Kernel-to-edge aliasing, exposed for checkpointing and counting.
  const std::vector<std::vector<std::size_t>>& edge_kernels() const { return edge_kernel_; }
  const std::vector<std::vector<KernelRef>>& kernels() const { return kernels_; }


 private:
  void build(std::uint64_t seed) {
    const Grading& G = spec_.grading;
    Rng rng(seed);
    const std::size_t r = spec_.routing.rank;
    build_kernel_table();
    for (std::size_t l = 0; l < spec_.layers; ++l) {
      const std::string p = prefix(l);
      for (const KernelRef& k : kernels_[l]) {
        const Edge& e = first_edge_of(l, k);
        const std::size_t dg = G.dim(e.first), dh = G.dim(e.second);
        if (k.kind == BlockKind::kRetrieval) {
          const RetrievalBlockSpec& rs = spec_.retrieval.at(e);
          if (rs.keys.rows() != dh) throw ShapeError("retrieval", "key count must equal target grade dimension");
          params_.add(k.weight, rng.normal_tensor(rs.key_dim(), dg, spec_.block_init_scale / std::sqrt(double(dg))), true, ParamRole::kBlock);
          params_.add(k.keys, rs.keys, false, ParamRole::kConstant);
        } else {
          params_.add(k.weight, rng.normal_tensor(dh, dg, spec_.block_init_scale / std::sqrt(double(dg))), true, ParamRole::kBlock);
          if (!k.bias.empty()) params_.add(k.bias, Tensor(1, dh), true, ParamRole::kBlock);
        }
      }
      params_.add(p + "router.context", rng.normal_tensor(r, G.ambient_dim(), 1.0 / std::sqrt(double(G.ambient_dim()))), true, ParamRole::kRouter);
      for (Grade g = 0; g < G.size(); ++g)
        params_.add(p + "router.value." + std::to_string(g), rng.normal_tensor(r, G.dim(g), 1.0 / std::sqrt(double(G.dim(g)))), true, ParamRole::kRouter);
      for (std::size_t k = 0; k < spec_.edges.size(); ++k)
        params_.add(p + "router.bilinear." + std::to_string(k), rng.normal_tensor(r, r, spec_.router_init_scale), true, ParamRole::kRouter);
      if (spec_.norm != NormKind::kNone)
        for (Grade g = 0; g < G.size(); ++g) {
          if (spec_.edges.incoming(g).empty()) continue;
          const std::string n = p + "norm." + std::to_string(g);
          params_.add(n + ".gamma", Tensor(1, G.dim(g), 1.0), true, ParamRole::kNorm);
          if (spec_.norm == NormKind::kLayerNorm) params_.add(n + ".beta", Tensor(1, G.dim(g), 0.0), true, ParamRole::kNorm);
        }
      params_.add(threshold_name(l), Tensor(1, spec_.edges.size(), spec_.initial_threshold), true, ParamRole::kThreshold);
    }
    params_.add("readout.weight", rng.normal_tensor(spec_.classes, G.ambient_dim(), 1.0 / std::sqrt(double(G.ambient_dim()))), true, ParamRole::kReadout);
    params_.add("readout.bias", Tensor(1, spec_.classes), true, ParamRole::kReadout);
  }

  const Edge& first_edge_of(std::size_t l, const KernelRef& k) const {
    for (std::size_t e = 0; e < spec_.edges.size(); ++e)
      if (&kernels_[l][edge_kernel_[l][e]] == &k) return spec_.edges[e];
    throw Error("kernel without edge");
  }

  void build_kernel_table() {
    const Grading& G = spec_.grading;
    kernels_.assign(spec_.layers, {});
    edge_kernel_.assign(spec_.layers, {});
    for (std::size_t l = 0; l < spec_.layers; ++l) {
      const std::string p = prefix(l);
      std::map<std::string, std::size_t> by_name;
      for (const Edge& e : spec_.edges) {
        KernelRef k;
        if (spec_.retrieval.count(e)) {
          const std::string n = p + "retrieval." + G.label(e.first) + ":" + G.label(e.second);
          k = KernelRef{BlockKind::kRetrieval, n + ".query", "", n + ".keys", spec_.retrieval.at(e).sigma2};
        } else {
          const std::string n = spec_.lgt_sharing ? p + "kernel.d" + std::to_string(increment(e))
                                                  : p + "block." + G.label(e.first) + ":" + G.label(e.second);
          k = KernelRef{BlockKind::kLinear, n + ".weight", spec_.block_bias ? n + ".bias" : "", "", 1.0};
        }
        auto it = by_name.find(k.weight);
        if (it == by_name.end()) {
          it = by_name.emplace(k.weight, kernels_[l].size()).first;
          kernels_[l].push_back(k);
        }
        edge_kernel_[l].push_back(it->second);
      }
    }
  }

  ModelSpec spec_;
  ParameterStore params_;
  std::vector<std::vector<KernelRef>> kernels_;
  std::vector<std::vector<std::size_t>> edge_kernel_;
};

// Conjugates a normalization-free model by D: blocks D_h^{-1} Φ D_g, router value
// projections P_g D_g, context projection P D, readout R D. Feeding D^{-1} z
// to the result reproduces every logit, utility and gate of the original.
inline GradedModel conjugate_model(const GradedModel& m, const EgtReweighting& d) {
  if (m.spec().norm != NormKind::kNone) throw Error("conjugate_model: grade-wise normalization is not D-equivariant");
  if (!m.spec().retrieval.empty()) throw Error("conjugate_model: retrieval blocks are not D-equivariant");
  d.validate();
  ModelSpec spec = m.spec();
  spec.lgt_sharing = false;  // D_h^{-1} K D_g no longer depends on the increment alone
  GradedModel out(spec, 0);
  for (auto& p : out.params())
    if (m.params().contains(p.name)) {
      p.value = m.params().at(p.name).value;
      p.trainable = m.params().at(p.name).trainable;
    }
  const Grading& G = m.grading();
  const Tensor dfull = block_diagonal(d.scalings);
  for (std::size_t l = 0; l < m.layers(); ++l) {
    for (std::size_t k = 0; k < m.edges().size(); ++k) {
      const Edge& e = m.edges()[k];
      const KernelRef& src = m.kernel(l, k);
      const KernelRef& dst = out.kernel(l, k);
      Param& w = out.params().at(dst.weight);
      w.value = ops::matmul(d.inverse(e.second), ops::matmul(m.params().at(src.weight).value, d.scalings[e.first]));
      w.trainable = m.params().at(src.weight).trainable;
      if (!src.bias.empty())
        out.params().at(dst.bias).value =
            ops::transpose(ops::matmul(d.inverse(e.second), ops::transpose(m.params().at(src.bias).value)));
    }
    const std::string p = GradedModel::prefix(l);
    out.params().at(p + "router.context").value = ops::matmul(m.params().at(p + "router.context").value, dfull);
    for (Grade g = 0; g < G.size(); ++g) {
      const std::string n = p + "router.value." + std::to_string(g);
      out.params().at(n).value = ops::matmul(m.params().at(n).value, d.scalings[g]);
    }
  }
  out.params().at("readout.weight").value = transport_readout(m.params().at("readout.weight").value, d);
  return out;
}

inline Batch conjugate_batch(const Batch& b, const EgtReweighting& d) {
  return Batch{conjugate_state(b.inputs, d, ConjugateDirection::kToLgt), b.targets, b.sequence};
}

}  // namespace graded
