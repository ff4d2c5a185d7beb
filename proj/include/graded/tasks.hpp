#pragma once

#include <cmath>
#include <vector>

#include "graded/grading.hpp"
#include "graded/linalg.hpp"
#include "graded/random.hpp"

namespace graded {

// ---------------------------------------------------------------------------
// Arithmetic mod p.
// ---------------------------------------------------------------------------

// P_a e_d = e_{(d+a) mod p}.
inline Tensor modp_shift_matrix(std::size_t p, std::size_t a) {
  if (p == 0 || a >= p) throw Error("modp_shift_matrix: need 0 <= a < p");
  Tensor m(p, p);
  for (std::size_t d = 0; d < p; ++d) m((d + a) % p, d) = 1.0;
  return m;
}

struct ModPTask {
  std::size_t p = 7;
  std::size_t a = 3;
  double scale = 5.0;  // logit s of the calibrated one-hot readout
};

struct ModPDataset {
  std::vector<std::size_t> digits;
  std::vector<std::size_t> targets;
  std::size_t size() const { return digits.size(); }
};

inline ModPDataset gen_modp_dataset(std::size_t p, std::size_t a, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("gen_modp_dataset: n must be positive");
  if (a >= p) throw Error("gen_modp_dataset: need 0 <= a < p");
  Rng rng(seed);
  ModPDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d = rng.index(p);
    ds.digits.push_back(d);
    ds.targets.push_back((d + a) % p);
  }
  return ds;
}

struct ModPUtility {
  double pre = 0.0;   // loss with the unshifted one-hot at the readout
  double post = 0.0;  // log(1 + (p−1) e^{−s})
  double utility = 0.0;
};

// Calibrated readout: logit s on the encoded digit, 0 on the other p−1 classes.
inline ModPUtility modp_exact_utility(std::size_t p, std::size_t a, double s) {
  if (a >= p) throw Error("modp_exact_utility: need 0 <= a < p");
  const double pm1 = static_cast<double>(p - 1);
  ModPUtility u;
  u.post = std::log1p(pm1 * std::exp(-s));
  // A nonzero shift leaves the readout peaked on the wrong class.
  u.pre = a == 0 ? u.post : s + std::log1p(pm1 * std::exp(-s));
  u.utility = u.pre - u.post;
  return u;
}

// ---------------------------------------------------------------------------
// Retrieval with finite memory. Keys are the rows of M (k x d_key); the query
// is q = W_q z_sem and r = softmax(M q / σ²).
// ---------------------------------------------------------------------------
struct RetrievalTask {
  std::size_t k = 8;
  std::size_t d_sem = 16;
  Tensor keys;         // M, k x d_key
  Tensor query_proj;   // W_q, d_key x d_sem
  Tensor value_diag;   // 1 x k, diagonal of the value map
  Tensor write_back;   // U, d_sem x k
  double sigma2 = 0.5;
  double kappa = 4.0;  // readout logit gain on the written coordinate
};

// Keys with orthonormal rows in ℝ^{d_key}, d_key ≥ k.
inline Tensor orthonormal_keys(std::size_t k, std::size_t d_key, Rng& rng) {
  if (d_key < k) throw Error("orthonormal_keys: need d_key >= k");
  const Matrix g = to_eigen(rng.normal_tensor(d_key, k));
  const Eigen::HouseholderQR<Matrix> qr(g);
  const Matrix q = qr.householderQ() * Matrix::Identity(d_key, k);
  return from_eigen(q.transpose());
}

// Default instance: the last d_key coordinates of sem carry the query, the first
// k are the readout's write-back slots.
inline RetrievalTask make_retrieval_task(std::size_t k, std::size_t d_sem, double sigma2, double kappa, std::uint64_t seed) {
  if (d_sem < 2 * k) throw Error("retrieval: d_sem must hold k readout slots and a k-dim query");
  Rng rng(seed);
  RetrievalTask t;
  t.k = k;
  t.d_sem = d_sem;
  t.keys = orthonormal_keys(k, k, rng);
  t.query_proj = Tensor(k, d_sem);
  for (std::size_t i = 0; i < k; ++i) t.query_proj(i, d_sem - k + i) = 1.0;
  t.value_diag = Tensor(1, k, 1.0);
  t.write_back = Tensor(d_sem, k);
  for (std::size_t i = 0; i < k; ++i) t.write_back(i, i) = 1.0;
  t.sigma2 = sigma2;
  t.kappa = kappa;
  return t;
}

// Query whose key scores are `scores` exactly (keys orthonormal, d_key = k).
inline Tensor query_with_scores(const RetrievalTask& t, const std::vector<double>& scores) {
  if (scores.size() != t.k || t.keys.cols() != t.k) throw Error("query_with_scores: needs square orthonormal keys");
  Tensor z(1, t.d_sem);
  for (std::size_t c = 0; c < t.k; ++c) {
    double q = 0.0;
    for (std::size_t i = 0; i < t.k; ++i) q += t.keys(i, c) * scores[i];
    z(0, t.d_sem - t.k + c) = q;
  }
  return z;
}

struct RetrievalRoundtrip {
  Tensor scores;     // 1 x k, M q
  Tensor r;          // 1 x k
  Tensor write_back; // 1 x d_sem
  std::size_t i_star = 0;
  double margin = 0.0;
  double mass_bound = 0.0;  // 1 − e^{−γ/σ²}
  double utility = 0.0;     // ΔL of the sem←ret∘ret←sem round trip
};

inline double retrieval_readout_loss(const RetrievalTask& t, const Tensor& z_sem, std::size_t target) {
  Tensor logits(1, t.k);
  for (std::size_t c = 0; c < t.k; ++c) logits(0, c) = t.kappa * z_sem(0, c);
  const std::size_t tg[] = {target};
  return ops::cross_entropy_rows(logits, tg).item();
}

inline RetrievalRoundtrip retrieval_roundtrip(const RetrievalTask& t, const Tensor& z_sem) {
  if (z_sem.rows() != 1 || z_sem.cols() != t.d_sem) throw ShapeError("retrieval_roundtrip", z_sem.extents());
  RetrievalRoundtrip out;
  const Tensor q = ops::apply_linear(z_sem, t.query_proj);
  out.scores = ops::apply_linear(q, t.keys);
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.k; ++i)
    if (out.scores(0, i) > out.scores(0, best)) best = i;
  double second = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < t.k; ++i)
    if (i != best) second = std::max(second, out.scores(0, i));
  out.i_star = best;
  out.margin = out.scores(0, best) - second;
  // Margins at rounding level are ties.
  if (!(out.margin > 1e-12 * std::max(1.0, ops::max_abs(out.scores))))
    throw Error("retrieval_roundtrip: no key attains a positive margin");
  out.r = ops::softmax_rows(ops::scale(out.scores, 1.0 / t.sigma2));
  out.mass_bound = 1.0 - std::exp(-out.margin / t.sigma2);
  out.write_back = ops::apply_linear(ops::mul(out.r, t.value_diag), t.write_back);
  out.utility = retrieval_readout_loss(t, z_sem, best) - retrieval_readout_loss(t, ops::add(z_sem, out.write_back), best);
  return out;
}

// Exact r_{i*} lower bound over all score vectors with margin γ: every
// competitor sits exactly γ below.
inline double retrieval_tight_mass(std::size_t k, double gamma, double sigma2) {
  return 1.0 / (1.0 + static_cast<double>(k - 1) * std::exp(-gamma / sigma2));
}

// ΔL of writing a perfect one-hot back: log k − log(1 + (k−1)e^{−κ}).
inline double retrieval_ideal_utility(std::size_t k, double kappa) {
  return std::log(static_cast<double>(k)) - std::log1p(static_cast<double>(k - 1) * std::exp(-kappa));
}

// ---------------------------------------------------------------------------
// Dyck depth. Symbol classes: 0 neutral, 1 open, 2 close.
// ---------------------------------------------------------------------------
inline int dyck_delta(std::size_t symbol) {
  switch (symbol) {
    case 0: return 0;
    case 1: return 1;
    case 2: return -1;
  }
  throw Error("dyck: unknown symbol class");
}

inline double dyck_increment(double s, int delta) {
  if (delta < -1 || delta > 1) throw Error("dyck_increment: delta must be in {-1,0,+1}");
  return s + static_cast<double>(delta);
}

// Running depth after each label, starting from s0.
inline std::vector<double> dyck_trace(const std::vector<int>& deltas, double s0 = 0.0) {
  std::vector<double> out;
  double s = s0;
  for (int d : deltas) out.push_back(s = dyck_increment(s, d));
  return out;
}

struct DyckSequence {
  std::vector<std::size_t> symbols;
  std::vector<int> deltas;
  std::vector<std::size_t> depth_before;  // s_t*
  std::vector<std::size_t> depth_after;   // s_{t+1}*
};

struct DyckDataset {
  std::size_t m = 6;
  std::size_t max_depth = 4;
  std::vector<DyckSequence> sequences;
  std::size_t tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.symbols.size();
    return n;
  }
};

// Balanced strings of `length` tokens with neutral symbols interleaved. Opens
// are only drawn while the remaining budget can still close every bracket.
inline DyckDataset gen_dyck_dataset(std::size_t m, std::size_t n, std::size_t max_depth, std::uint64_t seed,
                                    std::size_t length = 16) {
  if (max_depth == 0) throw Error("gen_dyck_dataset: max_depth must be at least 1");
  if (m < 3) throw Error("gen_dyck_dataset: sem grade needs room for 3 symbol classes");
  Rng rng(seed);
  DyckDataset ds{m, max_depth, {}};
  for (std::size_t i = 0; i < n; ++i) {
    DyckSequence seq;
    std::size_t depth = 0;
    for (std::size_t t = 0; t < length; ++t) {
      const std::size_t remaining = length - t - 1;
      std::vector<std::size_t> allowed;
      if (depth + 1 <= max_depth && depth + 1 <= remaining) allowed.push_back(1);
      if (depth > 0) allowed.push_back(2);
      if (depth <= remaining) allowed.push_back(0);
      const std::size_t sym = allowed[rng.index(allowed.size())];
      seq.symbols.push_back(sym);
      seq.deltas.push_back(dyck_delta(sym));
      seq.depth_before.push_back(depth);
      depth = static_cast<std::size_t>(static_cast<int>(depth) + dyck_delta(sym));
      seq.depth_after.push_back(depth);
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// Symbol class one-hot repeated to fill m coordinates.
inline Tensor dyck_encode_symbol(std::size_t symbol, std::size_t m) {
  Tensor x(1, m);
  for (std::size_t j = symbol; j < m; j += 3) x(0, j) = 1.0;
  return x;
}

// Linear sem→stack block reading δ off the repeated one-hot.
inline Tensor dyck_increment_block(std::size_t m) {
  const std::size_t reps = m / 3;
  Tensor w(1, m);
  for (std::size_t j = 0; j < reps * 3; ++j) w(0, j) = static_cast<double>(dyck_delta(j % 3)) / static_cast<double>(reps);
  return w;
}

// Depth readout: logit_c = κ(2cs − c²), peaked at c = s with unit spacing κ.
inline Tensor dyck_readout_logits(const Tensor& stack, double kappa, std::size_t max_depth) {
  Tensor out(stack.rows(), max_depth + 1);
  for (std::size_t i = 0; i < stack.rows(); ++i)
    for (std::size_t c = 0; c <= max_depth; ++c) {
      const double cc = static_cast<double>(c);
      out(i, c) = kappa * (2.0 * cc * stack(i, 0) - cc * cc);
    }
  return out;
}

// ΔL of applying the increment to a stack value s against target class s_{t+1}*.
inline double dyck_utility(double s, int delta, std::size_t target, double kappa, std::size_t max_depth) {
  const std::size_t tg[] = {target};
  const double pre = ops::cross_entropy_rows(dyck_readout_logits(Tensor::scalar(s), kappa, max_depth), tg).item();
  const double post =
      ops::cross_entropy_rows(dyck_readout_logits(Tensor::scalar(dyck_increment(s, delta)), kappa, max_depth), tg).item();
  return pre - post;
}

}  // namespace graded
