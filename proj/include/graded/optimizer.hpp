#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "graded/objective.hpp"

namespace graded {

enum class OptimizerKind { kAdamW, kSgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdamW ? "adamw" : "sgd"; }
inline OptimizerKind optimizer_kind_from(const std::string& s) {
  if (s == "adamw") return OptimizerKind::kAdamW;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw Error("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double lr = 3e-4;
  std::size_t batch_size = 64;
  std::size_t steps = 1000;
  double clip = 1.0;  // global gradient-norm clip; 0 disables
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr >= 0.0)) throw Error("train.lr must be nonnegative");
    if (batch_size == 0) throw Error("train.batch_size must be positive");
    if (!(clip >= 0.0)) throw Error("train.clip must be nonnegative");
    if (!(weight_decay >= 0.0)) throw Error("train.weight_decay must be nonnegative");
  }
};

// Decoupled weight decay applies to weight matrices only: thresholds,
// normalization affines and biases are exempt.
inline bool decays(const Param& p) {
  if (p.role == ParamRole::kThreshold || p.role == ParamRole::kNorm || p.role == ParamRole::kConstant) return false;
  return p.name.size() < 5 || p.name.compare(p.name.size() - 5, 5, ".bias") != 0;
}

class Optimizer {
 public:
  explicit Optimizer(TrainConfig cfg = {}) : cfg_(std::move(cfg)) {}

  const TrainConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return t_; }

  void apply(ParameterStore& params, const std::vector<Tensor>& grads) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.value.rows(), p.value.cols());
        v_.emplace_back(p.value.rows(), p.value.cols());
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param& p = params[i];
      if (!p.trainable) continue;
      const Tensor& g = grads[i];
      const double wd = decays(p) ? cfg_.weight_decay : 0.0;
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        if (cfg_.optimizer == OptimizerKind::kSgd) {
          p.value[k] -= cfg_.lr * (g[k] + wd * p.value[k]);
          continue;
        }
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g[k];
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mh = m_[i][k] / bc1, vh = v_[i][k] / bc2;
        p.value[k] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + wd * p.value[k]);
      }
      if (p.role == ParamRole::kThreshold)
        for (auto& x : p.value.data()) x = std::max(0.0, x);
    }
  }

  // Moment state, exposed for checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

struct StepMetrics {
  std::size_t step = 0;
  ObjectiveBreakdown objective;
  double grad_norm = 0.0;
  bool aborted = false;
  std::vector<std::vector<double>> utility_mean;  // [layer][edge]
  std::vector<std::vector<double>> alpha_mean;    // [layer][edge]
};

inline std::vector<double> column_means(const Tensor& t) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[j] += t(i, j);
  for (auto& x : m) x /= static_cast<double>(t.rows());
  return m;
}

// One clipped step on L_GT. A step whose gradients are not all finite leaves the
// parameters untouched and comes back with `aborted` set.
inline StepMetrics train_step(GradedModel& model, Optimizer& opt, const Batch& batch, const ObjectiveConfig& obj) {
  Tape tape;
  const std::vector<Var> vars = model.bind(tape);
  const ObjectiveResult res = graded_objective(tape, model, vars, batch, obj);
  const Gradients grads = tape.backward(res.total);

  StepMetrics m;
  m.step = opt.steps_taken() + 1;
  m.objective = res.breakdown;
  for (const LayerRecord& rec : res.forward.layers) {
    m.utility_mean.push_back(column_means(rec.utility.value()));
    m.alpha_mean.push_back(column_means(rec.alpha.value()));
  }

  std::vector<Tensor> g;
  double sq = 0.0;
  bool finite = true;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    Tensor gi = model.params()[i].trainable ? grads[vars[i]] : Tensor(vars[i].rows(), vars[i].cols());
    if (model.params()[i].role == ParamRole::kThreshold && !obj.learnable_thresholds) gi = Tensor(gi.rows(), gi.cols());
    finite = finite && gi.all_finite();
    for (double x : gi.data()) sq += x * x;
    g.push_back(std::move(gi));
  }
  m.grad_norm = std::sqrt(sq);
  if (!finite || !std::isfinite(m.grad_norm)) {
    m.aborted = true;
    return m;
  }
  const double clip = opt.config().clip;
  if (clip > 0.0 && m.grad_norm > clip)
    for (auto& gi : g) gi = ops::scale(gi, clip / m.grad_norm);
  opt.apply(model.params(), g);
  return m;
}

}  // namespace graded
