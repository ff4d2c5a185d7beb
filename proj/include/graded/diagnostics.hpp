#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "graded/experiment.hpp"

namespace graded {

// Equal-width histogram of every (token, edge) utility in each layer.
// Each layer's counts sum to tokens x |E|.
inline std::string utility_histogram_csv(const RoutingTrace& tr, const GradedModel& model, const std::string& phase,
                                         std::size_t bins = 20, bool header = true) {
  std::ostringstream os;
  os.precision(10);
  if (header) os << "phase,layer,edge,bin_lo,bin_hi,count\n";
  for (std::size_t l = 0; l < tr.utility.size(); ++l) {
    const Tensor& u = tr.utility[l];
    double lo = u(0, 0), hi = u(0, 0);
    for (double v : u.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) hi = lo + 1e-12;
    const double w = (hi - lo) / static_cast<double>(bins);
    for (std::size_t e = 0; e < u.cols(); ++e) {
      std::vector<std::size_t> counts(bins, 0);
      for (std::size_t i = 0; i < u.rows(); ++i) {
        auto b = static_cast<std::size_t>((u(i, e) - lo) / w);
        counts[std::min(b, bins - 1)]++;
      }
      const std::string name = edge_name(model.grading(), model.edges()[e]);
      for (std::size_t b = 0; b < bins; ++b)
        os << phase << ',' << l << ',' << name << ',' << lo + w * static_cast<double>(b) << ','
           << lo + w * static_cast<double>(b + 1) << ',' << counts[b] << '\n';
    }
  }
  return os.str();
}

// Per layer: mean routing entropy and mean support size (edges with α > 1e-3).
inline std::string entropy_csv(const RoutingTrace& tr, const std::string& phase, bool header = true) {
  std::ostringstream os;
  os.precision(10);
  if (header) os << "phase,layer,mean_entropy,mean_support\n";
  for (std::size_t l = 0; l < tr.alpha.size(); ++l) {
    const Tensor& a = tr.alpha[l];
    double h = 0.0, support = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t e = 0; e < a.cols(); ++e) {
        if (a(i, e) > 0.0) h -= a(i, e) * std::log(a(i, e));
        if (a(i, e) > 1e-3) support += 1.0;
      }
    const auto n = static_cast<double>(a.rows());
    os << phase << ',' << l << ',' << h / n << ',' << support / n << '\n';
  }
  return os.str();
}

struct AblationRow {
  Edge edge;
  double base_lm = 0.0;
  double ablated_lm = 0.0;
};

// Removes one edge from every layer's routing and re-evaluates the LM loss.
inline std::vector<AblationRow> ablate_edges(const GradedModel& model, const Dataset& ds, const std::vector<Edge>& edges) {
  const double base = trace_dataset(model, ds).lm;
  std::vector<AblationRow> rows;
  for (const Edge& e : edges) {
    const auto k = model.edges().index_of(e);
    if (!k) throw Error("ablation: edge " + edge_name(model.grading(), e) + " is not admissible");
    ForwardOptions opt;
    opt.ablated.assign(model.layers(), std::vector<bool>(model.edges().size(), false));
    for (auto& layer : opt.ablated) layer[*k] = true;
    rows.push_back({e, base, trace_dataset(model, ds, opt).lm});
  }
  return rows;
}

inline std::string ablation_csv(const GradedModel& model, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "edge,base_lm,ablated_lm,delta\n";
  for (const auto& r : rows)
    os << edge_name(model.grading(), r.edge) << ',' << r.base_lm << ',' << r.ablated_lm << ',' << r.ablated_lm - r.base_lm << '\n';
  return os.str();
}

// Reliability of the routing logit as a predictor of positive utility:
// predicted mean σ(ℓ̃) against the realized rate of ΔL > 0, in 10 equal-width
// bins of the augmented logit.
inline std::string calibration_csv(const RoutingTrace& tr, const std::string& phase, std::size_t bins = 10,
                                   bool header = true) {
  std::ostringstream os;
  os.precision(10);
  if (header) os << "phase,layer,bin_lo,bin_hi,count,predicted,realized\n";
  for (std::size_t l = 0; l < tr.augmented.size(); ++l) {
    const Tensor& a = tr.augmented[l];
    const Tensor& u = tr.utility[l];
    double lo = a(0, 0), hi = a(0, 0);
    for (double v : a.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) hi = lo + 1e-12;
    const double w = (hi - lo) / static_cast<double>(bins);
    std::vector<double> pred(bins, 0.0), real(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t e = 0; e < a.cols(); ++e) {
        const std::size_t b = std::min(static_cast<std::size_t>((a(i, e) - lo) / w), bins - 1);
        ++count[b];
        pred[b] += 1.0 / (1.0 + std::exp(-a(i, e)));
        real[b] += u(i, e) > 0.0 ? 1.0 : 0.0;
      }
    for (std::size_t b = 0; b < bins; ++b) {
      const double n = count[b] ? static_cast<double>(count[b]) : 1.0;
      os << phase << ',' << l << ',' << lo + w * static_cast<double>(b) << ',' << lo + w * static_cast<double>(b + 1) << ','
         << count[b] << ',' << pred[b] / n << ',' << real[b] / n << '\n';
    }
  }
  return os.str();
}

// One JSON object per (token, layer, edge).
inline std::string routing_trace_jsonl(const RoutingTrace& tr, const GradedModel& model) {
  std::string out;
  for (std::size_t i = 0; i < tr.token_loss.rows(); ++i)
    for (std::size_t l = 0; l < tr.alpha.size(); ++l)
      for (std::size_t e = 0; e < model.edges().size(); ++e) {
        const Json j{{"token", i},
                     {"layer", l},
                     {"edge", edge_name(model.grading(), model.edges()[e])},
                     {"logit", tr.logits[l](i, e)},
                     {"utility", tr.utility[l](i, e)},
                     {"augmented", tr.augmented[l](i, e)},
                     {"alpha", tr.alpha[l](i, e)}};
        out += j.dump() + "\n";
      }
  return out;
}

// Parses "g:h" by grade label or numeric index.
inline Edge parse_edge(const Grading& g, const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw Error("edge '" + text + "' must look like g:h");
  auto grade = [&](const std::string& s) -> Grade {
    for (std::size_t i = 0; i < g.size(); ++i)
      if (g.labels()[i] == s) return static_cast<Grade>(i);
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used == s.size() && v >= 0 && static_cast<std::size_t>(v) < g.size()) return static_cast<Grade>(v);
    } catch (const std::exception&) {
    }
    throw Error("unknown grade '" + s + "' in edge '" + text + "'");
  };
  return {grade(text.substr(0, colon)), grade(text.substr(colon + 1))};
}

}  // namespace graded
