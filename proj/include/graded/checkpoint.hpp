#pragma once

#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"

#include "graded/model.hpp"

namespace graded {

using Json = nlohmann::ordered_json;

inline Json tensor_to_json(const Tensor& t) {
  return Json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", t.values()}};
}

inline Tensor tensor_from_json(const Json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != rows * cols) throw Error("checkpoint: tensor data length does not match its extents");
  return Tensor(rows, cols, std::move(data));
}

inline Json grading_to_json(const Grading& g) { return Json{{"labels", g.labels()}, {"dims", g.dims()}}; }

inline Grading grading_from_json(const Json& j) {
  return Grading(j.at("labels").get<std::vector<std::string>>(), j.at("dims").get<std::vector<std::size_t>>());
}

inline Json edges_to_json(const EdgeSet& e) {
  Json out{{"edges", Json::array()}};
  for (const Edge& x : e) out["edges"].push_back({x.first, x.second});
  if (e.band()) out["band"] = std::vector<int>(e.band()->begin(), e.band()->end());
  return out;
}

inline EdgeSet edges_from_json(const Json& j, const Grading& g) {
  if (j.contains("band")) {
    EdgeSet banded = EdgeSet::banded(g, j.at("band").get<std::vector<int>>());
    std::vector<Edge> listed;
    for (const auto& x : j.at("edges")) listed.emplace_back(x.at(0).get<Grade>(), x.at(1).get<Grade>());
    if (EdgeSet(listed) != banded) throw Error("checkpoint: edge list disagrees with its band");
    return banded;
  }
  std::vector<Edge> listed;
  for (const auto& x : j.at("edges")) listed.emplace_back(x.at(0).get<Grade>(), x.at(1).get<Grade>());
  return EdgeSet(std::move(listed));
}

inline Json routing_to_json(const RoutingConfig& r) {
  return Json{{"beta", r.beta},           {"temperature", r.temperature}, {"gate", to_string(r.gate)},
              {"utility_in_logits", r.utility_in_logits}, {"rank", r.rank}, {"mode", to_string(r.mode)}};
}

inline RoutingConfig routing_from_json(const Json& j, RoutingConfig r = {}) {
  if (j.contains("beta")) r.beta = j.at("beta").get<double>();
  if (j.contains("temperature")) r.temperature = j.at("temperature").get<double>();
  if (j.contains("gate")) r.gate = gate_kind_from(j.at("gate").get<std::string>());
  if (j.contains("utility_in_logits")) r.utility_in_logits = j.at("utility_in_logits").get<bool>();
  if (j.contains("rank")) r.rank = j.at("rank").get<std::size_t>();
  if (j.contains("mode")) r.mode = update_mode_from(j.at("mode").get<std::string>());
  return r;
}

inline Json spec_to_json(const ModelSpec& s) {
  Json j{{"grading", grading_to_json(s.grading)},
         {"layers", s.layers},
         {"edges", edges_to_json(s.edges)},
         {"lgt_sharing", s.lgt_sharing},
         {"block_bias", s.block_bias},
         {"norm", to_string(s.norm)},
         {"norm_eps", s.norm_eps},
         {"classes", s.classes},
         {"routing", routing_to_json(s.routing)},
         {"initial_threshold", s.initial_threshold},
         {"block_init_scale", s.block_init_scale},
         {"router_init_scale", s.router_init_scale},
         {"retrieval", Json::array()}};
  for (const auto& [e, r] : s.retrieval)
    j["retrieval"].push_back({{"edge", {e.first, e.second}}, {"keys", tensor_to_json(r.keys)}, {"sigma2", r.sigma2}});
  return j;
}

inline ModelSpec spec_from_json(const Json& j) {
  ModelSpec s;
  s.grading = grading_from_json(j.at("grading"));
  s.layers = j.at("layers").get<std::size_t>();
  s.edges = edges_from_json(j.at("edges"), s.grading);
  s.lgt_sharing = j.at("lgt_sharing").get<bool>();
  s.block_bias = j.at("block_bias").get<bool>();
  s.norm = norm_kind_from(j.at("norm").get<std::string>());
  s.norm_eps = j.at("norm_eps").get<double>();
  s.classes = j.at("classes").get<std::size_t>();
  s.routing = routing_from_json(j.at("routing"));
  s.initial_threshold = j.at("initial_threshold").get<double>();
  s.block_init_scale = j.at("block_init_scale").get<double>();
  s.router_init_scale = j.at("router_init_scale").get<double>();
  for (const auto& r : j.at("retrieval")) {
    const Edge e{r.at("edge").at(0).get<Grade>(), r.at("edge").at(1).get<Grade>()};
    s.retrieval[e] = RetrievalBlockSpec{tensor_from_json(r.at("keys")), r.at("sigma2").get<double>()};
  }
  return s;
}

inline std::string role_name(ParamRole r) {
  switch (r) {
    case ParamRole::kBlock: return "block";
    case ParamRole::kRouter: return "router";
    case ParamRole::kNorm: return "norm";
    case ParamRole::kThreshold: return "threshold";
    case ParamRole::kReadout: return "readout";
    case ParamRole::kConstant: return "constant";
  }
  return "block";
}

inline ParamRole role_from(const std::string& s) {
  for (ParamRole r : {ParamRole::kBlock, ParamRole::kRouter, ParamRole::kNorm, ParamRole::kThreshold, ParamRole::kReadout,
                      ParamRole::kConstant})
    if (role_name(r) == s) return r;
  throw Error("checkpoint: unknown parameter role '" + s + "'");
}

inline Json egt_to_json(const EgtReweighting& d) {
  Json j{{"ratio", tensor_to_json(d.ratio)}, {"diagonal", d.diagonal}, {"scalings", Json::array()}};
  for (const auto& s : d.scalings) j["scalings"].push_back(tensor_to_json(s));
  return j;
}

inline EgtReweighting egt_from_json(const Json& j) {
  EgtReweighting d;
  d.ratio = tensor_from_json(j.at("ratio"));
  d.diagonal = j.at("diagonal").get<bool>();
  for (const auto& s : j.at("scalings")) d.scalings.push_back(tensor_from_json(s));
  d.validate();
  return d;
}

struct Checkpoint {
  GradedModel model;
  std::optional<EgtReweighting> reweighting;  // present when the model is stored in its LGT frame
  std::size_t step = 0;
};

inline Json checkpoint_to_json(const Checkpoint& c) {
  Json j{{"format", "graded-checkpoint"}, {"version", 1}, {"step", c.step}, {"spec", spec_to_json(c.model.spec())},
         {"params", Json::array()}};
  for (const auto& p : c.model.params())
    j["params"].push_back({{"name", p.name}, {"role", role_name(p.role)}, {"trainable", p.trainable}, {"value", tensor_to_json(p.value)}});
  if (c.reweighting) j["egt"] = egt_to_json(*c.reweighting);
  return j;
}

inline Checkpoint checkpoint_from_json(const Json& j) {
  if (j.value("format", "") != "graded-checkpoint") throw Error("checkpoint: not a graded checkpoint");
  if (j.value("version", 0) != 1) throw Error("checkpoint: unsupported version");
  ParameterStore stored;
  for (const auto& p : j.at("params"))
    stored.add(p.at("name").get<std::string>(), tensor_from_json(p.at("value")), p.at("trainable").get<bool>(),
               role_from(p.at("role").get<std::string>()));
  Checkpoint c{GradedModel::restore(spec_from_json(j.at("spec")), stored), std::nullopt, j.at("step").get<std::size_t>()};
  if (j.contains("egt")) c.reweighting = egt_from_json(j.at("egt"));
  return c;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw Error("write failed for '" + path + "'");
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { write_text(path, checkpoint_to_json(c).dump(1) + "\n"); }

inline Checkpoint load_checkpoint(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw Error("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace graded
