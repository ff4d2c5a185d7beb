#pragma once

#include <array>
#include <exception>
#include <functional>
#include <thread>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graded/checkpoint.hpp"
#include "graded/optimizer.hpp"
#include "graded/tasks.hpp"

namespace graded {

// Raised for invalid configuration; the CLI maps it to a usage error.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ModPConfig {
  std::size_t p = 7;
  std::size_t a = 3;
  double scale = 5.0;
  bool freeze_program = false;
};

struct DyckConfig {
  std::size_t m = 6;
  std::size_t max_depth = 4;
  double kappa = 2.0;
};

struct RetrievalConfig {
  std::size_t k = 8;
  double sigma2 = 0.5;
  double kappa = 4.0;
  double query_scale = 3.0;
  double noise = 0.1;
  bool learn_query = false;  // train W_q instead of fixing it to the task's projection
};

struct DataConfig {
  std::size_t train_sequences = 512;
  std::size_t eval_sequences = 64;
  std::size_t sequence_length = 8;
};

struct ShapeConfig {
  std::size_t layers = 2;
  std::size_t dim = 16;
  std::size_t heads = 2;  // sizes the reported attention parameter count
  std::size_t d_q = 8;
  std::size_t ffn_width = 32;
  std::vector<int> band{-1, 1};
  NormKind norm = NormKind::kLayerNorm;
  bool lgt_sharing = false;
  bool block_bias = false;
};

struct ExperimentConfig {
  std::string task = "modp";
  std::uint64_t seed = 0;
  std::string out = "runs/modp";
  ShapeConfig model;
  RoutingConfig routing;
  double initial_threshold = 0.0;
  ObjectiveConfig objective;
  TrainConfig train;
  DataConfig data;
  ModPConfig modp;
  DyckConfig dyck;
  RetrievalConfig retrieval;
};

inline ExperimentConfig default_config(const std::string& task) {
  ExperimentConfig c;
  c.task = task;
  c.out = "runs/" + task;
  c.routing.beta = 5.0;
  c.routing.temperature = 0.5;
  c.objective.lambda = 0.05;
  c.train.lr = 1e-2;
  c.train.batch_size = 64;
  c.train.steps = task == "modp" ? 5000 : 2000;
  if (task == "modp") {
    // Replace mode lets layer 0 erase the (wrong) sem digit for a greedy gain,
    // which starves the two-step program; residual updates keep it reachable.
    c.routing.mode = UpdateMode::kResidual;
    c.model.norm = NormKind::kLayerNorm;
  } else if (task == "dyck") {
    c.model.dim = 6;
    c.routing.mode = UpdateMode::kResidual;
    c.model.norm = NormKind::kNone;
    c.data.sequence_length = 16;
    c.data.train_sequences = 256;
    c.data.eval_sequences = 32;
  } else if (task == "retrieval") {
    c.routing.mode = UpdateMode::kResidual;
    c.model.norm = NormKind::kNone;
  } else {
    throw ConfigError("task", "must be one of modp, dyck, retrieval");
  }
  return c;
}

inline void validate(const ExperimentConfig& c) {
  if (c.task != "modp" && c.task != "dyck" && c.task != "retrieval") throw ConfigError("task", "must be one of modp, dyck, retrieval");
  if (c.model.layers < 2 || c.model.layers > 4) throw ConfigError("model.layers", "must be in 2..4");
  if (c.model.heads != 2 && c.model.heads != 4) throw ConfigError("model.heads", "must be 2 or 4");
  if (c.model.band.empty()) throw ConfigError("model.band", "must not be empty");
  for (int d : c.model.band)
    if (d < -1 || d > 1) throw ConfigError("model.band", "increments must keep targets inside a two-grade grading");
  try {
    c.routing.validate();
  } catch (const Error& e) {
    throw ConfigError("routing", e.what());
  }
  try {
    c.objective.validate();
  } catch (const Error& e) {
    throw ConfigError("objective", e.what());
  }
  try {
    c.train.validate();
  } catch (const Error& e) {
    throw ConfigError("train", e.what());
  }
  if (c.initial_threshold < 0.0) throw ConfigError("routing.initial_threshold", "must be nonnegative");
  if (c.data.train_sequences == 0 || c.data.eval_sequences == 0 || c.data.sequence_length == 0)
    throw ConfigError("data", "sizes must be positive");
  if (c.task == "modp") {
    if (c.modp.p < 2) throw ConfigError("modp.p", "must be at least 2");
    if (c.modp.a >= c.modp.p) throw ConfigError("modp.a", "must be below p");
    if (c.model.dim < c.modp.p) throw ConfigError("model.dim", "must hold a one-hot digit (dim >= p)");
  }
  if (c.task == "dyck" && (c.dyck.m < 3 || c.dyck.max_depth == 0)) throw ConfigError("dyck", "need m >= 3 and max_depth >= 1");
  if (c.task == "retrieval" && c.model.dim < 2 * c.retrieval.k) throw ConfigError("model.dim", "must be at least 2k for retrieval");
}

// ---------------------------------------------------------------------------
// Config <-> JSON. Unknown keys are rejected so typos surface as usage errors.
// ---------------------------------------------------------------------------
namespace detail {

inline void reject_unknown(const Json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "<root>" : where, "must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* n : known) ok = ok || k == n;
    if (!ok) throw ConfigError(where.empty() ? k : where + "." + k, "unknown field");
  }
}

template <class T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError(where.empty() ? key : where + "." + key, "has the wrong type");
  }
}

template <class F>
void read_enum(const Json& j, const char* key, F parse, const std::string& where) {
  if (!j.contains(key)) return;
  const std::string field = where + "." + key;
  if (!j.at(key).is_string()) throw ConfigError(field, "must be a string");
  try {
    parse(j.at(key).get<std::string>());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace detail

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["task"] = c.task;
  j["seed"] = c.seed;
  j["out"] = c.out;
  j["model"] = {{"layers", c.model.layers}, {"dim", c.model.dim},         {"heads", c.model.heads},
                {"d_q", c.model.d_q},       {"ffn_width", c.model.ffn_width}, {"band", c.model.band},
                {"norm", to_string(c.model.norm)}, {"lgt_sharing", c.model.lgt_sharing}, {"block_bias", c.model.block_bias}};
  j["routing"] = routing_to_json(c.routing);
  j["routing"]["initial_threshold"] = c.initial_threshold;
  j["objective"] = {{"lambda", c.objective.lambda},
                    {"mu_sp", c.objective.mu_sp},
                    {"beta", c.objective.beta ? Json(*c.objective.beta) : Json(nullptr)},
                    {"regularizer", to_string(c.objective.regularizer)},
                    {"learnable_thresholds", c.objective.learnable_thresholds}};
  j["train"] = {{"optimizer", to_string(c.train.optimizer)}, {"lr", c.train.lr},   {"batch_size", c.train.batch_size},
                {"steps", c.train.steps},                    {"clip", c.train.clip}, {"weight_decay", c.train.weight_decay}};
  j["data"] = {{"train_sequences", c.data.train_sequences},
               {"eval_sequences", c.data.eval_sequences},
               {"sequence_length", c.data.sequence_length}};
  j["modp"] = {{"p", c.modp.p}, {"a", c.modp.a}, {"scale", c.modp.scale}, {"freeze_program", c.modp.freeze_program}};
  j["dyck"] = {{"m", c.dyck.m}, {"max_depth", c.dyck.max_depth}, {"kappa", c.dyck.kappa}};
  j["retrieval"] = {{"k", c.retrieval.k},         {"sigma2", c.retrieval.sigma2},
                    {"kappa", c.retrieval.kappa}, {"query_scale", c.retrieval.query_scale},
                    {"noise", c.retrieval.noise}, {"learn_query", c.retrieval.learn_query}};
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read;
  detail::reject_unknown(j, "", {"task", "seed", "out", "model", "routing", "objective", "train", "data", "modp", "dyck", "retrieval"});
  std::string task = "modp";
  read(j, "task", task, "");
  ExperimentConfig c = default_config(task);
  read(j, "seed", c.seed, "");
  read(j, "out", c.out, "");
  if (j.contains("model")) {
    const Json& m = j["model"];
    detail::reject_unknown(m, "model", {"layers", "dim", "heads", "d_q", "ffn_width", "band", "norm", "lgt_sharing", "block_bias"});
    read(m, "layers", c.model.layers, "model");
    read(m, "dim", c.model.dim, "model");
    read(m, "heads", c.model.heads, "model");
    read(m, "d_q", c.model.d_q, "model");
    read(m, "ffn_width", c.model.ffn_width, "model");
    read(m, "band", c.model.band, "model");
    detail::read_enum(m, "norm", [&](const std::string& s) { c.model.norm = norm_kind_from(s); }, "model");
    read(m, "lgt_sharing", c.model.lgt_sharing, "model");
    read(m, "block_bias", c.model.block_bias, "model");
  }
  if (j.contains("routing")) {
    const Json& r = j["routing"];
    detail::reject_unknown(r, "routing", {"beta", "temperature", "gate", "utility_in_logits", "rank", "mode", "initial_threshold"});
    read(r, "beta", c.routing.beta, "routing");
    read(r, "temperature", c.routing.temperature, "routing");
    detail::read_enum(r, "gate", [&](const std::string& s) { c.routing.gate = gate_kind_from(s); }, "routing");
    read(r, "utility_in_logits", c.routing.utility_in_logits, "routing");
    read(r, "rank", c.routing.rank, "routing");
    detail::read_enum(r, "mode", [&](const std::string& s) { c.routing.mode = update_mode_from(s); }, "routing");
    read(r, "initial_threshold", c.initial_threshold, "routing");
  }
  if (j.contains("objective")) {
    const Json& o = j["objective"];
    detail::reject_unknown(o, "objective", {"lambda", "mu_sp", "beta", "regularizer", "learnable_thresholds"});
    read(o, "lambda", c.objective.lambda, "objective");
    read(o, "mu_sp", c.objective.mu_sp, "objective");
    if (o.contains("beta") && !o["beta"].is_null()) {
      double b = 0.0;
      read(o, "beta", b, "objective");
      c.objective.beta = b;
    }
    detail::read_enum(o, "regularizer", [&](const std::string& s) { c.objective.regularizer = regularizer_from(s); }, "objective");
    read(o, "learnable_thresholds", c.objective.learnable_thresholds, "objective");
  }
  if (j.contains("train")) {
    const Json& t = j["train"];
    detail::reject_unknown(t, "train", {"optimizer", "lr", "batch_size", "steps", "clip", "weight_decay"});
    detail::read_enum(t, "optimizer", [&](const std::string& s) { c.train.optimizer = optimizer_kind_from(s); }, "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "steps", c.train.steps, "train");
    read(t, "clip", c.train.clip, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
  }
  if (j.contains("data")) {
    const Json& d = j["data"];
    detail::reject_unknown(d, "data", {"train_sequences", "eval_sequences", "sequence_length"});
    read(d, "train_sequences", c.data.train_sequences, "data");
    read(d, "eval_sequences", c.data.eval_sequences, "data");
    read(d, "sequence_length", c.data.sequence_length, "data");
  }
  if (j.contains("modp")) {
    const Json& m = j["modp"];
    detail::reject_unknown(m, "modp", {"p", "a", "scale", "freeze_program"});
    read(m, "p", c.modp.p, "modp");
    read(m, "a", c.modp.a, "modp");
    read(m, "scale", c.modp.scale, "modp");
    read(m, "freeze_program", c.modp.freeze_program, "modp");
  }
  if (j.contains("dyck")) {
    const Json& d = j["dyck"];
    detail::reject_unknown(d, "dyck", {"m", "max_depth", "kappa"});
    read(d, "m", c.dyck.m, "dyck");
    read(d, "max_depth", c.dyck.max_depth, "dyck");
    read(d, "kappa", c.dyck.kappa, "dyck");
  }
  if (j.contains("retrieval")) {
    const Json& r = j["retrieval"];
    detail::reject_unknown(r, "retrieval", {"k", "sigma2", "kappa", "query_scale", "noise", "learn_query"});
    read(r, "k", c.retrieval.k, "retrieval");
    read(r, "sigma2", c.retrieval.sigma2, "retrieval");
    read(r, "kappa", c.retrieval.kappa, "retrieval");
    read(r, "query_scale", c.retrieval.query_scale, "retrieval");
    read(r, "noise", c.retrieval.noise, "retrieval");
    read(r, "learn_query", c.retrieval.learn_query, "retrieval");
  }
  c.train.seed = c.seed;
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Token datasets. Sequences are contiguous runs of tokens.
// ---------------------------------------------------------------------------
struct TokenRecord {
  std::size_t sequence = 0;
  std::size_t position = 0;
  std::size_t target = 0;
  std::size_t index = 0;  // digit (modp), symbol (dyck), key i* (retrieval)
  int delta = 0;          // dyck only
  std::size_t depth_before = 0;
  std::vector<double> input;  // ambient encoding
};

struct Dataset {
  std::string task;
  Grading grading;
  std::vector<TokenRecord> tokens;
  std::vector<std::size_t> starts;  // first token of each sequence, plus end sentinel

  std::size_t sequences() const { return starts.empty() ? 0 : starts.size() - 1; }

  Batch batch_of(const std::vector<std::size_t>& seqs) const {
    std::vector<std::size_t> rows;
    for (std::size_t s : seqs)
      for (std::size_t t = starts[s]; t < starts[s + 1]; ++t) rows.push_back(t);
    Tensor amb(rows.size(), grading.ambient_dim());
    Batch b;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const TokenRecord& r = tokens[rows[i]];
      for (std::size_t c = 0; c < amb.cols(); ++c) amb(i, c) = r.input[c];
      b.targets.push_back(r.target);
      b.sequence.push_back(r.sequence);
    }
    b.inputs = GradedVector::split(grading, amb);
    return b;
  }

  std::vector<std::size_t> token_rows(const std::vector<std::size_t>& seqs) const {
    std::vector<std::size_t> rows;
    for (std::size_t s : seqs)
      for (std::size_t t = starts[s]; t < starts[s + 1]; ++t) rows.push_back(t);
    return rows;
  }
};

// One JSON object per token. Field order per task:
//   modp:      seq, pos, digit, target
//   dyck:      seq, pos, symbol, delta, depth_before, target
//   retrieval: seq, pos, key, target, query
inline std::string dataset_to_jsonl(const Dataset& ds, const ExperimentConfig& cfg) {
  std::string out;
  for (const TokenRecord& r : ds.tokens) {
    Json j{{"seq", r.sequence}, {"pos", r.position}};
    if (ds.task == "modp") {
      j["digit"] = r.index;
      j["target"] = r.target;
    } else if (ds.task == "dyck") {
      j["symbol"] = r.index;
      j["delta"] = r.delta;
      j["depth_before"] = r.depth_before;
      j["target"] = r.target;
    } else {
      j["key"] = r.index;
      j["target"] = r.target;
      const std::size_t off = ds.grading.offset(0) + ds.grading.dim(0) - cfg.retrieval.k;
      j["query"] = std::vector<double>(r.input.begin() + static_cast<long>(off), r.input.begin() + static_cast<long>(off + cfg.retrieval.k));
    }
    out += j.dump() + "\n";
  }
  return out;
}

// Inverse of dataset_to_jsonl. The task is recognised from the record fields;
// the grading supplies the encoding layout (dyck m and retrieval k are grade
// dimensions).
inline Dataset dataset_from_jsonl(const std::string& text, const Grading& g) {
  Dataset ds{"", g, {}, {0}};
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "dataset line " + std::to_string(line_no);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw Error(where + ": " + e.what());
    }
    const std::string task = j.contains("digit") ? "modp" : j.contains("symbol") ? "dyck" : j.contains("key") ? "retrieval" : "";
    if (task.empty()) throw Error(where + ": no digit, symbol or key field");
    if (ds.task.empty()) ds.task = task;
    if (ds.task != task) throw Error(where + ": mixes " + ds.task + " and " + task + " records");
    TokenRecord r;
    r.sequence = j.at("seq").get<std::size_t>();
    r.position = j.at("pos").get<std::size_t>();
    r.target = j.at("target").get<std::size_t>();
    r.input.assign(g.ambient_dim(), 0.0);
    if (task == "modp") {
      r.index = j.at("digit").get<std::size_t>();
      if (r.index >= g.dim(0)) throw Error(where + ": digit exceeds the sem grade");
      r.input[g.offset(0) + r.index] = 1.0;
    } else if (task == "dyck") {
      r.index = j.at("symbol").get<std::size_t>();
      r.delta = j.at("delta").get<int>();
      r.depth_before = j.at("depth_before").get<std::size_t>();
      const std::size_t m = g.dim(1);
      if (r.index >= m) throw Error(where + ": symbol exceeds the alphabet");
      r.input[g.offset(0)] = static_cast<double>(r.depth_before);
      const Tensor enc = dyck_encode_symbol(r.index, m);
      for (std::size_t c = 0; c < m; ++c) r.input[g.offset(1) + c] = enc(0, c);
    } else {
      r.index = j.at("key").get<std::size_t>();
      const auto q = j.at("query").get<std::vector<double>>();
      const std::size_t k = g.dim(1);
      if (q.size() != k) throw Error(where + ": query length differs from the ret grade");
      const std::size_t off = g.offset(0) + g.dim(0) - k;
      for (std::size_t c = 0; c < k; ++c) r.input[off + c] = q[c];
    }
    if (!ds.tokens.empty() && r.sequence != ds.tokens.back().sequence) ds.starts.push_back(ds.tokens.size());
    ds.tokens.push_back(std::move(r));
  }
  if (ds.tokens.empty()) throw Error("dataset is empty");
  ds.starts.push_back(ds.tokens.size());
  // Sequence ids are positional in batch_of; renumber in file order.
  for (std::size_t s = 0; s + 1 < ds.starts.size(); ++s)
    for (std::size_t t = ds.starts[s]; t < ds.starts[s + 1]; ++t) ds.tokens[t].sequence = s;
  return ds;
}

namespace detail {

inline void close_sequence(Dataset& ds) { ds.starts.push_back(ds.tokens.size()); }

inline Dataset modp_data(const ExperimentConfig& c, const Grading& g, std::size_t n_seq, std::uint64_t seed) {
  Dataset ds{"modp", g, {}, {0}};
  const std::size_t L = c.data.sequence_length;
  const ModPDataset raw = gen_modp_dataset(c.modp.p, c.modp.a, n_seq * L, seed);
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t i = s * L + t;
      TokenRecord r{s, t, raw.targets[i], raw.digits[i], 0, 0, std::vector<double>(g.ambient_dim(), 0.0)};
      r.input[g.offset(0) + raw.digits[i]] = 1.0;
      ds.tokens.push_back(std::move(r));
    }
    close_sequence(ds);
  }
  return ds;
}

inline Dataset dyck_data(const ExperimentConfig& c, const Grading& g, std::size_t n_seq, std::uint64_t seed) {
  Dataset ds{"dyck", g, {}, {0}};
  const DyckDataset raw = gen_dyck_dataset(c.dyck.m, n_seq, c.dyck.max_depth, seed, c.data.sequence_length);
  for (std::size_t s = 0; s < raw.sequences.size(); ++s) {
    const DyckSequence& q = raw.sequences[s];
    for (std::size_t t = 0; t < q.symbols.size(); ++t) {
      TokenRecord r{s, t, q.depth_after[t], q.symbols[t], q.deltas[t], q.depth_before[t], std::vector<double>(g.ambient_dim(), 0.0)};
      r.input[g.offset(0)] = static_cast<double>(q.depth_before[t]);
      const Tensor enc = dyck_encode_symbol(q.symbols[t], c.dyck.m);
      for (std::size_t j = 0; j < c.dyck.m; ++j) r.input[g.offset(1) + j] = enc(0, j);
      ds.tokens.push_back(std::move(r));
    }
    close_sequence(ds);
  }
  return ds;
}

inline Dataset retrieval_data(const ExperimentConfig& c, const Grading& g, const Tensor& keys, std::size_t n_seq, std::uint64_t seed) {
  Dataset ds{"retrieval", g, {}, {0}};
  Rng rng(seed);
  const std::size_t k = c.retrieval.k, off = g.offset(0) + g.dim(0) - k;
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t t = 0; t < c.data.sequence_length; ++t) {
      const std::size_t key = rng.index(k);
      TokenRecord r{s, t, key, key, 0, 0, std::vector<double>(g.ambient_dim(), 0.0)};
      for (std::size_t j = 0; j < k; ++j) r.input[off + j] = c.retrieval.query_scale * keys(key, j) + rng.normal(0.0, c.retrieval.noise);
      ds.tokens.push_back(std::move(r));
    }
    close_sequence(ds);
  }
  return ds;
}

}  // namespace detail

// The edge whose behaviour the task's analysis singles out.
struct DesignatedEdge {
  std::size_t layer = 0;
  Edge edge;
};

inline DesignatedEdge designated_edge(const std::string& task, std::size_t layers) {
  if (task == "dyck") return {0, {1, 0}};
  return {layers - 1, {1, 0}};
}

struct Experiment {
  ExperimentConfig config;
  GradedModel model;
  Dataset train;
  Dataset eval;
  DesignatedEdge designated;
};

inline Tensor embed(const Tensor& small, std::size_t rows, std::size_t cols) {
  Tensor out(rows, cols);
  for (std::size_t i = 0; i < small.rows(); ++i)
    for (std::size_t j = 0; j < small.cols(); ++j) out(i, j) = small(i, j);
  return out;
}

inline Experiment build_experiment(const ExperimentConfig& c) {
  validate(c);
  ModelSpec spec;
  spec.layers = c.model.layers;
  spec.lgt_sharing = c.model.lgt_sharing;
  spec.block_bias = c.model.block_bias;
  spec.norm = c.model.norm;
  spec.routing = c.routing;
  spec.initial_threshold = c.initial_threshold;
  Tensor readout_w, readout_b;
  Tensor keys, query_proj;
  DesignatedEdge designated;

  if (c.task == "modp") {
    spec.grading = Grading({"sem", "num"}, {c.model.dim, c.model.dim});
    spec.classes = c.modp.p;
    readout_w = Tensor(c.modp.p, spec.grading.ambient_dim());
    for (std::size_t d = 0; d < c.modp.p; ++d) readout_w(d, d) = c.modp.scale;
    readout_b = Tensor(1, c.modp.p);
  } else if (c.task == "dyck") {
    spec.grading = Grading({"stack", "sem"}, {1, c.dyck.m});
    spec.classes = c.dyck.max_depth + 1;
    readout_w = Tensor(spec.classes, spec.grading.ambient_dim());
    readout_b = Tensor(1, spec.classes);
    for (std::size_t cl = 0; cl < spec.classes; ++cl) {
      const double cc = static_cast<double>(cl);
      readout_w(cl, 0) = 2.0 * c.dyck.kappa * cc;
      readout_b(0, cl) = -c.dyck.kappa * cc * cc;
    }
  } else {
    spec.grading = Grading({"sem", "ret"}, {c.model.dim, c.retrieval.k});
    spec.classes = c.retrieval.k;
    const RetrievalTask rt = make_retrieval_task(c.retrieval.k, c.model.dim, c.retrieval.sigma2, c.retrieval.kappa, derive_seed(c.seed, 11));
    keys = rt.keys;
    query_proj = rt.query_proj;
    spec.retrieval[{0, 1}] = RetrievalBlockSpec{keys, c.retrieval.sigma2};
    readout_w = Tensor(spec.classes, spec.grading.ambient_dim());
    for (std::size_t i = 0; i < c.retrieval.k; ++i) readout_w(i, i) = c.retrieval.kappa;
    readout_b = Tensor(1, spec.classes);
  }
  designated = designated_edge(c.task, c.model.layers);
  spec.edges = EdgeSet::banded(spec.grading, c.model.band);
  if (!spec.edges.contains(designated.edge)) throw ConfigError("model.band", "must admit the task's designated edge");
  GradedModel model(spec, derive_seed(c.seed, 1));
  model.set_readout(readout_w, readout_b, false);

  if (c.task == "retrieval" && !c.retrieval.learn_query) {
    // The read is the task's constructed morphism; routing and write-back learn.
    for (std::size_t l = 0; l < c.model.layers; ++l) model.set_block(l, {0, 1}, query_proj, true);
  }
  if (c.task == "retrieval") {
    // A random write-back starts some keys at negative utility; the margin term
    // then teaches the router to stop retrieving them, and their write-back
    // column never trains. Zero start keeps every utility at 0 initially.
    for (std::size_t l = 0; l < c.model.layers; ++l) model.set_block(l, {1, 0}, Tensor(c.model.dim, c.retrieval.k), false);
  }
  if (c.task == "modp" && c.modp.freeze_program) {
    const std::size_t d = c.model.dim;
    if (!spec.edges.contains({0, 1})) throw ConfigError("model.band", "freeze_program needs the sem->num edge");
    model.set_block(0, {0, 1}, embed(modp_shift_matrix(c.modp.p, c.modp.a), d, d), true);
    model.set_block(c.model.layers - 1, {1, 0}, Tensor::identity(d), true);
  }

  Experiment ex{c, std::move(model), {}, {}, designated};
  const std::uint64_t train_seed = derive_seed(c.seed, 2), eval_seed = derive_seed(c.seed, 3);
  if (c.task == "modp") {
    ex.train = detail::modp_data(c, spec.grading, c.data.train_sequences, train_seed);
    ex.eval = detail::modp_data(c, spec.grading, c.data.eval_sequences, eval_seed);
  } else if (c.task == "dyck") {
    ex.train = detail::dyck_data(c, spec.grading, c.data.train_sequences, train_seed);
    ex.eval = detail::dyck_data(c, spec.grading, c.data.eval_sequences, eval_seed);
  } else {
    ex.train = detail::retrieval_data(c, spec.grading, keys, c.data.train_sequences, train_seed);
    ex.eval = detail::retrieval_data(c, spec.grading, keys, c.data.eval_sequences, eval_seed);
  }
  return ex;
}

// Whole sequences drawn uniformly until the batch holds at least `tokens` tokens.
inline std::vector<std::size_t> sample_sequences(const Dataset& ds, std::size_t tokens, Rng& rng) {
  std::vector<std::size_t> seqs;
  std::size_t n = 0;
  while (n < tokens) {
    const std::size_t s = rng.index(ds.sequences());
    seqs.push_back(s);
    n += ds.starts[s + 1] - ds.starts[s];
  }
  return seqs;
}

inline Json metrics_to_json(const StepMetrics& m) {
  return Json{{"step", m.step},
              {"lm", m.objective.lm},
              {"margin", m.objective.margin},
              {"omega", m.objective.omega},
              {"regularizer", m.objective.regularizer},
              {"total", m.objective.total},
              {"entropy", m.objective.entropy},
              {"grad_norm", m.grad_norm},
              {"aborted", m.aborted},
              {"utility_mean", m.utility_mean},
              {"alpha_mean", m.alpha_mean}};
}

using StepCallback = std::function<void(const StepMetrics&)>;

// Runs cfg.train.steps optimizer steps; every step's metrics go to `on_step`.
inline void train(Experiment& ex, const StepCallback& on_step = {}) {
  Optimizer opt(ex.config.train);
  Rng rng(derive_seed(ex.config.seed, 4));
  for (std::size_t s = 0; s < ex.config.train.steps; ++s) {
    const Batch batch = ex.train.batch_of(sample_sequences(ex.train, ex.config.train.batch_size, rng));
    const StepMetrics m = train_step(ex.model, opt, batch, ex.config.objective);
    if (on_step) on_step(m);
  }
}

// Per-token routing quantities over a dataset, layer-major.
struct RoutingTrace {
  std::vector<Tensor> logits, utility, augmented, alpha;  // per layer, N x |E|
  Tensor token_loss;                                      // N x 1
  double lm = 0.0;                                        // mean token loss
};

// Chunks of whole sequences are evaluated on worker threads; results are
// stitched in chunk order, so the trace does not depend on scheduling.
inline RoutingTrace trace_dataset(const GradedModel& model, const Dataset& ds, const ForwardOptions& opt = {},
                                  std::size_t chunk_sequences = 32) {
  struct Chunk {
    std::vector<std::array<Tensor, 4>> values;
    Tensor loss;
  };
  const std::size_t n_chunks = (ds.sequences() + chunk_sequences - 1) / chunk_sequences;
  std::vector<Chunk> chunks(n_chunks);
  auto run = [&](std::size_t c) {
    std::vector<std::size_t> seqs;
    for (std::size_t s = c * chunk_sequences; s < std::min(ds.sequences(), (c + 1) * chunk_sequences); ++s) seqs.push_back(s);
    const Batch b = ds.batch_of(seqs);
    Tape tape;
    const ForwardResult f = model.forward(tape, model.bind(tape), b, opt);
    for (const LayerRecord& r : f.layers)
      chunks[c].values.push_back({r.logits.value(), r.utility.value(), r.augmented.value(), r.alpha.value()});
    chunks[c].loss = f.token_loss.value();
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(n_chunks, std::thread::hardware_concurrency()));
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t c = w; c < n_chunks; c += workers) run(c);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  RoutingTrace tr;
  std::vector<std::vector<Tensor>> parts(4 * model.layers());
  std::vector<Tensor> losses;
  for (const Chunk& ch : chunks) {
    for (std::size_t l = 0; l < model.layers(); ++l)
      for (std::size_t q = 0; q < 4; ++q) parts[4 * l + q].push_back(ch.values[l][q]);
    losses.push_back(ch.loss);
  }
  auto stack = [](const std::vector<Tensor>& ts) {
    std::size_t n = 0;
    for (const auto& t : ts) n += t.rows();
    Tensor out(n, ts.front().cols());
    std::size_t r = 0;
    for (const auto& t : ts)
      for (std::size_t i = 0; i < t.rows(); ++i, ++r)
        for (std::size_t j = 0; j < t.cols(); ++j) out(r, j) = t(i, j);
    return out;
  };
  for (std::size_t l = 0; l < model.layers(); ++l) {
    tr.logits.push_back(stack(parts[4 * l]));
    tr.utility.push_back(stack(parts[4 * l + 1]));
    tr.augmented.push_back(stack(parts[4 * l + 2]));
    tr.alpha.push_back(stack(parts[4 * l + 3]));
  }
  tr.token_loss = stack(losses);
  tr.lm = ops::sum(tr.token_loss) / static_cast<double>(tr.token_loss.rows());
  return tr;
}

// Tokens counted in the designated-edge utility statistics. Dyck neutral
// tokens are fixed points of the increment (ΔL ≡ 0) and are excluded.
inline std::vector<bool> utility_mask(const Dataset& ds) {
  std::vector<bool> m;
  for (const auto& t : ds.tokens) m.push_back(ds.task != "dyck" || t.delta != 0);
  return m;
}

struct EvalSummary {
  double lm = 0.0;
  double designated_mass = 0.0;      // mean α on the designated edge
  double designated_positive = 0.0;  // fraction of counted tokens with ΔL > 0
  double designated_utility = 0.0;   // mean ΔL on counted tokens
  std::size_t tokens = 0;
};

inline EvalSummary summarize(const RoutingTrace& tr, const GradedModel& model, const Dataset& ds, const DesignatedEdge& d) {
  const std::size_t k = *model.edges().index_of(d.edge);
  const auto mask = utility_mask(ds);
  EvalSummary s;
  s.lm = tr.lm;
  s.tokens = tr.token_loss.rows();
  std::size_t counted = 0, positive = 0;
  for (std::size_t i = 0; i < s.tokens; ++i) {
    s.designated_mass += tr.alpha[d.layer](i, k);
    if (!mask[i]) continue;
    ++counted;
    s.designated_utility += tr.utility[d.layer](i, k);
    if (tr.utility[d.layer](i, k) > 0.0) ++positive;
  }
  s.designated_mass /= static_cast<double>(s.tokens);
  s.designated_positive = counted ? static_cast<double>(positive) / static_cast<double>(counted) : 0.0;
  s.designated_utility = counted ? s.designated_utility / static_cast<double>(counted) : 0.0;
  return s;
}

inline Json summary_to_json(const EvalSummary& s) {
  return Json{{"lm", s.lm},
              {"designated_mass", s.designated_mass},
              {"designated_positive", s.designated_positive},
              {"designated_utility", s.designated_utility},
              {"tokens", s.tokens}};
}

}  // namespace graded
