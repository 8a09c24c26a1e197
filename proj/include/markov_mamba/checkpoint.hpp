#pragma once

// JSON serialization of model configs, parameters and optimizer state.
// Doubles are written with round-trip precision, so save/load is bit-exact.

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/tensor.hpp"

namespace markov_mamba {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ParameterError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ParameterError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline std::string to_string(Variant v) { return v == Variant::kFull ? "full" : "zero"; }
inline std::string to_string(Head h) { return h == Head::kSoftmax ? "softmax" : "l1norm"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::kFull;
  if (s == "zero") return Variant::kZero;
  throw ParameterError("variant must be 'full' or 'zero', got '" + s + "'");
}

inline Head parse_head(const std::string& s) {
  if (s == "softmax") return Head::kSoftmax;
  if (s == "l1norm") return Head::kL1Norm;
  throw ParameterError("prediction head must be 'softmax' or 'l1norm', got '" + s + "'");
}

inline json config_to_json(const MambaConfig& c) {
  return json{{"d", c.d},
              {"N", c.n_state},
              {"e", c.expand},
              {"w_X", c.window_x},
              {"w_B", c.window_b},
              {"w_C", c.window_c},
              {"variant", to_string(c.variant)},
              {"prediction_head", to_string(c.head)},
              {"use_conv", c.use_conv},
              {"use_relu", c.use_relu},
              {"use_gating", c.use_gating},
              {"additive_mlp", c.additive_mlp},
              {"alphabet", c.alphabet},
              {"l1_floor", c.l1_floor}};
}

/// Reads a model config on top of defaults. "w" sets all three windows; a
/// zero variant defaults to the L1 head without ReLU and gating.
inline MambaConfig config_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"d", "N", "e", "w", "w_X", "w_B", "w_C", "variant", "prediction_head", "use_conv", "use_relu",
                          "use_gating", "additive_mlp", "alphabet", "l1_floor"},
                         "model config");
  MambaConfig c;
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  if (c.variant == Variant::kZero) {
    c.head = Head::kL1Norm;
    c.use_relu = false;
    c.use_gating = false;
  }
  detail::read_opt(j, "d", c.d);
  detail::read_opt(j, "N", c.n_state);
  detail::read_opt(j, "e", c.expand);
  if (j.contains("w")) c.set_window(j.at("w").get<std::size_t>());
  detail::read_opt(j, "w_X", c.window_x);
  detail::read_opt(j, "w_B", c.window_b);
  detail::read_opt(j, "w_C", c.window_c);
  if (j.contains("prediction_head")) c.head = parse_head(j.at("prediction_head").get<std::string>());
  detail::read_opt(j, "use_conv", c.use_conv);
  detail::read_opt(j, "use_relu", c.use_relu);
  detail::read_opt(j, "use_gating", c.use_gating);
  detail::read_opt(j, "additive_mlp", c.additive_mlp);
  detail::read_opt(j, "alphabet", c.alphabet);
  detail::read_opt(j, "l1_floor", c.l1_floor);
  c.validate();
  return c;
}

inline json tensor_to_json(const Tensor& t) {
  return json{{"shape", {t.rows(), t.cols()}}, {"data", t.storage()}};
}

inline Tensor tensor_from_json(const json& j, const std::string& name) {
  detail::reject_unknown(j, {"shape", "data"}, "tensor '" + name + "'");
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw StructuralError("tensor '" + name + "' needs a 2-entry shape");
  return Tensor({shape[0], shape[1]}, j.at("data").get<std::vector<double>>());
}

inline json params_to_json(const MambaParams& p) {
  json j = json::object();
  p.for_each([&](const std::string& name, const Tensor& t) { j[name] = tensor_to_json(t); });
  return j;
}

inline MambaParams params_from_json(const json& j, const MambaConfig& cfg) {
  MambaParams p;
  for (const auto& [name, value] : j.items()) p.slot(name) = tensor_from_json(value, name);
  check_params(p, cfg);
  return p;
}

struct OptimizerState {
  std::map<std::string, Tensor> m, v;
  std::size_t step = 0;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

inline json optimizer_to_json(const OptimizerState& s) {
  json m = json::object(), v = json::object();
  for (const auto& [name, t] : s.m) m[name] = tensor_to_json(t);
  for (const auto& [name, t] : s.v) v[name] = tensor_to_json(t);
  return json{{"step", s.step}, {"m", m}, {"v", v}};
}

inline OptimizerState optimizer_from_json(const json& j) {
  detail::reject_unknown(j, {"step", "m", "v"}, "optimizer state");
  OptimizerState s;
  s.step = j.at("step").get<std::size_t>();
  for (const auto& [name, t] : j.at("m").items()) s.m[name] = tensor_from_json(t, name);
  for (const auto& [name, t] : j.at("v").items()) s.v[name] = tensor_from_json(t, name);
  return s;
}

struct Checkpoint {
  MambaConfig config;
  MambaParams params;
  std::optional<OptimizerState> optimizer;
  std::size_t iteration = 0;  // optimizer steps taken
};

inline json checkpoint_to_json(const Checkpoint& c) {
  json j{{"config", config_to_json(c.config)}, {"params", params_to_json(c.params)}, {"iteration", c.iteration}};
  if (c.optimizer) j["optimizer"] = optimizer_to_json(*c.optimizer);
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
  detail::reject_unknown(j, {"config", "params", "iteration", "optimizer"}, "checkpoint");
  Checkpoint c;
  c.config = config_from_json(j.at("config"));
  c.params = params_from_json(j.at("params"), c.config);
  detail::read_opt(j, "iteration", c.iteration);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
  return c;
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << j.dump(1) << '\n';
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParameterError(path.string() + ": " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_json_file(path, checkpoint_to_json(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_json_file(path));
}

}  // namespace markov_mamba
