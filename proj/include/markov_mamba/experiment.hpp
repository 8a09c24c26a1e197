#pragma once

// Experiment plumbing shared by the CLI and the acceptance runner: the JSON
// experiment config, run directories (config.json, metrics.csv,
// checkpoint.json) with resume, evaluation reports and the window-order sweep.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "markov_mamba/checkpoint.hpp"
#include "markov_mamba/errors.hpp"
#include "markov_mamba/metrics.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/training.hpp"

namespace markov_mamba {

namespace fs = std::filesystem;

struct OutputConfig {
  std::string root;    // empty: $MARKOV_MAMBA_OUT, else "out"
  std::string run_id;  // empty: derived from the config hash
};

struct ExperimentConfig {
  TrainConfig train;
  OutputConfig output;
};

inline std::string default_output_root() {
  const char* env = std::getenv("MARKOV_MAMBA_OUT");
  return env && *env ? std::string(env) : std::string("out");
}

inline std::string to_string(InitOptions::Scheme s) { return s == InitOptions::Scheme::kFanIn ? "fan_in" : "gaussian"; }

inline InitOptions::Scheme parse_init_scheme(const std::string& s) {
  if (s == "fan_in") return InitOptions::Scheme::kFanIn;
  if (s == "gaussian") return InitOptions::Scheme::kGaussian;
  throw ParameterError("init must be 'fan_in' or 'gaussian', got '" + s + "'");
}

inline json data_to_json(const DataConfig& d) {
  return json{{"k", d.order}, {"beta", d.beta}, {"T", d.length}, {"B", d.batch}, {"switching", d.switching},
              {"p_switch", d.p_switch}};
}

inline DataConfig data_from_json(const json& j) {
  detail::reject_unknown(j, {"k", "beta", "T", "B", "switching", "p_switch"}, "data config");
  DataConfig d;
  detail::read_opt(j, "k", d.order);
  detail::read_opt(j, "beta", d.beta);
  detail::read_opt(j, "T", d.length);
  detail::read_opt(j, "B", d.batch);
  detail::read_opt(j, "switching", d.switching);
  detail::read_opt(j, "p_switch", d.p_switch);
  d.validate();
  return d;
}

/// The resolved config with every field present; `output` omitted when `with_output` is false.
inline json experiment_to_json(const ExperimentConfig& c, bool with_output = true) {
  const TrainConfig& t = c.train;
  json j{{"model", config_to_json(t.model)},
         {"data", data_to_json(t.data)},
         {"train",
          {{"iterations", t.iterations},
           {"lr", t.adam.lr},
           {"lr_min", t.lr_min},
           {"beta1", t.adam.beta1},
           {"beta2", t.adam.beta2},
           {"adam_eps", t.adam.eps},
           {"weight_decay", t.adam.weight_decay},
           {"clip_norm", t.clip_norm},
           {"seed", t.seed},
           {"init", to_string(t.init.scheme)},
           {"init_std", t.init.std},
           {"init_output_scale", t.init.output_scale}}},
         {"eval", {{"every", t.eval_every}, {"batch", t.eval_batch}}}};
  if (with_output) j["output"] = {{"root", c.output.root}, {"run_id", c.output.run_id}};
  return j;
}

/// Parses a config on top of the defaults. Switching data implies a 3-symbol
/// model unless the model section sets the alphabet itself.
inline ExperimentConfig experiment_from_json(const json& j) {
  detail::reject_unknown(j, {"model", "data", "train", "eval", "output"}, "experiment config");
  ExperimentConfig c;
  TrainConfig& t = c.train;
  if (j.contains("data")) t.data = data_from_json(j.at("data"));
  json model = j.value("model", json::object());
  if (!model.is_object()) throw ParameterError("model config must be a JSON object");
  if (t.data.switching && !model.contains("alphabet")) model["alphabet"] = 3;
  t.model = config_from_json(model);
  if (j.contains("train")) {
    const json& tr = j.at("train");
    detail::reject_unknown(tr,
                           {"iterations", "lr", "lr_min", "beta1", "beta2", "adam_eps", "weight_decay", "clip_norm", "seed",
                            "init", "init_std", "init_output_scale"},
                           "train config");
    detail::read_opt(tr, "iterations", t.iterations);
    detail::read_opt(tr, "lr", t.adam.lr);
    detail::read_opt(tr, "lr_min", t.lr_min);
    detail::read_opt(tr, "beta1", t.adam.beta1);
    detail::read_opt(tr, "beta2", t.adam.beta2);
    detail::read_opt(tr, "adam_eps", t.adam.eps);
    detail::read_opt(tr, "weight_decay", t.adam.weight_decay);
    detail::read_opt(tr, "clip_norm", t.clip_norm);
    detail::read_opt(tr, "seed", t.seed);
    if (tr.contains("init")) t.init.scheme = parse_init_scheme(tr.at("init").get<std::string>());
    detail::read_opt(tr, "init_std", t.init.std);
    detail::read_opt(tr, "init_output_scale", t.init.output_scale);
  }
  if (j.contains("eval")) {
    const json& ev = j.at("eval");
    detail::reject_unknown(ev, {"every", "batch"}, "eval config");
    detail::read_opt(ev, "every", t.eval_every);
    detail::read_opt(ev, "batch", t.eval_batch);
  }
  if (j.contains("output")) {
    const json& out = j.at("output");
    detail::reject_unknown(out, {"root", "run_id"}, "output config");
    detail::read_opt(out, "root", c.output.root);
    detail::read_opt(out, "run_id", c.output.run_id);
  }
  t.validate();
  return c;
}

/// FNV-1a over the compact resolved config (output section excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : experiment_to_json(c, false).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline fs::path run_directory(const ExperimentConfig& c) {
  const std::string root = c.output.root.empty() ? default_output_root() : c.output.root;
  return fs::path(root) / (c.output.run_id.empty() ? "run-" + config_hash(c) : c.output.run_id);
}

// ---- metrics.csv -----------------------------------------------------------

inline std::vector<MetricRow> read_metrics_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  std::vector<MetricRow> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    MetricRow r;
    char c1, c2, c3, c4;
    std::istringstream ss(line);
    if (!(ss >> r.iter >> c1 >> r.lr >> c2 >> r.train_loss >> c3 >> r.eval_loss >> c4 >> r.loss_gap)) {
      throw ParameterError("malformed metrics row in " + path.string() + ": " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

inline void write_metrics_csv(const fs::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_metrics_header(out);
  for (const MetricRow& r : rows) write_metric_row(out, r);
}

// ---- runs ------------------------------------------------------------------

struct RunOutcome {
  fs::path dir;
  Checkpoint final;
  std::vector<MetricRow> metrics;
  double oracle_eval_loss = 0.0;
  bool cached = false;   // a finished checkpoint was found and reused
  bool resumed = false;  // continued from a partial checkpoint

  double final_gap() const { return metrics.empty() ? std::nan("") : metrics.back().loss_gap; }
};

struct RunOptions {
  bool resume = true;
  std::function<void(const MetricRow&)> progress;
};

/// Trains `cfg` in `dir`. A finished checkpoint is reused as is; a partial one
/// is resumed, keeping only the metrics rows it covers.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const fs::path& dir, const RunOptions& opt = {}) {
  cfg.train.validate();
  fs::create_directories(dir);
  const json resolved = experiment_to_json(cfg, false);
  const fs::path config_path = dir / "config.json";
  const fs::path ckpt_path = dir / "checkpoint.json";
  const fs::path metrics_path = dir / "metrics.csv";
  if (fs::exists(config_path)) {
    json previous = read_json_file(config_path);
    previous.erase("output");
    if (previous != resolved) {
      if (opt.resume) throw ParameterError("run directory " + dir.string() + " holds a different config");
      fs::remove(ckpt_path);
    }
  }
  json echoed = experiment_to_json(cfg);
  write_json_file(config_path, echoed);

  RunOutcome out;
  out.dir = dir;
  std::optional<Checkpoint> resume;
  if (opt.resume && fs::exists(ckpt_path)) {
    resume = load_checkpoint(ckpt_path);
    std::vector<MetricRow> rows = fs::exists(metrics_path) ? read_metrics_csv(metrics_path) : std::vector<MetricRow>{};
    std::erase_if(rows, [&](const MetricRow& r) { return r.iter > resume->iteration; });
    if (resume->iteration == cfg.train.iterations) {
      out.final = *resume;
      out.metrics = rows;
      out.oracle_eval_loss = cfg.train.data.oracle_loss_on(eval_batch_for(cfg.train));
      out.cached = true;
      return out;
    }
    write_metrics_csv(metrics_path, rows);
    out.metrics = rows;
    out.resumed = true;
  } else {
    write_metrics_csv(metrics_path, {});
  }

  TrainHooks hooks;
  hooks.on_eval = [&](const MetricRow& row, const Checkpoint& ckpt) {
    {
      std::ofstream m(metrics_path, std::ios::app);
      write_metric_row(m, row);
    }
    save_checkpoint(ckpt_path, ckpt);
    out.metrics.push_back(row);
    if (opt.progress) opt.progress(row);
  };
  TrainResult result = train(cfg.train, hooks, resume);
  out.final = Checkpoint{cfg.train.model, result.params, result.optimizer, cfg.train.iterations};
  out.oracle_eval_loss = result.oracle_eval_loss;
  return out;
}

// ---- evaluation ------------------------------------------------------------

struct EvalReport {
  double model_loss = 0.0;
  double oracle_loss = 0.0;
  double loss_gap = 0.0;
  std::optional<double> l1;  // binary data only
  std::optional<MatchCurve> curve0, curve1;
  std::optional<AtSummary> at;  // model predictors only
  std::optional<AtTrajectory> trajectory;
  std::size_t sequences = 0;

  json to_json() const {
    json j{{"model_loss", model_loss}, {"oracle_loss", oracle_loss}, {"loss_gap", loss_gap}, {"sequences", sequences}};
    if (l1) j["l1_distance"] = *l1;
    if (curve0) j["match_curve_x0_max_abs_gap"] = curve0->max_abs_gap();
    if (curve1) j["match_curve_x1_max_abs_gap"] = curve1->max_abs_gap();
    if (at) {
      j["mean_a_t"] = at->mean_all;
      j["mean_a_t_other"] = at->mean_other;
      j["switch_positions"] = at->switch_count;
      if (at->switch_count) j["mean_a_t_switch"] = at->mean_switch;
    }
    return j;
  }
};

/// Metrics of `predictor` on `seqs`; match curves and the a_t trajectory use seqs[0].
inline EvalReport evaluate_predictor(const Predictor& predictor, const MambaModel* model, const DataConfig& data,
                                     std::span<const TokenSequence> seqs, std::size_t at_from = 10) {
  if (seqs.empty()) throw ContractError("no evaluation sequences");
  EvalReport r;
  r.sequences = seqs.size();
  r.model_loss = predictor_loss(predictor, seqs, data.order);
  r.oracle_loss = data.oracle_loss_on(seqs);
  r.loss_gap = std::abs(r.model_loss - r.oracle_loss);
  if (!data.switching) {
    r.l1 = l1_distance(predictor, seqs, data.order, data.beta);
    r.curve0 = match_curve(predictor, seqs[0], data.order, data.beta, kZero);
    r.curve1 = match_curve(predictor, seqs[0], data.order, data.beta, kOne);
  }
  if (model) {
    r.at = summarize_at(*model, seqs, at_from);
    r.trajectory = at_trajectory(*model, seqs[0]);
  }
  return r;
}

inline std::unique_ptr<Predictor> oracle_predictor(const DataConfig& data) {
  if (data.switching) return std::make_unique<SwitchingOraclePredictor>(data.order, data.beta, data.p_switch);
  return std::make_unique<OraclePredictor>(data.order, data.beta);
}

/// Writes eval.json, match_curve_x0.csv, match_curve_x1.csv and at_trajectory.csv into `dir`.
inline void write_eval_outputs(const fs::path& dir, const EvalReport& r, const TokenSequence& first) {
  fs::create_directories(dir);
  write_json_file(dir / "eval.json", r.to_json());
  if (r.curve0) {
    std::ofstream f(dir / "match_curve_x0.csv");
    write_match_curve_csv(f, *r.curve0);
  }
  if (r.curve1) {
    std::ofstream f(dir / "match_curve_x1.csv");
    write_match_curve_csv(f, *r.curve1);
  }
  if (r.trajectory) {
    std::ofstream f(dir / "at_trajectory.csv");
    write_at_csv(f, *r.trajectory, first);
  }
}

// ---- window-order sweep ----------------------------------------------------

struct SweepCell {
  int order = 1;
  std::size_t window = 2;
  std::uint64_t seed = 0;
  std::string status = "pending";  // pass | fail | error | pending
  double gap = std::nan("");
  std::string error;
  std::string dir;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  double threshold = 0.05;

  json to_json() const {
    json cells_j = json::array();
    for (const SweepCell& c : cells) {
      json cj{{"k", c.order}, {"w", c.window}, {"seed", c.seed}, {"status", c.status}, {"dir", c.dir}};
      cj["loss_gap"] = std::isfinite(c.gap) ? json(c.gap) : json(nullptr);
      if (!c.error.empty()) cj["error"] = c.error;
      cells_j.push_back(cj);
    }
    return json{{"threshold", threshold}, {"cells", cells_j}};
  }
};

struct SweepOptions {
  std::size_t jobs = 1;
  double threshold = 0.05;
  std::function<void(const SweepCell&)> on_cell;
};

/// Trains one model per (k, w, seed) cell under `root`/cells/ and marks it
/// pass when its final held-out loss gap is <= threshold. Cells run on up to
/// `jobs` threads; finished cells are reused on a re-run, partial ones resumed.
inline SweepResult window_order_sweep(const std::vector<int>& orders, const std::vector<std::size_t>& windows,
                                      const std::vector<std::uint64_t>& seeds, const ExperimentConfig& base,
                                      const fs::path& root, const SweepOptions& opt = {}) {
  if (orders.empty() || windows.empty() || seeds.empty()) throw ParameterError("sweep grid must be non-empty");
  for (int k : orders) {
    if (k < 1) throw ParameterError("sweep orders must be >= 1");
  }
  for (std::size_t w : windows) {
    if (w < 1) throw ParameterError("sweep windows must be >= 1");
  }
  SweepResult result;
  result.threshold = opt.threshold;
  for (int k : orders) {
    for (std::size_t w : windows) {
      for (std::uint64_t s : seeds) {
        SweepCell c;
        c.order = k;
        c.window = w;
        c.seed = s;
        c.dir = (fs::path("cells") / ("k" + std::to_string(k) + "_w" + std::to_string(w) + "_s" + std::to_string(s))).string();
        result.cells.push_back(c);
      }
    }
  }
  fs::create_directories(root);
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < result.cells.size(); i = next++) {
      SweepCell cell;
      {
        std::lock_guard lock(mu);
        cell = result.cells[i];
      }
      try {
        ExperimentConfig cfg = base;
        cfg.train.data.order = cell.order;
        cfg.train.model.set_window(cell.window);
        cfg.train.seed = cell.seed;
        const RunOutcome run = run_experiment(cfg, root / cell.dir);
        cell.gap = run.final_gap();
        cell.status = cell.gap <= opt.threshold ? "pass" : "fail";
      } catch (const std::exception& e) {
        cell.status = "error";
        cell.error = e.what();
      }
      std::lock_guard lock(mu);
      result.cells[i] = cell;
      write_json_file(root / "sweep.json", result.to_json());
      if (opt.on_cell) opt.on_cell(cell);
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(opt.jobs, 1, result.cells.size());
  std::vector<std::jthread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  pool.clear();
  write_json_file(root / "sweep.json", result.to_json());
  return result;
}

}  // namespace markov_mamba
