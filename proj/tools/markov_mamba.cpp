// markov_mamba: data generation, training, evaluation, construction
// certificates and window-order sweeps.
//
// Exit codes: 0 success or certified, 1 certification failure or aborted
// run, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "markov_mamba/checkpoint.hpp"
#include "markov_mamba/construction.hpp"
#include "markov_mamba/errors.hpp"
#include "markov_mamba/experiment.hpp"
#include "markov_mamba/metrics.hpp"
#include "markov_mamba/training.hpp"

namespace mm = markov_mamba;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

mm::ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return mm::experiment_from_json(mm::json::object());
  if (!fs::exists(path)) throw UsageError("config file not found: " + path);
  return mm::experiment_from_json(mm::read_json_file(path));
}

// ---- gen-data ----------------------------------------------------------------

struct GenDataArgs {
  std::string config, manifest, out;
  std::optional<int> k;
  std::optional<double> beta, p_switch;
  std::optional<std::size_t> length, batch;
  std::optional<std::uint64_t> seed;
  bool switching = false;
};

int cmd_gen_data(const GenDataArgs& a) {
  mm::DataConfig data;
  std::uint64_t seed = 0;
  if (!a.manifest.empty()) {
    if (!fs::exists(a.manifest)) throw UsageError("manifest not found: " + a.manifest);
    const mm::json m = mm::read_json_file(a.manifest);
    mm::detail::reject_unknown(m, {"data", "seed", "sequences", "count"}, "manifest");
    data = mm::data_from_json(m.at("data"));
    seed = m.at("seed").get<std::uint64_t>();
  } else {
    const mm::ExperimentConfig cfg = load_config(a.config);
    data = cfg.train.data;
    seed = cfg.train.seed;
  }
  if (a.k) data.order = *a.k;
  if (a.beta) data.beta = *a.beta;
  if (a.length) data.length = *a.length;
  if (a.batch) data.batch = *a.batch;
  if (a.switching) data.switching = true;
  if (a.p_switch) data.p_switch = *a.p_switch;
  if (a.seed) seed = *a.seed;
  data.validate();

  const auto seqs = data.sample(data.batch, mm::derive_seed(seed, {mm::stream::kTest}));
  const fs::path dir = a.out.empty() ? fs::path(mm::default_output_root()) / ("data-s" + std::to_string(seed)) : fs::path(a.out);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "sequences.txt");
    if (!f) throw UsageError("cannot write " + (dir / "sequences.txt").string());
    for (const auto& s : seqs) f << mm::to_line(s) << '\n';
  }
  mm::write_json_file(dir / "manifest.json", mm::json{{"data", mm::data_to_json(data)},
                                                      {"seed", seed},
                                                      {"sequences", "sequences.txt"},
                                                      {"count", seqs.size()}});
  std::cout << "wrote " << seqs.size() << " sequences to " << (dir / "sequences.txt").string() << '\n';
  return kOk;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config, run_id, out_root;
  std::vector<std::string> ablate;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  bool fresh = false;
  bool quiet = false;
};

void apply_ablations(mm::MambaConfig& m, const std::vector<std::string>& ablate) {
  for (const std::string& a : ablate) {
    if (a == "no-conv") {
      m.use_conv = false;
    } else if (a == "no-relu") {
      m.use_relu = false;
    } else if (a == "no-gating") {
      m.use_gating = false;
    } else {
      throw mm::ParameterError("unknown ablation '" + a + "' (no-conv, no-relu, no-gating)");
    }
  }
  m.validate();
}

int cmd_train(const TrainArgs& a) {
  mm::ExperimentConfig cfg = load_config(a.config);
  apply_ablations(cfg.train.model, a.ablate);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.iterations) cfg.train.iterations = *a.iterations;
  if (!a.run_id.empty()) cfg.output.run_id = a.run_id;
  if (!a.out_root.empty()) cfg.output.root = a.out_root;
  cfg.train.validate();
  const fs::path dir = mm::run_directory(cfg);

  mm::RunOptions opt;
  opt.resume = !a.fresh;
  if (!a.quiet) {
    opt.progress = [](const mm::MetricRow& r) {
      std::printf("iter %6zu  lr %.3e  train %.5f  eval %.5f  gap %.5f\n", r.iter, r.lr, r.train_loss, r.eval_loss,
                  r.loss_gap);
      std::fflush(stdout);
    };
  }
  const mm::RunOutcome run = mm::run_experiment(cfg, dir, opt);
  std::cout << (run.cached ? "reused finished run " : "finished run ") << dir.string() << "  final gap "
            << run.final_gap() << '\n';
  return kOk;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, config, out;
};

int cmd_eval(const EvalArgs& a) {
  const bool sentinel = a.checkpoint == "oracle" || a.checkpoint == "uniform";
  if (!sentinel && !fs::exists(a.checkpoint)) throw UsageError("checkpoint not found: " + a.checkpoint);
  std::string config_path = a.config;
  if (config_path.empty() && !sentinel) {
    const fs::path sibling = fs::path(a.checkpoint).parent_path() / "config.json";
    if (fs::exists(sibling)) config_path = sibling.string();
  }
  const mm::ExperimentConfig cfg = load_config(config_path);
  const mm::DataConfig& data = cfg.train.data;
  const auto seqs = mm::eval_batch_for(cfg.train);

  std::unique_ptr<mm::Predictor> predictor;
  std::optional<mm::MambaModel> model;
  if (a.checkpoint == "oracle") {
    predictor = mm::oracle_predictor(data);
  } else if (a.checkpoint == "uniform") {
    predictor = std::make_unique<mm::UniformPredictor>(data.switching ? 3 : 2);
  } else {
    const mm::Checkpoint ckpt = mm::load_checkpoint(a.checkpoint);
    if (ckpt.config.alphabet != (data.switching ? 3u : 2u)) throw mm::ParameterError("checkpoint alphabet does not match the data");
    model.emplace(ckpt.config, ckpt.params);
    predictor = std::make_unique<mm::ModelPredictor>(*model);
  }
  const mm::EvalReport report = mm::evaluate_predictor(*predictor, model ? &*model : nullptr, data, seqs);
  fs::path dir = a.out;
  if (dir.empty()) {
    dir = sentinel ? fs::path(mm::default_output_root()) / ("eval-" + a.checkpoint) : fs::path(a.checkpoint).parent_path() / "eval";
  }
  mm::write_eval_outputs(dir, report, seqs.front());
  std::cout << report.to_json().dump(1) << '\n';
  return kOk;
}

// ---- verify-construction -----------------------------------------------------

struct VerifyArgs {
  double beta = 1.0;
  double epsilon = 0.01;
  std::size_t tmax = 16;
  double perturb = 0.0;
  std::string run_id, out_root;
};

int cmd_verify(const VerifyArgs& a) {
  if (!(a.epsilon > 0.0 && a.epsilon < 1.0)) throw UsageError("--epsilon must lie in (0,1)");
  if (!(a.beta > 0.0)) throw UsageError("--beta must be > 0");
  if (a.tmax < 1 || a.tmax > 26) throw UsageError("--tmax must lie in [1, 26]");
  mm::MambaParams params = mm::build_theorem1_params(a.beta, a.epsilon);
  if (a.perturb != 0.0) params = mm::perturb_alpha0(params, a.perturb);
  const mm::Certificate cert = mm::verify_construction(params, a.beta, a.epsilon, a.tmax);

  mm::ExperimentConfig cfg;
  cfg.train.model = mm::theorem_config();
  cfg.train.data.order = 1;
  cfg.train.data.beta = a.beta;
  cfg.output.root = a.out_root;
  char id[96];
  std::snprintf(id, sizeof id, "construction-b%g-e%g-t%zu%s", a.beta, a.epsilon, a.tmax, a.perturb != 0.0 ? "-perturbed" : "");
  cfg.output.run_id = a.run_id.empty() ? id : a.run_id;
  const fs::path dir = mm::run_directory(cfg);
  mm::write_json_file(dir / "config.json", mm::experiment_to_json(cfg));
  mm::save_checkpoint(dir / "checkpoint.json", mm::Checkpoint{cfg.train.model, params, std::nullopt, 0});
  mm::json j{{"beta", cert.beta},
             {"epsilon", cert.epsilon},
             {"t_max", cert.t_max},
             {"perturb_alpha0", a.perturb},
             {"valid", cert.valid()},
             {"max_kl", cert.max_kl},
             {"witness", cert.witness},
             {"witness_t", cert.witness_t},
             {"max_kl_same_ends", cert.max_kl_same_ends},
             {"max_kl_different_ends", cert.max_kl_different_ends},
             {"exact_match_count", cert.exact_match_count},
             {"different_ends_count", cert.different_ends_count},
             {"positions", cert.positions},
             {"runtime_seconds", cert.runtime_seconds}};
  if (!cert.failure.empty()) j["failure"] = cert.failure;
  mm::write_json_file(dir / "certificate.json", j);
  std::cout << j.dump(1) << '\n';
  std::cout << (cert.valid() ? "certified" : "NOT certified") << ": max KL " << cert.max_kl << " vs epsilon " << a.epsilon
            << "  (" << (dir / "certificate.json").string() << ")\n";
  return cert.valid() ? kOk : kFailure;
}

// ---- sweep -------------------------------------------------------------------

struct SweepArgs {
  std::string grid, config, sweep_id, out_root;
  std::vector<int> orders;
  std::vector<std::size_t> windows;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> iterations;
  std::size_t jobs = 1;
  double threshold = 0.05;
};

int cmd_sweep(SweepArgs a) {
  mm::ExperimentConfig base = load_config(a.config);
  if (!a.grid.empty()) {
    if (!fs::exists(a.grid)) throw UsageError("grid file not found: " + a.grid);
    const mm::json g = mm::read_json_file(a.grid);
    mm::detail::reject_unknown(g, {"base", "orders", "windows", "seeds", "threshold"}, "sweep grid");
    if (g.contains("base")) base = mm::experiment_from_json(g.at("base"));
    if (a.orders.empty() && g.contains("orders")) a.orders = g.at("orders").get<std::vector<int>>();
    if (a.windows.empty() && g.contains("windows")) a.windows = g.at("windows").get<std::vector<std::size_t>>();
    if (a.seeds.empty() && g.contains("seeds")) a.seeds = g.at("seeds").get<std::vector<std::uint64_t>>();
    if (g.contains("threshold")) a.threshold = g.at("threshold").get<double>();
  }
  if (a.orders.empty()) a.orders = {1, 2};
  if (a.windows.empty()) a.windows = {2, 3};
  if (a.seeds.empty()) a.seeds = {0, 1, 2};
  if (a.iterations) base.train.iterations = *a.iterations;
  if (!a.out_root.empty()) base.output.root = a.out_root;
  base.train.validate();

  mm::ExperimentConfig id_cfg = base;
  id_cfg.output.run_id = a.sweep_id.empty() ? "sweep-" + mm::config_hash(base) : a.sweep_id;
  const fs::path root = mm::run_directory(id_cfg);
  mm::SweepOptions opt;
  opt.jobs = a.jobs;
  opt.threshold = a.threshold;
  opt.on_cell = [](const mm::SweepCell& c) {
    std::printf("k=%d w=%zu seed=%llu  %-5s gap %.5f %s\n", c.order, c.window, static_cast<unsigned long long>(c.seed),
                c.status.c_str(), c.gap, c.error.c_str());
    std::fflush(stdout);
  };
  const mm::SweepResult r = mm::window_order_sweep(a.orders, a.windows, a.seeds, base, root, opt);
  std::cout << "sweep written to " << (root / "sweep.json").string() << '\n';
  for (const auto& c : r.cells) {
    if (c.status == "error") return kFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mamba models learning the add-beta estimator on random Markov chains"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "sample Markov sequences to a text file with a JSON manifest");
  g->add_option("--config", gen.config, "experiment config JSON");
  g->add_option("--manifest", gen.manifest, "reproduce the data recorded in a manifest");
  g->add_option("--out", gen.out, "output directory");
  g->add_option("-k,--order", gen.k, "Markov order");
  g->add_option("--beta", gen.beta, "Dirichlet parameter");
  g->add_option("-T,--length", gen.length, "sequence length");
  g->add_option("-B,--batch", gen.batch, "number of sequences");
  g->add_option("--seed", gen.seed, "root seed");
  g->add_flag("--switching", gen.switching, "switching chains over {0,1,S}");
  g->add_option("--p-switch", gen.p_switch, "switch probability");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model; resumes from an existing checkpoint in the run directory");
  t->add_option("--config", tr.config, "experiment config JSON");
  t->add_option("--ablate", tr.ablate, "no-conv, no-relu or no-gating (repeatable)");
  t->add_option("--seed", tr.seed, "root seed");
  t->add_option("--iterations", tr.iterations, "optimizer steps");
  t->add_option("--run-id", tr.run_id, "run directory name (default: config hash)");
  t->add_option("--out-root", tr.out_root, "output root (default: $MARKOV_MAMBA_OUT or out)");
  t->add_flag("--fresh", tr.fresh, "ignore an existing checkpoint");
  t->add_flag("--quiet", tr.quiet, "no per-eval progress lines");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "match curves, L1 distance, loss gap and a_t of a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint.json, or 'oracle' / 'uniform'")->required();
  e->add_option("--config", ev.config, "experiment config (default: config.json beside the checkpoint)");
  e->add_option("--out", ev.out, "output directory (default: <run>/eval)");

  VerifyArgs vf;
  auto* v = app.add_subcommand("verify-construction", "certify the explicit MambaZero add-beta construction");
  v->add_option("--beta", vf.beta, "Dirichlet parameter");
  v->add_option("--epsilon", vf.epsilon, "KL tolerance in (0,1)");
  v->add_option("--tmax", vf.tmax, "enumerate all binary sequences up to this length");
  v->add_option("--perturb", vf.perturb, "scale alpha_0 by (1 + value) before verifying");
  v->add_option("--run-id", vf.run_id, "run directory name");
  v->add_option("--out-root", vf.out_root, "output root");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "train a (k, w, seed) grid and mark cells by final loss gap");
  s->add_option("--grid", sw.grid, "grid JSON {base, orders, windows, seeds, threshold}");
  s->add_option("--config", sw.config, "base experiment config");
  s->add_option("--orders", sw.orders, "Markov orders")->delimiter(',');
  s->add_option("--windows", sw.windows, "convolution windows")->delimiter(',');
  s->add_option("--seeds", sw.seeds, "seeds")->delimiter(',');
  s->add_option("--iterations", sw.iterations, "optimizer steps per cell");
  s->add_option("--jobs", sw.jobs, "cells trained in parallel")->check(CLI::PositiveNumber);
  s->add_option("--threshold", sw.threshold, "pass when final gap <= threshold");
  s->add_option("--sweep-id", sw.sweep_id, "sweep directory name");
  s->add_option("--out-root", sw.out_root, "output root");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*v) return cmd_verify(vf);
    if (*s) return cmd_sweep(sw);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const mm::ParameterError& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kUsage;
  } catch (const mm::json::exception& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "aborted: " << err.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
