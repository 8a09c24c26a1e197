#pragma once

// Next-token cross-entropy training with AdamW, a cosine schedule and global
// norm clipping. Every iteration draws a fresh batch (new kernels and tokens)
// from a stream derived from the seed and the iteration index, so runs are
// deterministic and resumable from any checkpoint.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "markov_mamba/checkpoint.hpp"
#include "markov_mamba/errors.hpp"
#include "markov_mamba/graph.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/oracle.hpp"
#include "markov_mamba/rng.hpp"

namespace markov_mamba {

struct DataConfig {
  int order = 1;          // k
  double beta = 1.0;
  std::size_t length = 256;  // T
  std::size_t batch = 64;    // B
  bool switching = false;
  double p_switch = 0.01;

  void validate() const {
    if (order < 1) throw ParameterError("order k must be >= 1");
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
    if (length <= static_cast<std::size_t>(order)) throw ParameterError("sequence length must exceed k");
    if (batch < 1) throw ParameterError("batch size must be >= 1");
    if (switching && !(p_switch >= 0.0 && p_switch <= 1.0)) throw ParameterError("p_switch must lie in [0,1]");
  }

  std::vector<TokenSequence> sample(std::size_t count, std::uint64_t seed) const {
    if (!switching) return sample_batch(order, beta, length, count, seed);
    return sample_switching_batch(SwitchingConfig{order, beta, p_switch, length}, count, seed);
  }

  double oracle_loss_on(std::span<const TokenSequence> seqs) const {
    return switching ? switching_oracle_loss(seqs, order, beta, p_switch) : oracle_loss(seqs, order, beta);
  }
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

struct TrainConfig {
  MambaConfig model;
  DataConfig data;
  AdamWConfig adam;
  std::size_t iterations = 10000;
  double lr_min = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t eval_every = 200;
  std::size_t eval_batch = 256;
  InitOptions init{InitOptions::Scheme::kFanIn};  // Gaussian 0.02 stalls the full model

  void validate() const {
    model.validate();
    data.validate();
    if (data.switching != (model.alphabet == 3)) throw ParameterError("switching data needs alphabet 3, binary data alphabet 2");
    if (!(adam.lr > 0.0) || !(adam.eps > 0.0) || adam.weight_decay < 0.0) throw ParameterError("optimizer rates must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw ParameterError("Adam betas must lie in [0,1)");
    }
    if (lr_min < 0.0 || lr_min > adam.lr) throw ParameterError("lr_min must lie in [0, lr]");
    if (iterations < 1) throw ParameterError("iterations must be >= 1");
    if (!(init.std > 0.0) || !(init.output_scale > 0.0)) throw ParameterError("init scales must be positive");
    if (eval_every < 1 || eval_batch < 1) throw ParameterError("eval cadence and batch must be >= 1");
  }
};

/// -(1/count) sum_{t=start}^{T-1} log f(x_1^t)[x_{t+1}]  (t 1-based).
inline double cross_entropy_loss(const PredictionTrace& trace, const TokenSequence& seq, std::size_t start) {
  if (trace.size() != seq.size()) throw ContractError("trace and sequence lengths differ");
  if (start < 1 || start >= seq.size()) throw ContractError("no loss positions in [start, T-1]");
  double s = 0.0;
  for (std::size_t t = start; t < seq.size(); ++t) {
    const double p = trace.prob(t, seq.tokens[t]);
    if (!(p > 0.0)) throw DomainError("infinite loss: zero probability for the realized token after position " + std::to_string(t));
    s -= std::log(p);
  }
  return s / static_cast<double>(seq.size() - start);
}

inline double cosine_lr(std::size_t iter, std::size_t total, double lr_max, double lr_min) {
  if (total == 0 || iter > total) throw ContractError("cosine_lr needs 0 <= iter <= total");
  const double phase = std::numbers::pi * static_cast<double>(iter) / static_cast<double>(total);
  return lr_min + (lr_max - lr_min) * (1.0 + std::cos(phase)) / 2.0;
}

inline double global_norm(const MambaParams& grads) {
  double s = 0.0;
  grads.for_each([&](const std::string&, const Tensor& g) {
    for (double v : g.values()) s += v * v;
  });
  return std::sqrt(s);
}

/// Decoupled decay w <- w (1 - lr lambda), then the bias-corrected Adam step.
inline void adamw_step(MambaParams& params, const MambaParams& grads, OptimizerState& state, double lr,
                       const AdamWConfig& cfg) {
  grads.for_each([&](const std::string& name, const Tensor& g) {
    if (!g.all_finite()) throw DomainError("non-finite gradient for parameter '" + name + "'");
  });
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.for_each([&](const std::string& name, Tensor& w) {
    const Tensor* g = const_cast<MambaParams&>(grads).find(name);
    if (g == nullptr || g->shape() != w.shape()) throw StructuralError("gradient for '" + name + "' missing or misshaped");
    Tensor& m = state.m[name];
    Tensor& v = state.v[name];
    if (m.shape() != w.shape()) m = Tensor(w.rows(), w.cols());
    if (v.shape() != w.shape()) v = Tensor(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = (*g)[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      w[i] *= 1.0 - lr * cfg.weight_decay;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  });
}

struct MetricRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double loss_gap = 0.0;
  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

inline void write_metrics_header(std::ostream& os) { os << "iter,lr,train_loss,eval_loss,loss_gap\n"; }

inline void write_metric_row(std::ostream& os, const MetricRow& r) {
  const auto old = os.precision(17);
  os << r.iter << ',' << r.lr << ',' << r.train_loss << ',' << r.eval_loss << ',' << r.loss_gap << '\n';
  os.precision(old);
}

struct TrainResult {
  MambaParams params;
  OptimizerState optimizer;
  std::vector<MetricRow> metrics;
  double oracle_eval_loss = 0.0;
};

struct TrainHooks {
  /// Called after each metrics row with the state needed to resume.
  std::function<void(const MetricRow&, const Checkpoint&)> on_eval;
};

/// Held-out evaluation batch of a run: fixed by the seed, disjoint from training streams.
inline std::vector<TokenSequence> eval_batch_for(const TrainConfig& cfg) {
  return cfg.data.sample(cfg.eval_batch, derive_seed(cfg.seed, {stream::kEval}));
}

inline std::vector<TokenSequence> train_batch_for(const TrainConfig& cfg, std::size_t iter) {
  return cfg.data.sample(cfg.data.batch, derive_seed(cfg.seed, {stream::kTrain, iter}));
}

/// Mean per-sequence loss of `params` over `seqs`, evaluated in chunks on graphs of `graph`'s width.
class BatchEvaluator {
 public:
  BatchEvaluator(const MambaConfig& cfg, std::size_t width, std::size_t length, std::size_t start)
      : cfg_(cfg), length_(length), start_(start), main_(cfg, width, length, start) {}

  double loss(const MambaParams& params, std::span<const TokenSequence> seqs) {
    const std::size_t w = main_.batch();
    double total = 0.0;
    std::size_t done = 0;
    while (done < seqs.size()) {
      const std::size_t n = std::min(w, seqs.size() - done);
      TrainingGraph& g = graph_for(n);
      g.bind_params(params);
      g.bind_tokens(seqs.subspan(done, n));
      total += g.forward() * static_cast<double>(n);
      done += n;
    }
    return total / static_cast<double>(seqs.size());
  }

  TrainingGraph& main() { return main_; }

 private:
  TrainingGraph& graph_for(std::size_t n) {
    if (n == main_.batch()) return main_;
    if (!rest_ || rest_->batch() != n) rest_.emplace(cfg_, n, length_, start_);
    return *rest_;
  }

  MambaConfig cfg_;
  std::size_t length_, start_;
  TrainingGraph main_;
  std::optional<TrainingGraph> rest_;
};

/// Trains from `resume` (or a fresh seeded init) up to cfg.iterations.
inline TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {},
                         const std::optional<Checkpoint>& resume = std::nullopt) {
  cfg.validate();
  const std::size_t start = static_cast<std::size_t>(cfg.data.order);
  TrainResult result;
  std::size_t first_iter = 0;
  if (resume) {
    if (!(resume->config == cfg.model)) throw ParameterError("checkpoint config differs from the training config");
    if (!resume->optimizer) throw ParameterError("checkpoint has no optimizer state to resume from");
    if (resume->iteration > cfg.iterations) throw ParameterError("checkpoint is past the configured iterations");
    result.params = resume->params;
    result.optimizer = *resume->optimizer;
    first_iter = resume->iteration;
  } else {
    Rng rng = make_rng(cfg.seed, {stream::kInit});
    result.params = init_params(cfg.model, rng, cfg.init);
  }

  BatchEvaluator evaluator(cfg.model, cfg.data.batch, cfg.data.length, start);
  const std::vector<TokenSequence> eval_seqs = eval_batch_for(cfg);
  result.oracle_eval_loss = cfg.data.oracle_loss_on(eval_seqs);

  auto record = [&](std::size_t iter, double train_loss) {
    MetricRow row;
    row.iter = iter;
    row.lr = cosine_lr(iter, cfg.iterations, cfg.adam.lr, cfg.lr_min);
    row.train_loss = train_loss;
    row.eval_loss = evaluator.loss(result.params, eval_seqs);
    row.loss_gap = std::abs(row.eval_loss - result.oracle_eval_loss);
    result.metrics.push_back(row);
    if (hooks.on_eval) hooks.on_eval(row, Checkpoint{cfg.model, result.params, result.optimizer, iter});
  };

  TrainingGraph& graph = evaluator.main();
  for (std::size_t it = first_iter; it <= cfg.iterations; ++it) {
    const std::vector<TokenSequence> batch = train_batch_for(cfg, it);
    graph.bind_params(result.params);
    graph.bind_tokens(batch);
    const double loss = graph.forward();
    if (!std::isfinite(loss)) throw DomainError("non-finite training loss at iteration " + std::to_string(it));
    const bool resumed_row = resume && it == first_iter;  // already recorded before the checkpoint
    if ((it % cfg.eval_every == 0 || it == cfg.iterations) && !resumed_row) {
      record(it, loss);
      graph.bind_params(result.params);
      graph.bind_tokens(batch);
      graph.forward();
    }
    if (it == cfg.iterations) break;
    MambaParams grads = graph.backward();
    if (cfg.clip_norm > 0.0) {
      const double norm = global_norm(grads);
      if (norm > cfg.clip_norm) {
        const double s = cfg.clip_norm / norm;
        grads.for_each([&](const std::string&, Tensor& g) {
          for (double& v : g.values()) v *= s;
        });
      }
    }
    adamw_step(result.params, grads, result.optimizer, cosine_lr(it, cfg.iterations, cfg.adam.lr, cfg.lr_min), cfg.adam);
    if (result.params.a[0] < 0.0) result.params.a[0] = 0.0;
  }
  return result;
}

}  // namespace markov_mamba
