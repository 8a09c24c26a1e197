#pragma once

// Measurements comparing a predictor against the add-beta oracle: per-position
// match curves, mean L1 distance, loss gap and a_t trajectories. A predictor
// maps a sequence to its PredictionTrace, so the model, the oracles and a
// uniform baseline are interchangeable.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "markov_mamba/divergence.hpp"
#include "markov_mamba/errors.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/oracle.hpp"
#include "markov_mamba/training.hpp"

namespace markov_mamba {

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PredictionTrace predict(const TokenSequence& seq) const = 0;
};

class ModelPredictor final : public Predictor {
 public:
  explicit ModelPredictor(MambaModel model) : model_(std::move(model)) {}
  ModelPredictor(const MambaConfig& cfg, const MambaParams& params) : model_(cfg, params) {}
  PredictionTrace predict(const TokenSequence& seq) const override { return forward_sequence(model_, seq); }
  const MambaModel& model() const { return model_; }

 private:
  MambaModel model_;
};

class OraclePredictor final : public Predictor {
 public:
  OraclePredictor(int k, double beta) : k_(k), beta_(beta) {}
  PredictionTrace predict(const TokenSequence& seq) const override {
    PredictionTrace tr;
    tr.width = 2;
    for (const OracleRow& r : oracle_trace(seq, k_, beta_)) tr.push(std::span<const double>(r.probs.data(), 2), 1.0);
    return tr;
  }

 private:
  int k_;
  double beta_;
};

class SwitchingOraclePredictor final : public Predictor {
 public:
  SwitchingOraclePredictor(int k, double beta, double p_switch) : k_(k), beta_(beta), p_(p_switch) {}
  PredictionTrace predict(const TokenSequence& seq) const override {
    PredictionTrace tr;
    tr.width = 3;
    for (const OracleRow& r : switching_oracle_trace(seq, k_, beta_, p_)) {
      tr.push(r.probs, seq.tokens[r.t - 1] == kSwitch ? 0.0 : 1.0);
    }
    return tr;
  }

 private:
  int k_;
  double beta_, p_;
};

class UniformPredictor final : public Predictor {
 public:
  explicit UniformPredictor(std::size_t width = 2) : width_(width) {}
  PredictionTrace predict(const TokenSequence& seq) const override {
    PredictionTrace tr;
    tr.width = width_;
    const std::vector<double> p(width_, 1.0 / static_cast<double>(width_));
    for (std::size_t t = 0; t < seq.size(); ++t) tr.push(p, 1.0);
    return tr;
  }

 private:
  std::size_t width_;
};

struct MatchCurve {
  Token condition = kZero;
  std::vector<std::size_t> positions;  // t with x_t = condition, t >= k
  std::vector<double> model;           // predicted P(1 | x_1^t)
  std::vector<double> oracle;

  double max_abs_gap() const {
    double m = 0.0;
    for (std::size_t i = 0; i < model.size(); ++i) m = std::max(m, std::abs(model[i] - oracle[i]));
    return m;
  }
  double mean_abs_gap() const {
    if (model.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < model.size(); ++i) s += std::abs(model[i] - oracle[i]);
    return s / static_cast<double>(model.size());
  }
};

inline MatchCurve match_curve(const Predictor& predictor, const TokenSequence& seq, int k, double beta, Token condition) {
  if (seq.alphabet != Alphabet::kBinary) throw ContractError("match_curve takes a binary sequence");
  const PredictionTrace trace = predictor.predict(seq);
  const auto rows = oracle_trace(seq, k, beta);
  MatchCurve c;
  c.condition = condition;
  for (std::size_t t = static_cast<std::size_t>(k); t <= seq.size(); ++t) {
    if (seq.tokens[t - 1] != condition) continue;
    c.positions.push_back(t);
    c.model.push_back(trace.prob(t, kOne));
    c.oracle.push_back(rows[t - 1].probs[1]);
  }
  return c;
}

/// Mean over sequences and positions t = k..T-1 of ||f(x_1^t) - add-beta(x_1^t)||_1.
inline double l1_distance(const Predictor& predictor, std::span<const TokenSequence> batch, int k, double beta) {
  if (batch.empty()) throw ContractError("l1_distance of an empty batch");
  const auto uk = static_cast<std::size_t>(k);
  double total = 0.0;
  for (const TokenSequence& seq : batch) {
    if (seq.size() <= uk) throw ContractError("sequence too short for l1_distance");
    const PredictionTrace trace = predictor.predict(seq);
    const auto rows = oracle_trace(seq, k, beta);
    double s = 0.0;
    for (std::size_t t = uk; t < seq.size(); ++t) {
      s += l1_norm_distance(trace.at(t), std::span<const double>(rows[t - 1].probs.data(), 2));
    }
    total += s / static_cast<double>(seq.size() - uk);
  }
  return total / static_cast<double>(batch.size());
}

/// Mean per-sequence cross-entropy over positions t = k..T-1.
inline double predictor_loss(const Predictor& predictor, std::span<const TokenSequence> batch, int k) {
  if (batch.empty()) throw ContractError("empty batch");
  double total = 0.0;
  for (const TokenSequence& seq : batch) total += cross_entropy_loss(predictor.predict(seq), seq, static_cast<std::size_t>(k));
  return total / static_cast<double>(batch.size());
}

/// |L(model) - L(oracle)| on the same batch; the switching oracle when p_switch is given.
inline double loss_gap(const Predictor& predictor, std::span<const TokenSequence> batch, int k, double beta,
                       std::optional<double> p_switch = std::nullopt) {
  const double oracle = p_switch ? switching_oracle_loss(batch, k, beta, *p_switch) : oracle_loss(batch, k, beta);
  return std::abs(predictor_loss(predictor, batch, k) - oracle);
}

struct AtTrajectory {
  std::vector<double> a_t;
  std::vector<bool> is_switch;  // x_t = S

  /// Mean a_t over positions t >= from (1-based) selected by `which`: 0 all, 1 switch only, 2 non-switch only.
  double mean(std::size_t from = 1, int which = 0) const {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t t = from; t <= a_t.size(); ++t) {
      const bool sw = is_switch[t - 1];
      if ((which == 1 && !sw) || (which == 2 && sw)) continue;
      s += a_t[t - 1];
      ++n;
    }
    return n == 0 ? std::nan("") : s / static_cast<double>(n);
  }
};

inline AtTrajectory at_trajectory(const MambaModel& model, const TokenSequence& seq) {
  const PredictionTrace trace = forward_sequence(model, seq);
  AtTrajectory tr;
  tr.a_t = trace.a_t;
  for (Token x : seq.tokens) tr.is_switch.push_back(x == kSwitch);
  return tr;
}

/// Pooled a_t means over a batch: {all t >= from, switch positions, non-switch positions}.
struct AtSummary {
  double mean_all = 0.0;
  double mean_switch = std::nan("");
  double mean_other = 0.0;
  std::size_t switch_count = 0;
};

inline AtSummary summarize_at(const MambaModel& model, std::span<const TokenSequence> batch, std::size_t from) {
  double s_all = 0.0, s_sw = 0.0, s_other = 0.0;
  std::size_t n_all = 0, n_sw = 0, n_other = 0;
  for (const TokenSequence& seq : batch) {
    const AtTrajectory tr = at_trajectory(model, seq);
    for (std::size_t t = from; t <= tr.a_t.size(); ++t) {
      const double a = tr.a_t[t - 1];
      s_all += a;
      ++n_all;
      if (tr.is_switch[t - 1]) {
        s_sw += a;
        ++n_sw;
      } else {
        s_other += a;
        ++n_other;
      }
    }
  }
  AtSummary out;
  out.mean_all = n_all ? s_all / static_cast<double>(n_all) : std::nan("");
  if (n_sw) out.mean_switch = s_sw / static_cast<double>(n_sw);
  out.mean_other = n_other ? s_other / static_cast<double>(n_other) : std::nan("");
  out.switch_count = n_sw;
  return out;
}

// ---- CSV ----------------------------------------------------------------

inline void write_match_curve_csv(std::ostream& os, const MatchCurve& c) {
  os << "t,x_t,model_p1,oracle_p1\n";
  const auto old = os.precision(17);
  for (std::size_t i = 0; i < c.positions.size(); ++i) {
    os << c.positions[i] << ',' << static_cast<int>(c.condition) << ',' << c.model[i] << ',' << c.oracle[i] << '\n';
  }
  os.precision(old);
}

inline void write_at_csv(std::ostream& os, const AtTrajectory& tr, const TokenSequence& seq) {
  os << "t,token,a_t,is_switch\n";
  const auto old = os.precision(17);
  for (std::size_t t = 1; t <= tr.a_t.size(); ++t) {
    const Token x = seq.tokens[t - 1];
    os << t << ',' << (x == kSwitch ? 'S' : static_cast<char>('0' + x)) << ',' << tr.a_t[t - 1] << ','
       << (tr.is_switch[t - 1] ? 1 : 0) << '\n';
  }
  os.precision(old);
}

}  // namespace markov_mamba
