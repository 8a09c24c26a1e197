#pragma once

// Add-beta (Laplacian) smoothing: the Bayes predictor for order-k binary Markov
// data under a Dirichlet(beta) prior, plus its switching-aware variant.

#include <array>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/markov.hpp"

namespace markov_mamba {

struct ContextCounts {
  std::size_t n = 0;   // completed occurrences of the current context
  std::size_t n1 = 0;  // ... that were followed by a 1
  std::size_t n0() const noexcept { return n - n1; }
  friend bool operator==(const ContextCounts&, const ContextCounts&) = default;
};

struct TransitionCounts {
  std::array<std::array<std::size_t, 2>, 2> n{};  // n[i][j]: transitions i -> j
  std::size_t n00() const noexcept { return n[0][0]; }
  std::size_t n01() const noexcept { return n[0][1]; }
  std::size_t n10() const noexcept { return n[1][0]; }
  std::size_t n11() const noexcept { return n[1][1]; }
  std::size_t total() const noexcept { return n[0][0] + n[0][1] + n[1][0] + n[1][1]; }
  friend bool operator==(const TransitionCounts&, const TransitionCounts&) = default;
};

using Dist2 = std::array<double, 2>;
using Dist3 = std::array<double, 3>;

namespace detail {

inline void require_binary(std::span<const Token> tokens, std::size_t upto) {
  for (std::size_t i = 0; i < upto; ++i) {
    if (tokens[i] > kOne) throw ContractError("binary sequence expected, found switch token at position " + std::to_string(i + 1));
  }
}

inline void require_beta(double beta) {
  if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
}

}  // namespace detail

/// (P(0), P(1)) = ((n0 + beta), (n1 + beta)) / (n + 2 beta).
inline Dist2 add_beta(const ContextCounts& c, double beta) {
  const double denom = static_cast<double>(c.n) + 2.0 * beta;
  return {(static_cast<double>(c.n0()) + beta) / denom, (static_cast<double>(c.n1) + beta) / denom};
}

/// Counts for the context formed by the last k tokens of x_1^t (t is 1-based).
/// Direct enumeration over i <= t with a full length-k prefix inside x_1^t.
inline ContextCounts count_context(std::span<const Token> tokens, std::size_t t, int k) {
  if (k < 1) throw ParameterError("order must be >= 1");
  const auto uk = static_cast<std::size_t>(k);
  if (t < uk) throw ContractError("count_context needs t >= k");
  if (t > tokens.size()) throw ContractError("position beyond sequence end");
  detail::require_binary(tokens, t);
  ContextCounts c;
  // 0-based: current context is tokens[t-k, t); candidate i (0-based) has prefix tokens[i-k, i).
  for (std::size_t i = uk; i < t; ++i) {
    bool same = true;
    for (std::size_t j = 0; j < uk && same; ++j) same = tokens[i - uk + j] == tokens[t - uk + j];
    if (same) {
      ++c.n;
      if (tokens[i] == kOne) ++c.n1;
    }
  }
  return c;
}

inline ContextCounts count_context(const TokenSequence& seq, std::size_t t, int k) {
  return count_context(std::span<const Token>(seq.tokens), t, k);
}

/// Add-beta prediction of x_{t+1}; uniform for t < k.
inline Dist2 add_beta_predict(const TokenSequence& seq, std::size_t t, int k, double beta) {
  detail::require_beta(beta);
  if (t < static_cast<std::size_t>(k)) return {0.5, 0.5};
  return add_beta(count_context(seq, t, k), beta);
}

inline TransitionCounts transition_counts(std::span<const Token> tokens, std::size_t t) {
  if (t < 1 || t > tokens.size()) throw ContractError("transition_counts needs 1 <= t <= length");
  detail::require_binary(tokens, t);
  TransitionCounts c;
  for (std::size_t i = 1; i < t; ++i) ++c.n[tokens[i - 1]][tokens[i]];
  return c;
}

inline TransitionCounts transition_counts(const TokenSequence& seq, std::size_t t) {
  return transition_counts(std::span<const Token>(seq.tokens), t);
}

/// Rolling per-context tallies; push tokens one at a time for O(1) updates.
class ContextCounter {
 public:
  explicit ContextCounter(int k) : k_(k), table_(std::size_t{1} << k) {
    if (k < 1 || k > 24) throw ParameterError("order must be in [1, 24]");
  }

  void push(Token x) {
    if (x > kOne) throw ContractError("ContextCounter accepts binary tokens only");
    const auto uk = static_cast<std::size_t>(k_);
    if (history_.size() >= uk) {
      ContextCounts& c = table_[context_index(history_, history_.size(), k_)];
      ++c.n;
      c.n1 += x;
    }
    history_.push_back(x);
  }

  void reset() {
    history_.clear();
    std::fill(table_.begin(), table_.end(), ContextCounts{});
  }

  std::size_t length() const noexcept { return history_.size(); }
  bool has_context() const noexcept { return history_.size() >= static_cast<std::size_t>(k_); }
  std::size_t current_context() const { return context_index(history_, history_.size(), k_); }
  ContextCounts current() const { return has_context() ? table_[current_context()] : ContextCounts{}; }

  Dist2 predict(double beta) const { return has_context() ? add_beta(current(), beta) : Dist2{0.5, 0.5}; }

 private:
  int k_;
  std::vector<Token> history_;
  std::vector<ContextCounts> table_;
};

/// Segment-wise add-beta over {0,1,S}: counts restart after every S, P(S) = p_switch.
inline Dist3 switching_predict(const TokenSequence& seq, std::size_t t, int k, double beta, double p_switch) {
  detail::require_beta(beta);
  if (t < 1 || t > seq.size()) throw ContractError("switching_predict needs 1 <= t <= length");
  std::size_t start = t;
  while (start > 0 && seq.tokens[start - 1] != kSwitch) --start;
  const std::span<const Token> segment(seq.tokens.data() + start, t - start);
  Dist2 p{0.5, 0.5};
  if (segment.size() >= static_cast<std::size_t>(k)) p = add_beta(count_context(segment, segment.size(), k), beta);
  const double stay = 1.0 - p_switch;
  return {stay * p[0], stay * p[1], p_switch};
}

struct OracleRow {
  std::size_t t = 0;             // 1-based position
  std::size_t context = 0;       // context index of the last k tokens (0 when not formed)
  ContextCounts counts;
  std::array<double, 3> probs{};  // P0, P1, PS (PS = 0 for the binary oracle)
};

/// Add-beta predictions for every position t = 1..T of a binary sequence.
inline std::vector<OracleRow> oracle_trace(const TokenSequence& seq, int k, double beta) {
  detail::require_beta(beta);
  detail::require_binary(seq.tokens, seq.size());
  ContextCounter counter(k);
  std::vector<OracleRow> rows;
  rows.reserve(seq.size());
  for (std::size_t t = 1; t <= seq.size(); ++t) {
    counter.push(seq.tokens[t - 1]);
    const Dist2 p = counter.predict(beta);
    rows.push_back({t, counter.has_context() ? counter.current_context() : 0, counter.current(), {p[0], p[1], 0.0}});
  }
  return rows;
}

/// Switching oracle over every position; counts restart after each S.
inline std::vector<OracleRow> switching_oracle_trace(const TokenSequence& seq, int k, double beta, double p_switch) {
  detail::require_beta(beta);
  ContextCounter counter(k);
  std::vector<OracleRow> rows;
  rows.reserve(seq.size());
  const double stay = 1.0 - p_switch;
  for (std::size_t t = 1; t <= seq.size(); ++t) {
    const Token x = seq.tokens[t - 1];
    if (x == kSwitch) {
      counter.reset();
    } else {
      counter.push(x);
    }
    const Dist2 p = counter.predict(beta);
    rows.push_back({t, counter.has_context() ? counter.current_context() : 0, counter.current(),
                    {stay * p[0], stay * p[1], p_switch}});
  }
  return rows;
}

/// Mean over sequences of the per-sequence mean cross-entropy of the add-beta
/// predictor at positions t = k..T-1 (1-based), predicting x_{t+1}.
inline double oracle_loss(std::span<const TokenSequence> batch, int k, double beta) {
  if (batch.empty()) throw ContractError("oracle_loss of an empty batch");
  detail::require_beta(beta);
  const auto uk = static_cast<std::size_t>(k);
  double total = 0.0;
  for (const TokenSequence& seq : batch) {
    if (seq.size() < uk + 1) throw ContractError("sequence too short for oracle_loss");
    detail::require_binary(seq.tokens, seq.size());
    ContextCounter counter(k);
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 1; t < seq.size(); ++t) {
      counter.push(seq.tokens[t - 1]);
      if (t < uk) continue;
      s -= std::log(counter.predict(beta)[seq.tokens[t]]);
      ++count;
    }
    total += s / static_cast<double>(count);
  }
  return total / static_cast<double>(batch.size());
}

/// Switching-oracle counterpart of oracle_loss over the alphabet {0,1,S}.
inline double switching_oracle_loss(std::span<const TokenSequence> batch, int k, double beta, double p_switch) {
  if (batch.empty()) throw ContractError("switching_oracle_loss of an empty batch");
  const auto uk = static_cast<std::size_t>(k);
  double total = 0.0;
  for (const TokenSequence& seq : batch) {
    if (seq.size() < uk + 1) throw ContractError("sequence too short for switching_oracle_loss");
    const auto rows = switching_oracle_trace(seq, k, beta, p_switch);
    double s = 0.0;
    for (std::size_t t = uk; t < seq.size(); ++t) s -= std::log(rows[t - 1].probs[seq.tokens[t]]);
    total += s / static_cast<double>(seq.size() - uk);
  }
  return total / static_cast<double>(batch.size());
}

inline void write_oracle_csv(std::ostream& os, const std::vector<OracleRow>& rows, int k, bool with_switch) {
  os << "t,context,n,n_1,P0,P1" << (with_switch ? ",PS" : "") << '\n';
  os.precision(17);
  for (const OracleRow& r : rows) {
    std::string ctx;
    if (r.t >= static_cast<std::size_t>(k)) {
      for (int b = k - 1; b >= 0; --b) ctx.push_back(((r.context >> b) & 1U) ? '1' : '0');
    }
    os << r.t << ',' << ctx << ',' << r.counts.n << ',' << r.counts.n1 << ',' << r.probs[0] << ',' << r.probs[1];
    if (with_switch) os << ',' << r.probs[2];
    os << '\n';
  }
}

}  // namespace markov_mamba
