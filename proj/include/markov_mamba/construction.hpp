#pragma once

// Explicit MambaZero parameters realizing the order-1 add-beta estimator up to
// KL <= epsilon, and an exhaustive verifier over all binary sequences.
//
// d = N = 2, e = 1, w_X = w_B = 2, w_C = 1, a = 0 (so a_t = 1), Delta_t = 1.
// Per-coordinate kernels (alpha_0, alpha_1) on x~ and (gamma_0, gamma_1) on b,
// alpha_0 weighing the previous token, with
//   alpha_0 gamma_0 + alpha_1 gamma_1 = 0,
//   K = alpha_0 gamma_1 + alpha_1 gamma_0 > 0,
//   alpha_0 gamma_1 / K = -beta epsilon.
// Fixing alpha_1 = gamma_1 = 1 gives alpha_0 = -sqrt(r / (1 + r)), r = beta
// epsilon, and gamma_0 = -1 / alpha_0. The logits then equal K c times
// (n_{x_t 0} + beta, n_{x_t 1} + beta), plus K c beta epsilon on the
// coordinate 1 - x_t when x_1 = x_t.

#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "markov_mamba/divergence.hpp"
#include "markov_mamba/errors.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/oracle.hpp"

namespace markov_mamba {

struct ConstructionSpec {
  double beta = 1.0;
  double epsilon = 0.01;
  double alpha0 = 0.0, alpha1 = 1.0;
  double gamma0 = 0.0, gamma1 = 1.0;
  double c0 = 1.0, c1 = 1.0;
  double e00 = 0.0, e01 = 0.0, e10 = 0.0, e11 = 0.0;

  double K() const noexcept { return alpha0 * gamma1 + alpha1 * gamma0; }

  static ConstructionSpec solve(double beta, double epsilon) {
    if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("epsilon must lie in (0,1)");
    ConstructionSpec s;
    s.beta = beta;
    s.epsilon = epsilon;
    const double r = beta * epsilon;
    s.alpha0 = -std::sqrt(r / (1.0 + r));
    s.gamma0 = -1.0 / s.alpha0;
    const double c = s.c0;
    s.e00 = s.e11 = s.K() * beta * c - s.alpha1 * s.gamma1 * c;
    s.e01 = s.e10 = s.K() * beta * c - s.alpha0 * s.gamma1 * c;
    // e_0 = (e00, e01) and e_1 = (e01, e00) are collinear when e00 = -e01.
    const double det = s.e00 * s.e11 - s.e10 * s.e01;
    if (std::abs(det) <= 1e-12 * (s.e00 * s.e00 + s.e01 * s.e01)) {
      throw ParameterError("embeddings e_0 and e_1 are collinear for this (beta, epsilon); W_X cannot separate them");
    }
    return s;
  }
};

inline MambaConfig theorem_config() {
  MambaConfig c = MambaConfig::zero(2, 2, 1, 2);
  c.window_c = 1;
  return c;
}

inline MambaParams build_theorem1_params(const ConstructionSpec& s) {
  const MambaConfig cfg = theorem_config();
  MambaParams p;
  for (const auto& [name, shape] : expected_shapes(cfg)) p.slot(name) = Tensor(shape.rows, shape.cols);
  p.embedding = Tensor::matrix(2, 2, {s.e00, s.e01, s.e10, s.e11});
  p.a[0] = 0.0;
  p.delta[0] = kUnitSoftplusInverse;
  // W_X = [e_0 e_1]^{-1}: e_0 -> (1,0), e_1 -> (0,1)
  const double det = s.e00 * s.e11 - s.e10 * s.e01;
  p.W_X = Tensor::matrix(2, 2, {s.e11 / det, -s.e10 / det, -s.e01 / det, s.e00 / det});
  p.W_B = p.W_X;
  p.W_C = Tensor::matrix(2, 2, {s.c0 * p.W_X(0, 0), s.c0 * p.W_X(0, 1), s.c1 * p.W_X(1, 0), s.c1 * p.W_X(1, 1)});
  p.conv_X = Tensor::matrix(2, 2, {s.alpha0, s.alpha1, s.alpha0, s.alpha1});
  p.conv_B = Tensor::matrix(2, 2, {s.gamma0, s.gamma1, s.gamma0, s.gamma1});
  p.conv_C = Tensor::matrix(2, 1, {1.0, 1.0});
  p.W_o = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
  p.W_l = p.W_o;
  check_params(p, cfg);
  return p;
}

inline MambaParams build_theorem1_params(double beta, double epsilon) {
  return build_theorem1_params(ConstructionSpec::solve(beta, epsilon));
}

/// Output distribution of the construction written out from the counts:
/// add-beta on the row of x_t, with beta epsilon added to symbol 1 - x_t when x_1 = x_t.
inline Dist2 closed_form_prediction(Token x1, Token xt, const TransitionCounts& counts, double beta, double epsilon) {
  if (x1 > kOne || xt > kOne) throw ContractError("closed_form_prediction takes binary tokens");
  const double extra = x1 == xt ? beta * epsilon : 0.0;
  const double n0 = static_cast<double>(counts.n[xt][0]);
  const double n1 = static_cast<double>(counts.n[xt][1]);
  const double denom = n0 + n1 + 2.0 * beta + extra;
  if (xt == kZero) return {(n0 + beta) / denom, (n1 + beta + extra) / denom};
  return {(n0 + beta + extra) / denom, (n1 + beta) / denom};
}

struct Certificate {
  double beta = 1.0;
  double epsilon = 0.01;
  std::size_t t_max = 0;
  double max_kl = 0.0;
  std::string witness;           // argmax sequence x_1^t
  std::size_t witness_t = 0;
  double max_kl_same_ends = 0.0;       // positions with x_1 = x_t
  double max_kl_different_ends = 0.0;  // positions with x_1 != x_t
  std::size_t exact_match_count = 0;   // x_1 != x_t positions with KL <= 1e-12
  std::size_t different_ends_count = 0;
  std::size_t positions = 0;
  std::string failure;  // non-empty when the model emitted a non-distribution
  double runtime_seconds = 0.0;

  bool valid() const { return failure.empty() && max_kl <= epsilon; }
};

namespace detail {

struct VerifyContext {
  const MambaModel& model;
  double beta;
  std::size_t t_max;
  Certificate& cert;
  std::vector<Token> prefix;
  TransitionCounts counts;
};

inline std::string sequence_string(const std::vector<Token>& seq) {
  std::string s;
  for (Token t : seq) s.push_back(static_cast<char>('0' + t));
  return s;
}

inline void verify_dfs(VerifyContext& ctx, const RecurrentState& parent) {
  for (Token x : {kZero, kOne}) {
    if (!ctx.cert.failure.empty()) return;
    RecurrentState state = parent;
    if (!ctx.prefix.empty()) ++ctx.counts.n[ctx.prefix.back()][x];
    ctx.prefix.push_back(x);
    const std::size_t t = ctx.prefix.size();
    StepOutput out;
    try {
      out = forward_step(ctx.model, state, x);
    } catch (const DomainError& e) {
      ctx.cert.failure = std::string(e.what()) + " on " + sequence_string(ctx.prefix) + " at t=" + std::to_string(t);
    }
    if (ctx.cert.failure.empty()) {
      double sum = 0.0;
      bool ok = true;
      for (double p : out.probs) {
        ok = ok && std::isfinite(p) && p >= 0.0;
        sum += p;
      }
      if (!ok || std::abs(sum - 1.0) > 1e-12) {
        ctx.cert.failure = "non-distribution output on " + sequence_string(ctx.prefix) + " at t=" + std::to_string(t);
      } else {
        // order-1 add-beta: row of x_t in the transition table
        const ContextCounts cc{ctx.counts.n[x][0] + ctx.counts.n[x][1], ctx.counts.n[x][1]};
        const Dist2 oracle = add_beta(cc, ctx.beta);
        const double kl = kl_divergence(oracle, out.probs);
        Certificate& c = ctx.cert;
        ++c.positions;
        if (ctx.prefix.front() == x) {
          c.max_kl_same_ends = std::max(c.max_kl_same_ends, kl);
        } else {
          ++c.different_ends_count;
          c.max_kl_different_ends = std::max(c.max_kl_different_ends, kl);
          if (kl <= 1e-12) ++c.exact_match_count;
        }
        if (kl > c.max_kl || c.witness.empty()) {
          c.max_kl = std::max(c.max_kl, kl);
          c.witness = sequence_string(ctx.prefix);
          c.witness_t = t;
        }
        if (t < ctx.t_max) verify_dfs(ctx, state);
      }
    }
    ctx.prefix.pop_back();
    if (!ctx.prefix.empty()) --ctx.counts.n[ctx.prefix.back()][x];
  }
}

}  // namespace detail

/// Evaluates the model on every binary sequence of length 1..t_max (prefixes
/// shared depth-first) and records the largest KL(add-beta || model).
inline Certificate verify_construction(const MambaParams& params, const MambaConfig& cfg, double beta, double epsilon,
                                       std::size_t t_max) {
  if (!(beta > 0.0)) throw ParameterError("beta must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ParameterError("epsilon must lie in (0,1)");
  if (t_max < 1 || t_max > 26) throw ParameterError("T_max must lie in [1, 26]");
  if (cfg.alphabet != 2) throw ParameterError("verification needs a binary model");
  const auto start = std::chrono::steady_clock::now();
  const MambaModel model(cfg, params);
  Certificate cert;
  cert.beta = beta;
  cert.epsilon = epsilon;
  cert.t_max = t_max;
  detail::VerifyContext ctx{model, beta, t_max, cert, {}, {}};
  detail::verify_dfs(ctx, RecurrentState{});
  cert.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cert;
}

inline Certificate verify_construction(const MambaParams& params, double beta, double epsilon, std::size_t t_max) {
  return verify_construction(params, theorem_config(), beta, epsilon, t_max);
}

/// Scales alpha_0 (the previous-token weight of conv_X) by (1 + fraction).
inline MambaParams perturb_alpha0(MambaParams p, double fraction) {
  for (std::size_t r = 0; r < p.conv_X.rows(); ++r) p.conv_X(r, 0) *= 1.0 + fraction;
  return p;
}

}  // namespace markov_mamba
