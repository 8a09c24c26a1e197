#pragma once

// Single-layer Mamba-2 language model over a 2- or 3-letter alphabet and its
// MambaZero simplification, evaluated recurrently one token at a time.
//
//   x_t  = e_{x_t}
//   D_t  = softplus(<w_delta, x_t> + delta),  a_t = exp(-a D_t)
//   x~_t = ReLU(conv_X(W_X x_{t-w+1..t})) D_t,  b_t, c_t likewise (no D_t)
//   H_t  = a_t H_{t-1} + x~_t b_t^T,  y_t = H_t c_t
//   z_t  = y_t * ReLU(W_z x_t),  o_t = W_o z_t,  u_t = x_t + o_t
//   v_t  = u_t + W_2 [ReLU(W_1 u_t) * W_3 u_t],  logit_t = W_l v_t
//
// MambaZero drops the ReLUs, the gate z_t and the MLP, and normalizes the
// logits by their L1 norm instead of a softmax.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/rng.hpp"
#include "markov_mamba/tensor.hpp"

namespace markov_mamba {

enum class Variant { kFull, kZero };
enum class Head { kSoftmax, kL1Norm };

struct MambaConfig {
  std::size_t d = 8;        // embedding dim
  std::size_t n_state = 8;  // N
  std::size_t expand = 2;   // e
  std::size_t window_x = 2;
  std::size_t window_b = 2;
  std::size_t window_c = 2;
  Variant variant = Variant::kFull;
  Head head = Head::kSoftmax;
  bool use_conv = true;
  bool use_relu = true;
  bool use_gating = true;
  bool additive_mlp = false;  // W_2[ReLU(W_1 u) + W_3 u] instead of the product
  std::size_t alphabet = 2;
  double l1_floor = 1e-12;

  static MambaConfig full(std::size_t d, std::size_t n, std::size_t e, std::size_t w) {
    MambaConfig c;
    c.d = d;
    c.n_state = n;
    c.expand = e;
    c.window_x = c.window_b = c.window_c = w;
    return c;
  }

  static MambaConfig zero(std::size_t d, std::size_t n, std::size_t e, std::size_t w) {
    MambaConfig c = full(d, n, e, w);
    c.variant = Variant::kZero;
    c.head = Head::kL1Norm;
    c.use_relu = false;
    c.use_gating = false;
    return c;
  }

  void set_window(std::size_t w) { window_x = window_b = window_c = w; }

  std::size_t inner() const noexcept { return expand * d; }
  std::size_t max_window() const noexcept { return std::max({window_x, window_b, window_c}); }
  bool relu_in_selectivity() const noexcept { return variant == Variant::kFull && use_relu; }
  bool gated() const noexcept { return variant == Variant::kFull && use_gating; }
  bool has_mlp() const noexcept { return variant == Variant::kFull; }

  void validate() const {
    if (d < 1 || n_state < 1 || expand < 1) throw ParameterError("d, N and e must be >= 1");
    if (window_x < 1 || window_b < 1 || window_c < 1) throw ParameterError("convolution windows must be >= 1");
    if (alphabet != 2 && alphabet != 3) throw ParameterError("alphabet size must be 2 or 3");
    if (!(l1_floor > 0.0)) throw ParameterError("l1 floor must be > 0");
    if (variant == Variant::kZero && (use_relu || use_gating)) {
      throw ParameterError("MambaZero has no ReLU in selectivity and no gating");
    }
  }

  friend bool operator==(const MambaConfig&, const MambaConfig&) = default;
};

struct MambaParams {
  Tensor embedding;  // alphabet x d, rows e_0, e_1 (, e_S)
  Tensor a;          // 1x1, a >= 0
  Tensor w_delta;    // d x 1
  Tensor delta;      // 1x1
  Tensor W_X;        // ed x d
  Tensor W_B;        // N x d
  Tensor W_C;        // N x d
  Tensor W_z;        // ed x d (gated full model only)
  Tensor W_o;        // d x ed
  Tensor conv_X;     // ed x w_X, column w-1 weighs the current token
  Tensor conv_B;     // N x w_B
  Tensor conv_C;     // N x w_C
  Tensor W_1;        // 4d x d
  Tensor W_2;        // d x 4d
  Tensor W_3;        // 4d x d (gated MLP only)
  Tensor W_l;        // alphabet x d

  /// Visits every present (non-empty) tensor in a fixed order.
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    const std::pair<const char*, decltype(&self.embedding)> all[] = {
        {"embedding", &self.embedding}, {"a", &self.a},           {"w_delta", &self.w_delta}, {"delta", &self.delta},
        {"W_X", &self.W_X},             {"W_B", &self.W_B},       {"W_C", &self.W_C},         {"W_z", &self.W_z},
        {"W_o", &self.W_o},             {"conv_X", &self.conv_X}, {"conv_B", &self.conv_B},   {"conv_C", &self.conv_C},
        {"W_1", &self.W_1},             {"W_2", &self.W_2},       {"W_3", &self.W_3},         {"W_l", &self.W_l},
    };
    for (const auto& [name, t] : all) {
      if (!t->empty()) f(std::string(name), *t);
    }
  }
  template <class F> void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <class F> void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  Tensor* find(const std::string& name) {
    Tensor* hit = nullptr;
    for_each([&](const std::string& n, Tensor& t) {
      if (n == name) hit = &t;
    });
    return hit;
  }

  /// Slot for `name`, present or not; throws for unknown names.
  Tensor& slot(const std::string& name) {
    Tensor* members[] = {&embedding, &a,      &w_delta, &delta,  &W_X, &W_B, &W_C, &W_z,
                         &W_o,       &conv_X, &conv_B,  &conv_C, &W_1, &W_2, &W_3, &W_l};
    const char* names[] = {"embedding", "a",      "w_delta", "delta",  "W_X", "W_B", "W_C", "W_z",
                           "W_o",       "conv_X", "conv_B",  "conv_C", "W_1", "W_2", "W_3", "W_l"};
    for (std::size_t i = 0; i < std::size(names); ++i) {
      if (name == names[i]) return *members[i];
    }
    throw ParameterError("unknown parameter '" + name + "'");
  }

  std::size_t count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  friend bool operator==(const MambaParams&, const MambaParams&) = default;
};

/// Parameter layout implied by a configuration, in visiting order.
inline std::vector<std::pair<std::string, Shape>> expected_shapes(const MambaConfig& cfg) {
  const std::size_t d = cfg.d, n = cfg.n_state, ed = cfg.inner(), A = cfg.alphabet;
  std::vector<std::pair<std::string, Shape>> s = {
      {"embedding", {A, d}}, {"a", {1, 1}},   {"w_delta", {d, 1}}, {"delta", {1, 1}},
      {"W_X", {ed, d}},      {"W_B", {n, d}}, {"W_C", {n, d}},
  };
  if (cfg.gated()) s.push_back({"W_z", {ed, d}});
  s.push_back({"W_o", {d, ed}});
  s.push_back({"conv_X", {ed, cfg.window_x}});
  s.push_back({"conv_B", {n, cfg.window_b}});
  s.push_back({"conv_C", {n, cfg.window_c}});
  if (cfg.has_mlp()) {
    s.push_back({"W_1", {4 * d, d}});
    s.push_back({"W_2", {d, 4 * d}});
    if (cfg.use_gating) s.push_back({"W_3", {4 * d, d}});
  }
  s.push_back({"W_l", {A, d}});
  return s;
}

inline void check_params(const MambaParams& p, const MambaConfig& cfg) {
  const auto shapes = expected_shapes(cfg);
  std::size_t present = 0;
  p.for_each([&](const std::string&, const Tensor&) { ++present; });
  if (present != shapes.size()) {
    throw StructuralError("parameter set has " + std::to_string(present) + " tensors, config expects " +
                          std::to_string(shapes.size()));
  }
  auto& mp = const_cast<MambaParams&>(p);
  for (const auto& [name, shape] : shapes) {
    const Tensor* t = mp.find(name);
    if (t == nullptr) throw StructuralError("missing parameter '" + name + "'");
    if (t->shape() != shape) {
      throw StructuralError("parameter '" + name + "' has shape " + t->shape().str() + ", expected " + shape.str());
    }
  }
  if (p.a.item() < 0.0) throw ParameterError("parameter a must be >= 0");
}

// softplus(delta) = 1
inline const double kUnitSoftplusInverse = std::log(std::exp(1.0) - 1.0);

struct InitOptions {
  enum class Scheme { kGaussian, kFanIn };
  Scheme scheme = Scheme::kGaussian;
  double std = 0.02;  // kGaussian
  // L1 head: |embedding|, |W_l| and W_o scaled by 0.01, so every logit starts
  // positive. Otherwise most positions sit at the floor and get no gradient.
  bool positive_l1_logits = true;
  // kFanIn with the softmax head: W_o, W_2 and W_l are scaled by this factor so
  // the residual stream and the logits start small.
  double output_scale = 0.1;
};

/// Weights i.i.d. N(0, std^2) (or N(0, 1/fan_in) per tensor with kFanIn; the
/// embedding then uses unit variance); a = 0.5 and softplus(delta) = 1.
inline MambaParams init_params(const MambaConfig& cfg, Rng& rng, InitOptions opt = {}) {
  cfg.validate();
  MambaParams p;
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    Tensor& t = p.slot(name);
    t = Tensor(shape.rows, shape.cols);
    if (name == "a") {
      t[0] = 0.5;
      continue;
    }
    if (name == "delta") {
      t[0] = kUnitSoftplusInverse;
      continue;
    }
    double std = opt.std;
    if (opt.scheme == InitOptions::Scheme::kFanIn) {
      std = name == "embedding" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(name == "w_delta" ? shape.rows : shape.cols));
    }
    std::normal_distribution<double> normal(0.0, std);
    for (double& v : t.values()) v = normal(rng);
  }
  if (opt.positive_l1_logits && cfg.head == Head::kL1Norm) {
    for (double& v : p.embedding.values()) v = std::abs(v);
    for (double& v : p.W_l.values()) v = std::abs(v);
    for (double& v : p.W_o.values()) v *= 0.01;
  } else if (opt.scheme == InitOptions::Scheme::kFanIn) {
    for (Tensor* t : {&p.W_o, &p.W_2, &p.W_l}) {
      for (double& v : t->values()) v *= opt.output_scale;
    }
  }
  return p;
}

// ---- recurrent evaluation ------------------------------------------------

namespace detail {

// out = W x for a rows x cols matrix.
inline void matvec(const Tensor& W, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < W.rows(); ++r) {
    const double* w = &W(r, 0);
    double s = 0.0;
    for (std::size_t c = 0; c < W.cols(); ++c) s += w[c] * x[c];
    out[r] = s;
  }
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace detail

/// Parameters plus per-token projection tables (W_X e_v, W_B e_v, ...), built once.
class MambaModel {
 public:
  MambaModel(MambaConfig cfg, MambaParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    check_params(params_, cfg_);
    const std::size_t A = cfg_.alphabet;
    px_.assign(A, std::vector<double>(cfg_.inner()));
    pb_.assign(A, std::vector<double>(cfg_.n_state));
    pc_.assign(A, std::vector<double>(cfg_.n_state));
    pz_.assign(A, std::vector<double>(cfg_.inner()));
    pdelta_.assign(A, 0.0);
    for (std::size_t v = 0; v < A; ++v) {
      const auto e = params_.embedding.row_view(v);
      detail::matvec(params_.W_X, e, px_[v]);
      detail::matvec(params_.W_B, e, pb_[v]);
      detail::matvec(params_.W_C, e, pc_[v]);
      if (cfg_.gated()) detail::matvec(params_.W_z, e, pz_[v]);
      double s = 0.0;
      for (std::size_t i = 0; i < cfg_.d; ++i) s += params_.w_delta[i] * e[i];
      pdelta_[v] = s;
    }
  }

  const MambaConfig& config() const noexcept { return cfg_; }
  const MambaParams& params() const noexcept { return params_; }

  const std::vector<double>& proj_x(Token v) const { return px_[v]; }
  const std::vector<double>& proj_b(Token v) const { return pb_[v]; }
  const std::vector<double>& proj_c(Token v) const { return pc_[v]; }
  const std::vector<double>& proj_z(Token v) const { return pz_[v]; }
  double proj_delta(Token v) const { return pdelta_[v]; }

 private:
  MambaConfig cfg_;
  MambaParams params_;
  std::vector<std::vector<double>> px_, pb_, pc_, pz_;
  std::vector<double> pdelta_;
};

struct Selectivity {
  double a_t = 1.0;
  double delta_t = 1.0;
  std::vector<double> x_tilde;  // ed
  std::vector<double> b;        // N
  std::vector<double> c;        // N
};

namespace detail {

// Causal depthwise convolution over the trailing `w` entries of `window`
// (oldest first), zero padded on the left.
inline void causal_conv(const Tensor& kernel, std::size_t w, std::span<const Token> window, bool use_conv,
                        const std::function<const std::vector<double>&(Token)>& proj, std::vector<double>& out) {
  const std::size_t dim = kernel.rows();
  out.assign(dim, 0.0);
  if (!use_conv) {
    const auto& p = proj(window.back());
    std::copy(p.begin(), p.end(), out.begin());
    return;
  }
  const std::size_t len = window.size();
  for (std::size_t j = 0; j < w; ++j) {
    // kernel column j weighs the token w-1-j steps back
    const std::size_t back = w - 1 - j;
    if (back >= len) continue;
    const auto& p = proj(window[len - 1 - back]);
    for (std::size_t i = 0; i < dim; ++i) out[i] += kernel(i, j) * p[i];
  }
}

}  // namespace detail

/// Input-selective terms for the current token, given the most recent tokens
/// (oldest first, current token last).
inline Selectivity selectivity(const MambaModel& model, std::span<const Token> window) {
  if (window.empty()) throw ContractError("selectivity needs a non-empty token window");
  const MambaConfig& cfg = model.config();
  const MambaParams& p = model.params();
  const Token cur = window.back();
  Selectivity s;
  s.delta_t = detail::softplus(model.proj_delta(cur) + p.delta[0]);
  s.a_t = std::exp(-p.a[0] * s.delta_t);
  detail::causal_conv(p.conv_X, cfg.window_x, window, cfg.use_conv, [&](Token v) -> const auto& { return model.proj_x(v); }, s.x_tilde);
  detail::causal_conv(p.conv_B, cfg.window_b, window, cfg.use_conv, [&](Token v) -> const auto& { return model.proj_b(v); }, s.b);
  detail::causal_conv(p.conv_C, cfg.window_c, window, cfg.use_conv, [&](Token v) -> const auto& { return model.proj_c(v); }, s.c);
  if (cfg.relu_in_selectivity()) {
    for (auto* v : {&s.x_tilde, &s.b, &s.c}) {
      for (double& e : *v) e = e > 0.0 ? e : 0.0;
    }
  }
  for (double& e : s.x_tilde) e *= s.delta_t;
  return s;
}

inline Selectivity selectivity(const MambaParams& params, const MambaConfig& cfg, std::span<const Token> window) {
  return selectivity(MambaModel(cfg, params), window);
}

struct RecurrentState {
  std::vector<double> H;       // ed x N, row-major; empty until the first step
  std::vector<Token> recent;   // most recent tokens, oldest first, at most max_window
  std::size_t t = 0;

  friend bool operator==(const RecurrentState&, const RecurrentState&) = default;
};

struct StepDiagnostics {
  Selectivity sel;
  std::vector<double> y, z, o, u, v, logits;
};

struct StepOutput {
  std::vector<double> probs;
  std::vector<double> logits;
  double a_t = 1.0;
};

namespace detail {

inline void normalize_head(const MambaConfig& cfg, std::span<const double> logits, std::vector<double>& probs) {
  probs.assign(logits.size(), 0.0);
  if (cfg.head == Head::kSoftmax) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += (probs[i] = std::exp(logits[i] - mx));
    for (double& p : probs) p /= s;
    return;
  }
  double s = 0.0;
  bool all_floor = true;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const bool clamped = !(logits[i] > cfg.l1_floor);
    all_floor = all_floor && clamped;
    s += (probs[i] = clamped ? cfg.l1_floor : logits[i]);
  }
  if (all_floor) throw DomainError("degenerate logits: every coordinate is at the L1 floor");
  for (double& p : probs) p /= s;
}

}  // namespace detail

/// One recurrent step: consumes `token`, updates `state`, returns P(x_{t+1} | x_1^t).
inline StepOutput forward_step(const MambaModel& model, RecurrentState& state, Token token,
                               StepDiagnostics* diag = nullptr) {
  const MambaConfig& cfg = model.config();
  const MambaParams& p = model.params();
  if (token >= cfg.alphabet) throw ContractError("token " + std::to_string(token) + " outside the alphabet");
  const std::size_t d = cfg.d, ed = cfg.inner(), n = cfg.n_state;

  state.recent.push_back(token);
  if (state.recent.size() > cfg.max_window()) state.recent.erase(state.recent.begin());
  ++state.t;

  Selectivity sel = selectivity(model, state.recent);
  if (state.H.empty()) state.H.assign(ed * n, 0.0);
  for (std::size_t i = 0; i < ed; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double& h = state.H[i * n + j];
      h = sel.a_t * h + sel.x_tilde[i] * sel.b[j];
    }
  }

  std::vector<double> y(ed, 0.0);
  for (std::size_t i = 0; i < ed; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += state.H[i * n + j] * sel.c[j];
    y[i] = s;
  }
  std::vector<double> z = y;
  if (cfg.gated()) {
    const auto& g = model.proj_z(token);
    for (std::size_t i = 0; i < ed; ++i) z[i] *= g[i] > 0.0 ? g[i] : 0.0;
  }
  std::vector<double> o(d);
  detail::matvec(p.W_o, z, o);
  std::vector<double> u(d);
  const auto x = p.embedding.row_view(token);
  for (std::size_t i = 0; i < d; ++i) u[i] = x[i] + o[i];

  std::vector<double> v = u;
  if (cfg.has_mlp()) {
    std::vector<double> h1(4 * d), h3;
    detail::matvec(p.W_1, u, h1);
    for (double& e : h1) e = e > 0.0 ? e : 0.0;
    if (cfg.use_gating) {
      h3.resize(4 * d);
      detail::matvec(p.W_3, u, h3);
      for (std::size_t i = 0; i < h1.size(); ++i) h1[i] = cfg.additive_mlp ? h1[i] + h3[i] : h1[i] * h3[i];
    }
    std::vector<double> m(d);
    detail::matvec(p.W_2, h1, m);
    for (std::size_t i = 0; i < d; ++i) v[i] += m[i];
  }

  StepOutput out;
  out.logits.resize(cfg.alphabet);
  detail::matvec(p.W_l, v, out.logits);
  out.a_t = sel.a_t;
  detail::normalize_head(cfg, out.logits, out.probs);
  if (diag != nullptr) {
    diag->y = std::move(y);
    diag->z = std::move(z);
    diag->o = std::move(o);
    diag->u = std::move(u);
    diag->v = std::move(v);
    diag->logits = out.logits;
    diag->sel = std::move(sel);
  }
  return out;
}

inline StepOutput forward_step(const MambaParams& params, const MambaConfig& cfg, RecurrentState& state, Token token) {
  return forward_step(MambaModel(cfg, params), state, token);
}

/// Per-position predictions f(x_1^t) for t = 1..T, flattened with `width`
/// entries per position, plus the transition factors a_t.
struct PredictionTrace {
  std::size_t width = 2;
  std::vector<double> probs;
  std::vector<double> a_t;
  std::vector<StepDiagnostics> diagnostics;  // filled on request only

  std::size_t size() const noexcept { return width == 0 ? 0 : probs.size() / width; }
  /// Probability of symbol j for the prediction made after position t (1-based).
  double prob(std::size_t t, std::size_t j) const { return probs[(t - 1) * width + j]; }
  std::span<const double> at(std::size_t t) const {
    return std::span<const double>(probs).subspan((t - 1) * width, width);
  }
  void push(std::span<const double> p, double a) {
    probs.insert(probs.end(), p.begin(), p.end());
    a_t.push_back(a);
  }
};

inline PredictionTrace forward_sequence(const MambaModel& model, const TokenSequence& seq, bool diagnostics = false) {
  if (seq.tokens.empty()) throw ContractError("forward_sequence of an empty sequence");
  PredictionTrace trace;
  trace.width = model.config().alphabet;
  trace.probs.reserve(seq.size() * trace.width);
  trace.a_t.reserve(seq.size());
  RecurrentState state;
  for (Token tok : seq.tokens) {
    StepDiagnostics diag;
    const StepOutput out = forward_step(model, state, tok, diagnostics ? &diag : nullptr);
    trace.push(out.probs, out.a_t);
    if (diagnostics) trace.diagnostics.push_back(std::move(diag));
  }
  return trace;
}

inline PredictionTrace forward_sequence(const MambaParams& params, const MambaConfig& cfg, const TokenSequence& seq) {
  return forward_sequence(MambaModel(cfg, params), seq);
}

}  // namespace markov_mamba
