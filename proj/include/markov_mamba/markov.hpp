#pragma once

// Random order-k binary Markov sources with Dirichlet(beta, beta) rows, and the
// switching variant whose kernel is redrawn after every switch token S.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/rng.hpp"

namespace markov_mamba {

using Token = std::uint8_t;

inline constexpr Token kZero = 0;
inline constexpr Token kOne = 1;
inline constexpr Token kSwitch = 2;

enum class Alphabet { kBinary, kWithSwitch };

inline std::size_t alphabet_size(Alphabet a) { return a == Alphabet::kBinary ? 2 : 3; }

/// 53-bit uniform on [0, 1); independent of the standard library's distribution code.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline Token uniform_bit(Rng& rng) { return static_cast<Token>(rng() >> 63); }

/// Context of the k tokens ending at `end` (exclusive), oldest token as the
/// most significant bit.
inline std::size_t context_index(std::span<const Token> tokens, std::size_t end, int k) {
  std::size_t idx = 0;
  for (std::size_t i = end - static_cast<std::size_t>(k); i < end; ++i) idx = (idx << 1) | tokens[i];
  return idx;
}

struct MarkovKernel {
  int order = 1;
  double beta = 1.0;
  // rows[ctx] = {P(0|ctx), P(1|ctx)}, 2^order rows.
  std::vector<std::array<double, 2>> rows;

  double p_one(std::size_t ctx) const { return rows.at(ctx)[1]; }
  friend bool operator==(const MarkovKernel&, const MarkovKernel&) = default;
};

struct TokenSequence {
  std::vector<Token> tokens;
  Alphabet alphabet = Alphabet::kBinary;
  std::uint64_t seed = 0;
  // Generating kernels in order of use; the switching source appends one per segment.
  std::vector<MarkovKernel> kernels = {};

  std::size_t size() const noexcept { return tokens.size(); }
  Token operator[](std::size_t i) const { return tokens[i]; }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

struct SwitchingConfig {
  int order = 1;
  double beta = 1.0;
  double p_switch = 0.01;
  std::size_t length = 256;

  void validate() const {
    if (order < 1) throw ParameterError("switching order must be >= 1");
    if (!(beta > 0.0)) throw ParameterError("switching beta must be > 0");
    if (!(p_switch >= 0.0 && p_switch <= 1.0)) throw ParameterError("p_switch must lie in [0,1]");
  }
};

inline MarkovKernel sample_kernel(int k, double beta, Rng& rng) {
  if (k < 1) throw ParameterError("Markov order must be >= 1, got " + std::to_string(k));
  if (!(beta > 0.0)) throw ParameterError("Dirichlet concentration must be > 0");
  if (k > 24) throw ParameterError("Markov order too large");
  MarkovKernel kernel{.order = k, .beta = beta, .rows = {}};
  kernel.rows.resize(std::size_t{1} << k);
  std::gamma_distribution<double> gamma(beta, 1.0);
  for (auto& row : kernel.rows) {
    const double g0 = gamma(rng);
    const double g1 = gamma(rng);
    const double total = g0 + g1;
    // Both draws can underflow for tiny beta; the limit law puts all mass on one symbol.
    const double p0 = total > 0.0 ? g0 / total : static_cast<double>(uniform_bit(rng));
    row = {p0, 1.0 - p0};
  }
  return kernel;
}

/// First k tokens uniform (or taken from `forced_prefix`), then x_{t+1} drawn
/// from the kernel row of the preceding k tokens.
inline TokenSequence sample_sequence(const MarkovKernel& kernel, std::size_t length, Rng& rng,
                                     std::span<const Token> forced_prefix = {}) {
  const auto k = static_cast<std::size_t>(kernel.order);
  if (length < k) {
    throw ParameterError("sequence length " + std::to_string(length) + " shorter than order " + std::to_string(k));
  }
  if (forced_prefix.size() > length) throw ParameterError("forced prefix longer than sequence");
  TokenSequence seq;
  seq.tokens.reserve(length);
  for (std::size_t t = 0; t < length; ++t) {
    Token x;
    if (t < k) {
      x = uniform_bit(rng);
    } else {
      x = uniform01(rng) < kernel.p_one(context_index(seq.tokens, t, kernel.order)) ? kOne : kZero;
    }
    if (t < forced_prefix.size()) {
      if (forced_prefix[t] > kOne) throw ParameterError("forced prefix must be binary");
      x = forced_prefix[t];
    }
    seq.tokens.push_back(x);
  }
  seq.kernels.push_back(kernel);
  return seq;
}

/// Switching source: at every step emit S with probability p_switch and redraw
/// the kernel; the first k tokens after a switch (and at the start) are uniform.
inline TokenSequence sample_switching(const SwitchingConfig& cfg, Rng& kernel_rng, Rng& token_rng) {
  cfg.validate();
  const auto k = static_cast<std::size_t>(cfg.order);
  TokenSequence seq;
  seq.alphabet = Alphabet::kWithSwitch;
  seq.tokens.reserve(cfg.length);
  seq.kernels.push_back(sample_kernel(cfg.order, cfg.beta, kernel_rng));
  std::size_t since_switch = 0;
  for (std::size_t t = 0; t < cfg.length; ++t) {
    if (uniform01(token_rng) < cfg.p_switch) {
      seq.tokens.push_back(kSwitch);
      seq.kernels.push_back(sample_kernel(cfg.order, cfg.beta, kernel_rng));
      since_switch = 0;
      continue;
    }
    Token x;
    if (since_switch < k) {
      x = uniform_bit(token_rng);
    } else {
      x = uniform01(token_rng) < seq.kernels.back().p_one(context_index(seq.tokens, t, cfg.order)) ? kOne : kZero;
    }
    seq.tokens.push_back(x);
    ++since_switch;
  }
  return seq;
}

inline TokenSequence sample_switching(const SwitchingConfig& cfg, Rng& rng) { return sample_switching(cfg, rng, rng); }

/// Sequence `index` of the batch rooted at `seed`: fresh kernel and token streams.
inline TokenSequence sample_one(int k, double beta, std::size_t length, std::uint64_t seed, std::uint64_t index) {
  Rng kernel_rng = make_rng(seed, {index, stream::kKernel});
  Rng token_rng = make_rng(seed, {index, stream::kTokens});
  TokenSequence seq = sample_sequence(sample_kernel(k, beta, kernel_rng), length, token_rng);
  seq.seed = seed;
  return seq;
}

inline std::vector<TokenSequence> sample_batch(int k, double beta, std::size_t length, std::size_t batch,
                                               std::uint64_t seed) {
  if (batch < 1) throw ParameterError("batch size must be >= 1");
  std::vector<TokenSequence> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) out.push_back(sample_one(k, beta, length, seed, b));
  return out;
}

inline std::vector<TokenSequence> sample_switching_batch(const SwitchingConfig& cfg, std::size_t batch,
                                                         std::uint64_t seed) {
  if (batch < 1) throw ParameterError("batch size must be >= 1");
  std::vector<TokenSequence> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Rng kernel_rng = make_rng(seed, {b, stream::kKernel});
    Rng token_rng = make_rng(seed, {b, stream::kTokens});
    out.push_back(sample_switching(cfg, kernel_rng, token_rng));
    out.back().seed = seed;
  }
  return out;
}

// ---- text form: one sequence per line, characters 0 / 1 / S -------------

inline std::string to_line(const TokenSequence& seq) {
  std::string s;
  s.reserve(seq.size());
  for (Token t : seq.tokens) s.push_back(t == kSwitch ? 'S' : static_cast<char>('0' + t));
  return s;
}

inline TokenSequence from_line(std::string_view line) {
  TokenSequence seq;
  seq.tokens.reserve(line.size());
  for (char c : line) {
    switch (c) {
      case '0': seq.tokens.push_back(kZero); break;
      case '1': seq.tokens.push_back(kOne); break;
      case 'S':
        seq.tokens.push_back(kSwitch);
        seq.alphabet = Alphabet::kWithSwitch;
        break;
      default: throw ParameterError(std::string("invalid token character '") + c + "'");
    }
  }
  return seq;
}

inline TokenSequence make_sequence(std::initializer_list<int> tokens) {
  TokenSequence seq;
  for (int t : tokens) {
    if (t < 0 || t > 2) throw ParameterError("token out of range");
    seq.tokens.push_back(static_cast<Token>(t));
    if (t == kSwitch) seq.alphabet = Alphabet::kWithSwitch;
  }
  return seq;
}

}  // namespace markov_mamba
