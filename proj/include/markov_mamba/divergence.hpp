#pragma once

#include <cmath>
#include <cstddef>
#include <span>

#include "markov_mamba/errors.hpp"

namespace markov_mamba {

/// KL(p || q) = sum p log(p / q), natural log; terms with p = 0 contribute 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ContractError("kl_divergence: supports differ in size");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (!(q[i] > 0.0)) throw DomainError("infinite divergence: q vanishes where p > 0 (index " + std::to_string(i) + ")");
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

inline double l1_norm_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ContractError("l1 distance: sizes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return s;
}

}  // namespace markov_mamba
