#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace markov_mamba {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a root seed and a path of stream ids,
/// e.g. derive_seed(seed, {iteration, sequence_index}). Order of the path matters.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = mix64(root);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> path = {}) {
  return Rng(derive_seed(root, path));
}

// Stream tags keep kernel draws and token draws of one sequence apart.
namespace stream {
inline constexpr std::uint64_t kKernel = 0x4b45524e;    // "KERN"
inline constexpr std::uint64_t kTokens = 0x544f4b53;    // "TOKS"
inline constexpr std::uint64_t kTrain = 0x545241494e;   // "TRAIN"
inline constexpr std::uint64_t kEval = 0x4556414c;      // "EVAL"
inline constexpr std::uint64_t kInit = 0x494e4954;      // "INIT"
inline constexpr std::uint64_t kTest = 0x54455354;      // "TEST"
}  // namespace stream

}  // namespace markov_mamba
