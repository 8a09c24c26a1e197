#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "markov_mamba/graph.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/training.hpp"

namespace mm = markov_mamba;

namespace {

mm::MambaParams random_params(const mm::MambaConfig& cfg, std::uint64_t seed) {
  mm::Rng rng = mm::make_rng(seed, {mm::stream::kTest});
  return mm::init_params(cfg, rng, {mm::InitOptions::Scheme::kFanIn});
}

struct Case {
  const char* name;
  mm::MambaConfig cfg;
};

std::vector<Case> cases(std::size_t d, std::size_t n, std::size_t e, std::size_t w) {
  std::vector<Case> out;
  const auto full = mm::MambaConfig::full(d, n, e, w);
  out.push_back({"full", full});
  out.push_back({"zero", mm::MambaConfig::zero(d, n, e, w)});
  auto nc = full;
  nc.use_conv = false;
  out.push_back({"no_conv", nc});
  auto nr = full;
  nr.use_relu = false;
  out.push_back({"no_relu", nr});
  auto ng = full;
  ng.use_gating = false;
  out.push_back({"no_gating", ng});
  auto add = full;
  add.additive_mlp = true;
  out.push_back({"additive_mlp", add});
  auto zc = mm::MambaConfig::zero(d, n, e, w);
  zc.use_conv = false;
  out.push_back({"zero_no_conv", zc});
  auto sw = full;
  sw.alphabet = 3;
  out.push_back({"switching", sw});
  auto mixed = full;
  mixed.window_x = 3;
  mixed.window_c = 1;
  out.push_back({"mixed_windows", mixed});
  return out;
}

std::vector<mm::TokenSequence> batch_for(const mm::MambaConfig& cfg, std::size_t T, std::size_t B, std::uint64_t seed) {
  if (cfg.alphabet == 3) return mm::sample_switching_batch({1, 1.0, 0.1, T}, B, seed);
  return mm::sample_batch(1, 1.0, T, B, seed);
}

}  // namespace

TEST(TrainingGraphTest, MatchesRecurrentForward) {
  for (const auto& [name, cfg] : cases(4, 4, 2, 2)) {
    const auto params = random_params(cfg, 1);
    const auto seqs = batch_for(cfg, 24, 3, 2);
    mm::TrainingGraph g(cfg, 3, 24, 1);
    g.bind_params(params);
    g.bind_tokens(seqs);
    const double loss = g.forward();
    const mm::MambaModel model(cfg, params);
    double expect = 0.0;
    for (std::size_t b = 0; b < seqs.size(); ++b) {
      const auto tr = mm::forward_sequence(model, seqs[b]);
      expect += mm::cross_entropy_loss(tr, seqs[b], 1) / 3.0;
      for (std::size_t t = 1; t <= 24; ++t) {
        const mm::Tensor p = g.probs(t);
        for (std::size_t j = 0; j < cfg.alphabet; ++j) {
          ASSERT_NEAR(p(b, j), tr.prob(t, j), 1e-12) << name << " b=" << b << " t=" << t;
        }
        ASSERT_NEAR(g.a_t(t)[b], tr.a_t[t - 1], 1e-14) << name;
      }
    }
    EXPECT_NEAR(loss, expect, 1e-12) << name;
  }
}

TEST(TrainingGraphTest, LossStartSkipsEarlyPositions) {
  const auto cfg = mm::MambaConfig::full(4, 4, 1, 2);
  const auto params = random_params(cfg, 3);
  const auto seqs = mm::sample_batch(2, 1.0, 20, 2, 4);
  mm::TrainingGraph g(cfg, 2, 20, 2);
  g.bind_params(params);
  g.bind_tokens(seqs);
  const double loss = g.forward();
  double expect = 0.0;
  for (const auto& s : seqs) expect += mm::cross_entropy_loss(mm::forward_sequence(params, cfg, s), s, 2) / 2.0;
  EXPECT_NEAR(loss, expect, 1e-12);
}

TEST(TrainingGraphTest, RejectsMismatchedInputs) {
  const auto cfg = mm::MambaConfig::full(4, 4, 1, 2);
  EXPECT_THROW(mm::TrainingGraph(cfg, 2, 10, 10), mm::ParameterError);
  EXPECT_THROW(mm::TrainingGraph(cfg, 0, 10, 1), mm::ParameterError);
  mm::TrainingGraph g(cfg, 2, 10, 1);
  EXPECT_THROW(g.bind_tokens(mm::sample_batch(1, 1.0, 10, 3, 5)), mm::ContractError);
  EXPECT_THROW(g.bind_tokens(mm::sample_batch(1, 1.0, 11, 2, 5)), mm::ContractError);
  EXPECT_THROW(g.bind_tokens(mm::sample_switching_batch({1, 1.0, 1.0, 10}, 2, 5)), mm::ContractError);
  auto bad = random_params(mm::MambaConfig::full(4, 4, 2, 2), 6);
  EXPECT_THROW(g.bind_params(bad), mm::StructuralError);
}

TEST(GradientCheck, FullStackMatchesFiniteDifferences) {
  // d = N = 4, T = 16, B = 2, central differences with h = 1e-5.
  for (const auto& [name, cfg] : cases(4, 4, 2, 2)) {
    const auto params = random_params(cfg, 7);
    const auto seqs = batch_for(cfg, 16, 2, 8);
    const mm::GradCheckResult r = mm::gradient_check(cfg, params, seqs, 1);
    EXPECT_LT(r.max_rel_error, 1e-5) << name << " worst " << r.worst << " analytic " << r.worst_analytic
                                      << " numeric " << r.worst_numeric;
    EXPECT_EQ(r.coordinates, params.count()) << name;
  }
}

TEST(GradientCheck, DetectsCorruptedGradient) {
  // Negative control: a coarse step h = 0.3 leaves a visible truncation error.
  const auto cfg = mm::MambaConfig::full(4, 4, 1, 2);
  const auto params = random_params(cfg, 9);
  const auto seqs = batch_for(cfg, 16, 2, 10);
  EXPECT_GT(mm::gradient_check(cfg, params, seqs, 1, 0.3).max_rel_error, 1e-5);
}

TEST(GraphProperty, TrainingLossIsDeterministic) {
  const auto cfg = mm::MambaConfig::full(4, 4, 2, 2);
  const auto params = random_params(cfg, 11);
  const auto seqs = mm::sample_batch(1, 1.0, 32, 4, 12);
  mm::TrainingGraph a(cfg, 4, 32, 1), b(cfg, 4, 32, 1);
  a.bind_params(params);
  a.bind_tokens(seqs);
  b.bind_params(params);
  b.bind_tokens(seqs);
  EXPECT_EQ(a.forward(), b.forward());
  const auto ga = a.backward(), gb = b.backward();
  EXPECT_EQ(ga, gb);
}
