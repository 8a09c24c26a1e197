#include <array>
#include <cmath>
#include <cstdlib>

#include <gtest/gtest.h>

#include "markov_mamba/markov.hpp"
#include "markov_mamba/oracle.hpp"

namespace mm = markov_mamba;
using mm::Token;

TEST(SampleKernel, RowsAreOnTheSimplex) {
  mm::Rng rng = mm::make_rng(1, {mm::stream::kTest});
  for (int k = 1; k <= 4; ++k) {
    for (double beta : {0.05, 0.5, 1.0, 3.0}) {
      const mm::MarkovKernel kern = mm::sample_kernel(k, beta, rng);
      ASSERT_EQ(kern.rows.size(), std::size_t{1} << k);
      for (const auto& row : kern.rows) {
        EXPECT_NEAR(row[0] + row[1], 1.0, 1e-12);
        EXPECT_GE(row[0], 0.0);
        EXPECT_LE(row[0], 1.0);
      }
    }
  }
}

TEST(SampleKernel, UniformPriorHasMeanOneHalf) {
  mm::Rng rng = mm::make_rng(2, {mm::stream::kTest});
  double s = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) s += mm::sample_kernel(1, 1.0, rng).p_one(0);
  EXPECT_NEAR(s / n, 0.5, 0.01);
}

TEST(SampleKernel, SameSeedSameKernel) {
  mm::Rng a = mm::make_rng(3), b = mm::make_rng(3);
  EXPECT_EQ(mm::sample_kernel(3, 0.7, a), mm::sample_kernel(3, 0.7, b));
}

TEST(SampleKernel, RejectsInvalidParameters) {
  mm::Rng rng = mm::make_rng(4);
  EXPECT_THROW(mm::sample_kernel(0, 1.0, rng), mm::ParameterError);
  EXPECT_THROW(mm::sample_kernel(-1, 1.0, rng), mm::ParameterError);
  EXPECT_THROW(mm::sample_kernel(1, 0.0, rng), mm::ParameterError);
  EXPECT_THROW(mm::sample_kernel(1, -2.0, rng), mm::ParameterError);
}

TEST(SampleSequence, DeterministicKernelAlternates) {
  mm::MarkovKernel alt{.order = 1, .beta = 1.0, .rows = {{{0.0, 1.0}}, {{1.0, 0.0}}}};
  mm::Rng rng = mm::make_rng(5);
  const std::array<Token, 1> first{mm::kZero};
  const mm::TokenSequence seq = mm::sample_sequence(alt, 6, rng, first);
  EXPECT_EQ(mm::to_line(seq), "010101");
}

TEST(SampleSequence, EmpiricalTransitionsMatchKernel) {
  mm::Rng rng = mm::make_rng(6, {mm::stream::kTest});
  const mm::MarkovKernel kern = mm::sample_kernel(1, 1.0, rng);
  const mm::TokenSequence seq = mm::sample_sequence(kern, 100000, rng);
  const mm::TransitionCounts c = mm::transition_counts(seq, seq.size());
  for (int i = 0; i < 2; ++i) {
    const double n = static_cast<double>(c.n[i][0] + c.n[i][1]);
    ASSERT_GT(n, 1000.0);
    EXPECT_NEAR(static_cast<double>(c.n[i][1]) / n, kern.p_one(i), 0.01) << "row " << i;
  }
}

TEST(SampleSequence, LengthAndAlphabetContract) {
  mm::Rng rng = mm::make_rng(7);
  const mm::MarkovKernel kern = mm::sample_kernel(2, 1.0, rng);
  const mm::TokenSequence seq = mm::sample_sequence(kern, 33, rng);
  EXPECT_EQ(seq.size(), 33u);
  for (Token t : seq.tokens) EXPECT_LE(t, mm::kOne);
  EXPECT_THROW(mm::sample_sequence(kern, 1, rng), mm::ParameterError);
}

TEST(SampleSwitching, DegenerateProbabilities) {
  mm::Rng rng = mm::make_rng(8);
  const mm::TokenSequence none = mm::sample_switching({1, 1.0, 0.0, 500}, rng);
  for (Token t : none.tokens) EXPECT_NE(t, mm::kSwitch);
  const mm::TokenSequence all = mm::sample_switching({1, 1.0, 1.0, 50}, rng);
  EXPECT_EQ(mm::to_line(all), std::string(50, 'S'));
}

TEST(SampleSwitching, SwitchFrequencyMatchesProbability) {
  mm::Rng rng = mm::make_rng(9, {mm::stream::kTest});
  const mm::TokenSequence seq = mm::sample_switching({1, 1.0, 0.01, 100000}, rng);
  std::size_t s = 0;
  for (Token t : seq.tokens) s += t == mm::kSwitch;
  EXPECT_NEAR(static_cast<double>(s) / 1e5, 0.01, 0.002);
  EXPECT_EQ(seq.kernels.size(), s + 1);
}

TEST(SampleSwitching, RejectsInvalidProbability) {
  mm::Rng rng = mm::make_rng(10);
  EXPECT_THROW(mm::sample_switching({1, 1.0, 1.5, 10}, rng), mm::ParameterError);
  EXPECT_THROW(mm::sample_switching({1, 1.0, -0.1, 10}, rng), mm::ParameterError);
}

TEST(SampleBatch, SingleElementIsKernelThenSequence) {
  const auto batch = mm::sample_batch(2, 0.5, 40, 1, 11);
  mm::Rng kr = mm::make_rng(11, {0, mm::stream::kKernel});
  mm::Rng tr = mm::make_rng(11, {0, mm::stream::kTokens});
  const mm::TokenSequence direct = mm::sample_sequence(mm::sample_kernel(2, 0.5, kr), 40, tr);
  EXPECT_EQ(batch[0].tokens, direct.tokens);
  EXPECT_EQ(batch[0].kernels, direct.kernels);
}

TEST(SampleBatch, ElementsHaveDistinctKernels) {
  const auto batch = mm::sample_batch(1, 1.0, 20, 16, 12);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = i + 1; j < batch.size(); ++j) EXPECT_NE(batch[i].kernels[0], batch[j].kernels[0]);
  }
  EXPECT_THROW(mm::sample_batch(1, 1.0, 20, 0, 12), mm::ParameterError);
}

TEST(TextForm, LinesRoundTrip) {
  const auto seq = mm::from_line("01S10S");
  EXPECT_EQ(seq.alphabet, mm::Alphabet::kWithSwitch);
  EXPECT_EQ(mm::to_line(seq), "01S10S");
  EXPECT_THROW(mm::from_line("012"), mm::ParameterError);
}

TEST(MarkovProperty, GeneratorsAreBitReproducible) {
  EXPECT_EQ(mm::sample_batch(3, 0.3, 64, 8, 99), mm::sample_batch(3, 0.3, 64, 8, 99));
  const mm::SwitchingConfig cfg{2, 1.0, 0.05, 300};
  EXPECT_EQ(mm::sample_switching_batch(cfg, 4, 7), mm::sample_switching_batch(cfg, 4, 7));
  EXPECT_NE(mm::sample_batch(1, 1.0, 64, 2, 1), mm::sample_batch(1, 1.0, 64, 2, 2));
}

TEST(MarkovProperty, GeneratedTokensStayInAlphabet) {
  for (const auto& s : mm::sample_batch(2, 1.0, 200, 32, 13)) {
    for (Token t : s.tokens) ASSERT_LE(t, mm::kOne);
  }
  for (const auto& s : mm::sample_switching_batch({1, 1.0, 0.05, 200}, 32, 14)) {
    for (Token t : s.tokens) ASSERT_LE(t, mm::kSwitch);
  }
}

TEST(MarkovProperty, FirstTokensAfterSwitchFollowNoKernelRow) {
  // With deterministic kernels the only randomness after a switch is the k uniform tokens.
  const auto batch = mm::sample_switching_batch({2, 1e-4, 0.2, 2000}, 4, 15);
  std::array<std::size_t, 2> first_after{};
  for (const auto& s : batch) {
    for (std::size_t t = 1; t < s.size(); ++t) {
      if (s.tokens[t - 1] == mm::kSwitch && s.tokens[t] != mm::kSwitch) ++first_after[s.tokens[t]];
    }
  }
  const double n = static_cast<double>(first_after[0] + first_after[1]);
  ASSERT_GT(n, 500.0);
  EXPECT_NEAR(static_cast<double>(first_after[1]) / n, 0.5, 4.0 * 0.5 / std::sqrt(n));
}

TEST(MarkovProperty, TransitionCountSignFollowsEndpoints) {
  // n_01 - n_10 = [x_1 = 0, x_t = 1] - [x_1 = 1, x_t = 0] for every binary sequence up to length 14.
  for (std::size_t len = 1; len <= 14; ++len) {
    for (std::uint32_t bits = 0; bits < (1U << len); ++bits) {
      std::vector<Token> toks(len);
      for (std::size_t i = 0; i < len; ++i) toks[i] = static_cast<Token>((bits >> i) & 1U);
      const mm::TransitionCounts c = mm::transition_counts(toks, len);
      const long d = static_cast<long>(c.n[0][1]) - static_cast<long>(c.n[1][0]);
      const long expected = (toks.front() == 0 && toks.back() == 1) - (toks.front() == 1 && toks.back() == 0);
      ASSERT_EQ(d, expected) << "length " << len << " bits " << bits;
      ASSERT_LE(std::abs(d), 1);
    }
  }
}
