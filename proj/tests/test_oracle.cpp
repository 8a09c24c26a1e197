#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "markov_mamba/markov.hpp"
#include "markov_mamba/oracle.hpp"
#include "markov_mamba/training.hpp"

namespace mm = markov_mamba;
using mm::make_sequence;

namespace {

/// E[p | counts] under a Beta(beta, beta) prior, by midpoint quadrature on `grid` points in log space.
double posterior_mean_p1(const mm::ContextCounts& c, double beta, int grid = 1000000) {
  const double a = static_cast<double>(c.n1) + beta - 1.0;
  const double b = static_cast<double>(c.n0()) + beta - 1.0;
  std::vector<double> logw(grid);
  double top = -INFINITY;
  for (int i = 0; i < grid; ++i) {
    const double p = (i + 0.5) / grid;
    logw[i] = a * std::log(p) + b * std::log1p(-p);
    top = std::max(top, logw[i]);
  }
  double num = 0.0, den = 0.0;
  for (int i = 0; i < grid; ++i) {
    const double p = (i + 0.5) / grid;
    const double w = std::exp(logw[i] - top);
    num += p * w;
    den += w;
  }
  return num / den;
}

}  // namespace

TEST(CountContext, EnumeratedExamples) {
  const auto alt = make_sequence({0, 1, 0, 1, 0, 1});
  EXPECT_EQ(mm::count_context(alt, 6, 1), (mm::ContextCounts{2, 0}));
  const auto blocks = make_sequence({0, 0, 0, 1, 1, 1});
  EXPECT_EQ(mm::count_context(blocks, 6, 1), (mm::ContextCounts{2, 2}));
  EXPECT_EQ(mm::count_context(alt, 1, 1), (mm::ContextCounts{0, 0}));
  EXPECT_EQ(mm::count_context(make_sequence({1, 1, 0, 1, 1}), 2, 2), (mm::ContextCounts{0, 0}));
}

TEST(CountContext, PositionBeforeOrderIsContractError) {
  EXPECT_THROW(mm::count_context(make_sequence({0, 1, 0}), 1, 2), mm::ContractError);
}

TEST(AddBetaPredict, AppendixPairOfSequences) {
  EXPECT_EQ(mm::add_beta_predict(make_sequence({0, 1, 0, 1, 0, 1}), 6, 1, 1.0)[1], 0.25);
  EXPECT_EQ(mm::add_beta_predict(make_sequence({0, 0, 0, 1, 1, 1}), 6, 1, 1.0)[1], 0.75);
}

TEST(AddBetaPredict, EmptyCountsGiveOneHalf) {
  for (double beta : {0.01, 0.5, 1.0, 7.0}) {
    EXPECT_EQ(mm::add_beta(mm::ContextCounts{0, 0}, beta)[1], 0.5);
  }
}

TEST(AddBetaPredict, SecondOrderBruteForce) {
  const auto seq = make_sequence({1, 1, 0, 1, 1});
  EXPECT_EQ(mm::count_context(seq, 5, 2), (mm::ContextCounts{1, 0}));
  EXPECT_DOUBLE_EQ(mm::add_beta_predict(seq, 5, 2, 0.5)[1], 0.25);
}

TEST(AddBetaPredict, BeforeOrderIsUniform) {
  const auto p = mm::add_beta_predict(make_sequence({1, 0, 1}), 2, 3, 1.0);
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
}

TEST(SwitchingPredict, SwitchJustBeforeResetsCounts) {
  const auto seq = mm::from_line("0110S0");
  const auto p = mm::switching_predict(seq, 6, 1, 1.0, 0.01);
  EXPECT_DOUBLE_EQ(p[0], 0.99 / 2);
  EXPECT_DOUBLE_EQ(p[1], 0.99 / 2);
  EXPECT_EQ(p[2], 0.01);
}

TEST(SwitchingPredict, SegmentReusesAppendixCase) {
  const auto seq = mm::from_line("1101S010101");
  const auto p = mm::switching_predict(seq, seq.size(), 1, 1.0, 0.01);
  EXPECT_DOUBLE_EQ(p[1], 0.99 * 0.25);
}

TEST(TransitionCountsTest, Examples) {
  const auto c = mm::transition_counts(make_sequence({0, 1, 0, 1, 0, 1}), 6);
  EXPECT_EQ(c.n01(), 3u);
  EXPECT_EQ(c.n10(), 2u);
  EXPECT_EQ(c.n01(), c.n10() + 1);
  const auto z = mm::transition_counts(make_sequence({0, 0, 0}), 3);
  EXPECT_EQ(z.n00(), 2u);
  EXPECT_EQ(z.total(), 2u);
}

TEST(OracleLoss, ConstantSequenceWithSmallBetaIsNearZeroLate) {
  const auto seq = mm::from_line(std::string(400, '0'));
  const std::vector<mm::TokenSequence> batch{seq};
  EXPECT_LT(mm::oracle_loss(batch, 1, 1e-3), 0.02);
  const auto rows = mm::oracle_trace(seq, 1, 1e-3);
  EXPECT_LT(-std::log(rows.back().probs[0]), 1e-5);
  EXPECT_THROW(mm::oracle_loss(std::span<const mm::TokenSequence>(), 1, 1.0), mm::ContractError);
}

TEST(OracleLoss, EqualsCrossEntropyOfOracleTrace) {
  const auto batch = mm::sample_batch(2, 0.7, 128, 16, 31);
  double total = 0.0;
  for (const auto& seq : batch) {
    mm::PredictionTrace tr;
    for (const auto& r : mm::oracle_trace(seq, 2, 0.7)) tr.push(std::span<const double>(r.probs.data(), 2), 1.0);
    total += mm::cross_entropy_loss(tr, seq, 2);
  }
  EXPECT_EQ(total / 16.0, mm::oracle_loss(batch, 2, 0.7));
}

TEST(OracleLoss, RegressionPin) {
  // beta = 1, k = 1, T = 512, 1024 sequences from root seed 2024; value recorded from this implementation.
  const auto batch = mm::sample_batch(1, 1.0, 512, 1024, 2024);
  EXPECT_NEAR(mm::oracle_loss(batch, 1, 1.0), 0.48842793140717905, 1e-12);
}

TEST(OracleTrace, CsvHasDocumentedColumns) {
  std::ostringstream os;
  mm::write_oracle_csv(os, mm::oracle_trace(make_sequence({0, 1, 1}), 1, 1.0), 1, false);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t,context,n,n_1,P0,P1");
}

TEST(OracleProperty, PredictionsArePositiveAndNormalized) {
  for (const auto& seq : mm::sample_batch(3, 0.3, 200, 8, 41)) {
    for (const auto& r : mm::oracle_trace(seq, 3, 0.3)) {
      EXPECT_GT(r.probs[0], 0.0);
      EXPECT_GT(r.probs[1], 0.0);
      EXPECT_LT(std::abs(r.probs[0] + r.probs[1] - 1.0), 1e-15);
    }
  }
}

TEST(OracleProperty, TraceMatchesDirectEnumeration) {
  for (int k = 1; k <= 3; ++k) {
    for (const auto& seq : mm::sample_batch(k, 1.0, 60, 4, 43 + k)) {
      const auto rows = mm::oracle_trace(seq, k, 1.0);
      for (std::size_t t = 1; t <= seq.size(); ++t) {
        const auto p = mm::add_beta_predict(seq, t, k, 1.0);
        ASSERT_EQ(rows[t - 1].probs[1], p[1]) << "k=" << k << " t=" << t;
      }
    }
  }
}

TEST(OracleProperty, MatchesBetaPosteriorMeanByQuadrature) {
  mm::Rng rng = mm::make_rng(47, {mm::stream::kTest});
  const auto batch = mm::sample_batch(1, 1.0, 60, 50, 47);
  for (const auto& seq : batch) {
    const std::size_t t = 1 + rng() % seq.size();
    const mm::ContextCounts c = mm::count_context(seq, t, 1);
    EXPECT_NEAR(mm::add_beta_predict(seq, t, 1, 1.0)[1], posterior_mean_p1(c, 1.0), 1e-6)
        << "n=" << c.n << " n1=" << c.n1;
  }
}

TEST(OracleProperty, SwitchingReducesToAddBetaWithoutSwitches) {
  for (const auto& seq : mm::sample_batch(2, 0.5, 100, 6, 53)) {
    for (std::size_t t = 1; t <= seq.size(); ++t) {
      const auto s = mm::switching_predict(seq, t, 2, 0.5, 0.0);
      const auto p = mm::add_beta_predict(seq, t, 2, 0.5);
      ASSERT_EQ(s[0], p[0]);
      ASSERT_EQ(s[1], p[1]);
      ASSERT_EQ(s[2], 0.0);
    }
  }
}

TEST(OracleProperty, SwitchingTraceMatchesPointwisePredictor) {
  for (const auto& seq : mm::sample_switching_batch({2, 1.0, 0.05, 200}, 4, 59)) {
    const auto rows = mm::switching_oracle_trace(seq, 2, 1.0, 0.05);
    for (std::size_t t = 1; t <= seq.size(); ++t) {
      const auto p = mm::switching_predict(seq, t, 2, 1.0, 0.05);
      ASSERT_DOUBLE_EQ(rows[t - 1].probs[1], p[1]) << "t=" << t;
    }
  }
}

TEST(OracleProperty, TransitionCountsAtMostOneApart) {
  for (std::size_t len = 1; len <= 14; ++len) {
    for (std::uint32_t bits = 0; bits < (1U << len); ++bits) {
      std::vector<mm::Token> toks(len);
      for (std::size_t i = 0; i < len; ++i) toks[i] = static_cast<mm::Token>((bits >> i) & 1U);
      const auto c = mm::transition_counts(toks, len);
      ASSERT_EQ(c.total(), len - 1);
      ASSERT_LE(c.n01() > c.n10() ? c.n01() - c.n10() : c.n10() - c.n01(), 1u);
      if (toks.front() == toks.back()) {
        ASSERT_EQ(c.n01(), c.n10());
      }
    }
  }
}

TEST(OracleProperty, ConfusablePairSharesUnigramsButNotPredictions) {
  const auto x = make_sequence({0, 1, 0, 1, 0, 1});
  const auto y = make_sequence({0, 0, 0, 1, 1, 1});
  for (int v = 0; v < 2; ++v) {
    EXPECT_EQ(std::count(x.tokens.begin(), x.tokens.end(), v), std::count(y.tokens.begin(), y.tokens.end(), v));
  }
  EXPECT_EQ(x.tokens.back(), y.tokens.back());
  EXPECT_NE(mm::add_beta_predict(x, 6, 1, 1.0)[1], mm::add_beta_predict(y, 6, 1, 1.0)[1]);
}
