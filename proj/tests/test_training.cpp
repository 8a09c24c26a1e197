#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "markov_mamba/oracle.hpp"
#include "markov_mamba/training.hpp"

namespace mm = markov_mamba;

namespace {

mm::TrainConfig tiny_config(std::size_t iterations, std::uint64_t seed) {
  mm::TrainConfig cfg;
  cfg.model = mm::MambaConfig::full(4, 4, 1, 2);
  cfg.data.length = 32;
  cfg.data.batch = 8;
  cfg.iterations = iterations;
  cfg.eval_every = 10;
  cfg.eval_batch = 16;
  cfg.seed = seed;
  return cfg;
}

mm::MambaParams single_scalar(double w) {
  mm::MambaParams p;
  p.a = mm::Tensor::matrix(1, 1, {w});
  return p;
}

}  // namespace

TEST(CrossEntropy, UniformPredictionsGiveLnTwo) {
  const auto seq = mm::sample_batch(1, 1.0, 50, 1, 1)[0];
  mm::PredictionTrace tr;
  const double half[2] = {0.5, 0.5};
  for (std::size_t t = 0; t < seq.size(); ++t) tr.push(half, 1.0);
  EXPECT_NEAR(mm::cross_entropy_loss(tr, seq, 1), std::numbers::ln2, 1e-15);
}

TEST(CrossEntropy, OneHotCorrectPredictionsGiveZero) {
  const auto seq = mm::make_sequence({0, 1, 1, 0, 1});
  mm::PredictionTrace tr;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const double next = t + 1 < seq.size() ? seq.tokens[t + 1] : 0;
    const double p[2] = {1.0 - next, next};
    tr.push(p, 1.0);
  }
  EXPECT_EQ(mm::cross_entropy_loss(tr, seq, 1), 0.0);
}

TEST(CrossEntropy, ZeroProbabilityNamesPosition) {
  const auto seq = mm::make_sequence({0, 1, 1});
  mm::PredictionTrace tr;
  const double p[2] = {0.5, 0.5}, bad[2] = {1.0, 0.0};
  tr.push(p, 1.0);
  tr.push(bad, 1.0);
  tr.push(p, 1.0);
  try {
    mm::cross_entropy_loss(tr, seq, 1);
    FAIL() << "expected DomainError";
  } catch (const mm::DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("position 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(mm::cross_entropy_loss(tr, seq, 3), mm::ContractError);
}

TEST(CosineLr, Endpoints) {
  EXPECT_EQ(mm::cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(mm::cosine_lr(100, 100, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(mm::cosine_lr(50, 100, 1e-3, 1e-5), (1e-3 + 1e-5) / 2.0, 1e-18);
  EXPECT_THROW(mm::cosine_lr(101, 100, 1e-3, 0.0), mm::ContractError);
}

TEST(AdamW, ZeroGradientWithoutDecayLeavesParams) {
  auto p = single_scalar(1.25);
  mm::OptimizerState st;
  mm::AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  mm::adamw_step(p, single_scalar(0.0), st, 0.1, cfg);
  EXPECT_EQ(p.a[0], 1.25);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(st.m.at("a").shape(), p.a.shape());
}

TEST(AdamW, ZeroGradientWithDecayScalesExactly) {
  auto p = single_scalar(2.0);
  mm::OptimizerState st;
  mm::AdamWConfig cfg;
  cfg.weight_decay = 0.5;
  mm::adamw_step(p, single_scalar(0.0), st, 0.1, cfg);
  EXPECT_EQ(p.a[0], 2.0 * (1.0 - 0.1 * 0.5));
}

TEST(AdamW, ConvergesOnScalarQuadratic) {
  auto p = single_scalar(0.0);
  mm::OptimizerState st;
  mm::AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  for (int i = 0; i < 500; ++i) mm::adamw_step(p, single_scalar(2.0 * (p.a[0] - 3.0)), st, 0.1, cfg);
  EXPECT_LT(std::abs(p.a[0] - 3.0), 1e-3);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  auto p = single_scalar(0.0);
  mm::OptimizerState st;
  try {
    mm::adamw_step(p, single_scalar(NAN), st, 0.1, {});
    FAIL() << "expected DomainError";
  } catch (const mm::DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("'a'"), std::string::npos);
  }
}

TEST(TrainConfigTest, Validation) {
  auto cfg = tiny_config(10, 0);
  EXPECT_NO_THROW(cfg.validate());
  cfg.data.switching = true;
  EXPECT_THROW(cfg.validate(), mm::ParameterError);
  cfg = tiny_config(0, 0);
  EXPECT_THROW(cfg.validate(), mm::ParameterError);
  cfg = tiny_config(10, 0);
  cfg.adam.lr = 0.0;
  EXPECT_THROW(cfg.validate(), mm::ParameterError);
}

TEST(Train, LogsAtCadenceAndEnd) {
  auto cfg = tiny_config(25, 1);
  const auto r = mm::train(cfg);
  ASSERT_EQ(r.metrics.size(), 4u);
  EXPECT_EQ(r.metrics[0].iter, 0u);
  EXPECT_EQ(r.metrics[3].iter, 25u);
  EXPECT_EQ(r.metrics[3].lr, 0.0);
  for (const auto& m : r.metrics) EXPECT_NEAR(m.loss_gap, std::abs(m.eval_loss - r.oracle_eval_loss), 1e-15);
}

TEST(Train, MetricsCsvHasDocumentedColumns) {
  std::ostringstream os;
  mm::write_metrics_header(os);
  mm::write_metric_row(os, {10, 0.5, 1.0, 2.0, 0.25});
  EXPECT_EQ(os.str(), "iter,lr,train_loss,eval_loss,loss_gap\n10,0.5,1,2,0.25\n");
}

TEST(Train, AClampedNonNegative) {
  auto cfg = tiny_config(40, 2);
  cfg.adam.lr = 0.05;
  const auto r = mm::train(cfg);
  EXPECT_GE(r.params.a[0], 0.0);
}

TEST(Train, ResumeReproducesUninterruptedRun) {
  const auto cfg = tiny_config(30, 3);
  const auto full = mm::train(cfg);
  std::optional<mm::Checkpoint> mid;
  mm::TrainHooks hooks;
  hooks.on_eval = [&](const mm::MetricRow& row, const mm::Checkpoint& c) {
    if (row.iter == 10) mid = c;
  };
  auto partial = cfg;
  const auto first = mm::train(partial, hooks);
  ASSERT_TRUE(mid.has_value());
  const auto second = mm::train(cfg, {}, mid);
  EXPECT_EQ(second.params, full.params);
  EXPECT_EQ(second.optimizer, full.optimizer);
  ASSERT_EQ(second.metrics.size(), 2u);
  EXPECT_EQ(second.metrics[0], full.metrics[2]);
  EXPECT_EQ(second.metrics[1], full.metrics[3]);
  EXPECT_EQ(first.metrics, full.metrics);
}

TEST(Train, ResumeRejectsMismatchedCheckpoint) {
  const auto cfg = tiny_config(10, 4);
  mm::Checkpoint c{mm::MambaConfig::full(8, 8, 2, 2), {}, mm::OptimizerState{}, 0};
  EXPECT_THROW(mm::train(cfg, {}, c), mm::ParameterError);
}

TEST(TrainingProperty, SameSeedSameMetrics) {
  const auto cfg = tiny_config(20, 5);
  EXPECT_EQ(mm::train(cfg).metrics, mm::train(cfg).metrics);
  EXPECT_NE(mm::train(cfg).metrics, mm::train(tiny_config(20, 6)).metrics);
}

TEST(TrainingProperty, EarlyLossesFiniteAndEvalNotAboveStart) {
  // Predictions start near uniform, so give the optimizer 200 steps to move.
  auto cfg = tiny_config(200, 7);
  cfg.eval_every = 1;
  const auto r = mm::train(cfg);
  for (const auto& m : r.metrics) ASSERT_TRUE(std::isfinite(m.train_loss));
  EXPECT_LE(r.metrics.back().eval_loss, r.metrics.front().eval_loss);
}

TEST(TrainingProperty, EvalLossNotBelowOracle) {
  auto cfg = tiny_config(60, 8);
  cfg.eval_batch = 64;
  const auto r = mm::train(cfg);
  for (const auto& m : r.metrics) EXPECT_GE(m.eval_loss, r.oracle_eval_loss - 0.005) << "iter " << m.iter;
}

TEST(TrainingProperty, TrainAndEvalBatchesAreDisjointStreams) {
  const auto cfg = tiny_config(10, 9);
  const auto ev = mm::eval_batch_for(cfg);
  for (std::size_t it = 0; it < 5; ++it) {
    const auto tr = mm::train_batch_for(cfg, it);
    EXPECT_NE(tr.front().tokens, ev.front().tokens);
  }
  EXPECT_NE(mm::train_batch_for(cfg, 0), mm::train_batch_for(cfg, 1));
}

TEST(TrainingRun, SmallModelReachesOracleLoss) {
  // k = 1, d = N = 4, e = 1, w = 2, B = 64, T = 256, 10000 iterations.
  mm::TrainConfig cfg;
  cfg.model = mm::MambaConfig::full(4, 4, 1, 2);
  cfg.eval_every = 10000;
  const auto r = mm::train(cfg);
  EXPECT_LE(r.metrics.back().loss_gap, 0.02);
}
