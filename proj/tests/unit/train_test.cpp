// SPDX-License-Identifier: Apache-2.0
#include "ctquant/train.hpp"

#include <gtest/gtest.h>

#include "ctquant/error.hpp"
#include "ctquant/metrics.hpp"

namespace ctquant {
namespace {

template <typename Fn>
ErrorCode CodeOf(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a ctquant::Error";
  return ErrorCode::InvalidArgument;
}

FusionConfig SmallConfig() {
  FusionConfig c;
  c.deep_dim = 16;
  c.embed = 8;
  c.head_dim = 4;
  c.encoder_hidden = 16;
  c.seed = 3;
  return c;
}

struct Splits {
  std::vector<FeatureRecord> train, val, test;
};

Splits MakeSplits(double effect, std::uint64_t seed) {
  const auto all = synthetic_cohort(600, 16, 3, effect, seed);
  return {{all.begin(), all.begin() + 400}, {all.begin() + 400, all.begin() + 500}, {all.begin() + 500, all.end()}};
}

TEST(Train, ZeroEpochsLeavesParametersAlone) {
  const Splits s = MakeSplits(3.0, 1);
  const FusionModel init = init_model(SmallConfig());
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train(init, s.train, s.val, cfg);
  EXPECT_EQ(r.model.version_hash(), init.version_hash());
  EXPECT_EQ(r.history.size(), 1u);
  EXPECT_EQ(r.best_epoch, 0);
  EXPECT_TRUE(r.model.normalizer.has_value());
}

TEST(Train, LearnsTheInformativeBiomarker) {
  const Splits s = MakeSplits(3.0, 2);
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 2;
  const TrainResult r = train(init_model(SmallConfig()), s.train, s.val, cfg);
  EXPECT_GE(r.best_val_auc, 0.95);
  EXPECT_LT(r.history[static_cast<std::size_t>(r.best_epoch)].val_loss, r.history[0].val_loss);
  EXPECT_GE(roc_auc(score_records(r.model, s.test), labels_of(s.test)), 0.93);
  std::vector<double> mean(19, 0.0);
  for (const auto& rec : s.test) {
    const auto p = predict(r.model, rec);
    for (int i = 0; i < 19; ++i) mean[i] += p.contributions[i];
  }
  for (int i = 0; i < 19; ++i)
    if (i != 4) EXPECT_GT(mean[4], mean[i]) << "token " << i;
}

TEST(Train, SameSeedSameCurve) {
  const Splits s = MakeSplits(1.0, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  const TrainResult a = train(init_model(SmallConfig()), s.train, s.val, cfg);
  const TrainResult b = train(init_model(SmallConfig()), s.train, s.val, cfg);
  EXPECT_EQ(history_to_csv(a.history), history_to_csv(b.history));
  EXPECT_EQ(model_to_json(a.model), model_to_json(b.model));
  cfg.seed = 9;
  const TrainResult c = train(init_model(SmallConfig()), s.train, s.val, cfg);
  EXPECT_NE(history_to_csv(a.history), history_to_csv(c.history));
}

TEST(Train, EarlyStopsAfterPatience) {
  const Splits s = MakeSplits(0.0, 4);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.patience = 2;
  const TrainResult r = train(init_model(SmallConfig()), s.train, s.val, cfg);
  EXPECT_LT(r.history.size(), 51u);
  EXPECT_EQ(static_cast<int>(r.history.size()) - 1, r.best_epoch + 2);
}

TEST(Train, Errors) {
  Splits s = MakeSplits(1.0, 5);
  for (auto& r : s.val) r.label = 0;
  EXPECT_EQ(CodeOf([&] { train(init_model(SmallConfig()), s.train, s.val, TrainConfig{}); }), ErrorCode::NoPositives);
  s.val[0].label.reset();
  EXPECT_EQ(CodeOf([&] { train(init_model(SmallConfig()), s.train, s.val, TrainConfig{}); }),
            ErrorCode::InvalidArgument);
  TrainConfig bad;
  bad.learning_rate = 0;
  EXPECT_EQ(CodeOf([&] { bad.validate(); }), ErrorCode::InvalidArgument);
}

TEST(Train, ScoresMatchPredict) {
  const Splits s = MakeSplits(1.0, 6);
  FusionModel m = init_model(SmallConfig());
  m.normalizer = fit_normalizer(s.train);
  const auto p = score_records(m, s.test);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(p[i], predict(m, s.test[i]).probability, 1e-13);
}

}  // namespace
}  // namespace ctquant
