// SPDX-License-Identifier: Apache-2.0
#include "ctquant/fusion.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"
#include "support/gradcheck.hpp"

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

FusionInput RandomInput(const FusionConfig& c, Rng& rng) {
  FusionInput in;
  for (int d = 0; d < c.deep_dim; ++d) in.x1.push_back(rng.normal());
  for (int i = 0; i < c.n_biomarkers; ++i) in.biomarkers.push_back(rng.normal());
  return in;
}

double Logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

TEST(Fusion, DefaultShapes) {
  const FusionModel model = init_model(FusionConfig{});
  Rng rng(1);
  const FusionTrace tr = trace(model, RandomInput(model.config, rng));
  EXPECT_EQ(tr.E.rows, 19);
  EXPECT_EQ(tr.E.cols, 32);
  EXPECT_EQ(tr.G.rows, 19);
  EXPECT_EQ(tr.G.cols, 32);
  ASSERT_EQ(tr.attention.size(), 2u);
  EXPECT_EQ(tr.attention[0].rows, 19);
  EXPECT_EQ(tr.attention[0].cols, 19);
  EXPECT_EQ(tr.m.cols, 19 * 32);
  EXPECT_EQ(tr.s.cols, 19);
  EXPECT_EQ(tr.c.cols, 32);
  EXPECT_GT(tr.probability, 0.0);
  EXPECT_LT(tr.probability, 1.0);

  // encoders + GRNs + attention + contribution + classifier
  const std::size_t L = 32, H = 64, T = 19;
  const std::size_t enc = (512 * H + H + H * L + L) + 18 * (H + H + H * L + L);
  const std::size_t grn = T * (2 * (L * L + L) + L * 2 * L + 2 * L + 2 * L);
  const std::size_t attn = 2 * 3 * L * 16 + 32 * L;
  EXPECT_EQ(model.parameter_count(), enc + grn + attn + (T * L * T + T) + (L + 1));
}

TEST(Fusion, InitIsSeededAndLayerNormStartsAtIdentity) {
  FusionConfig c = testing::ToyConfig(3);
  const FusionModel a = init_model(c), b = init_model(c);
  EXPECT_EQ(a.version_hash(), b.version_hash());
  c.seed = 4;
  EXPECT_NE(init_model(c).version_hash(), a.version_hash());
  for (double g : a.param("grn2.gain").v) EXPECT_EQ(g, 1.0);
  for (double g : a.param("grn2.bias").v) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(CodeOf([&] { a.param("nope"); }), ErrorCode::InvalidArgument);
}

TEST(Fusion, ChangingOneBiomarkerTouchesOnlyItsRow) {
  const FusionModel model = init_model(FusionConfig{});
  Rng rng(2);
  const FusionInput base = RandomInput(model.config, rng);
  for (int j : {0, 7, 17}) {
    FusionInput changed = base;
    changed.biomarkers[j] = 0.0;
    const FusionTrace a = trace(model, base), b = trace(model, changed);
    for (int r = 0; r < 19; ++r) {
      bool e_same = true, g_same = true;
      for (int c = 0; c < 32; ++c) {
        e_same = e_same && a.E(r, c) == b.E(r, c);
        g_same = g_same && a.G(r, c) == b.G(r, c);
      }
      EXPECT_EQ(e_same, r != j + 1) << "biomarker " << j << " row " << r;
      EXPECT_EQ(g_same, r != j + 1) << "biomarker " << j << " row " << r;
    }
  }
}

TEST(Fusion, StagesComposeToTrace) {
  const FusionModel model = init_model(testing::ToyConfig(5));
  Rng rng(5);
  const FusionInput in = RandomInput(model.config, rng);
  const FusionTrace tr = trace(model, in);
  const Tensor2 E = encode(model, in);
  EXPECT_EQ(E.v, tr.E.v);
  const Tensor2 G = grn_apply(model, E);
  EXPECT_EQ(G.v, tr.G.v);
  const Interaction it = interact(model, G);
  EXPECT_EQ(it.m.v, tr.m.v);
  EXPECT_EQ(it.s.v, tr.s.v);
  EXPECT_DOUBLE_EQ(combine_and_classify(model, it.s, G), tr.probability);
}

TEST(Fusion, ScoresAreADistribution) {
  const FusionModel model = init_model(FusionConfig{});
  Rng rng(9);
  for (int k = 0; k < 20; ++k) {
    FusionInput in = RandomInput(model.config, rng);
    for (double& x : in.biomarkers) x *= 5.0;
    const FusionTrace tr = trace(model, in);
    double sum = 0.0;
    for (double s : tr.s.v) {
      EXPECT_GE(s, 0.0);
      sum += s;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    for (const auto& a : tr.attention) {
      for (int r = 0; r < a.rows; ++r) {
        double row = 0.0;
        for (int c = 0; c < a.cols; ++c) row += a(r, c);
        EXPECT_NEAR(row, 1.0, 1e-12);
      }
    }
  }
}

TEST(Fusion, IdenticalTokensGetUniformAttention) {
  const FusionModel model = init_model(FusionConfig{});
  Rng rng(4);
  Tensor2 G(19, 32);
  std::vector<double> row(32);
  for (double& x : row) x = rng.normal();
  for (int r = 0; r < 19; ++r)
    for (int c = 0; c < 32; ++c) G(r, c) = row[static_cast<std::size_t>(c)];
  const Interaction it = interact(model, G);
  ASSERT_EQ(it.attention.size(), 2u);
  for (const auto& a : it.attention)
    for (double w : a.v) EXPECT_NEAR(w, 1.0 / 19.0, 1e-12);
}

TEST(Fusion, OneHotScoreSelectsThatToken) {
  const FusionModel model = init_model(testing::ToyConfig(6));
  Rng rng(6);
  Tensor2 G(4, 4);
  for (double& x : G.v) x = rng.normal();
  const Tensor2& w = model.param("cls.W");
  const double b = model.param("cls.b").v[0];
  for (int k = 0; k < 4; ++k) {
    Tensor2 s(1, 4);
    s.v[k] = 1.0;
    double logit = b;
    for (int c = 0; c < 4; ++c) logit += G(k, c) * w.v[c];
    EXPECT_NEAR(combine_and_classify(model, s, G), Logistic(logit), 1e-14);
  }
}

TEST(Fusion, BatchForwardMatchesSingleRecords) {
  const FusionModel model = init_model(testing::ToyConfig(8));
  Rng rng(8);
  std::vector<FusionInput> inputs;
  for (int b = 0; b < 6; ++b) inputs.push_back(RandomInput(model.config, rng));
  Tape t;
  const FusionVars fv = forward(t, model, make_batch(inputs), nullptr, false);
  for (int b = 0; b < 6; ++b) {
    const FusionTrace tr = trace(model, inputs[b]);
    EXPECT_NEAR(t.value(fv.logits).v[b], tr.logit, 1e-13);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(t.value(fv.scores)(b, k), tr.s.v[k], 1e-13);
  }
}

TEST(Fusion, DropoutMasksAreInvertedAndSeeded) {
  const FusionConfig c = testing::ToyConfig(1);
  const auto a = draw_dropout_masks(c, 50, 11), b = draw_dropout_masks(c, 50, 11);
  ASSERT_EQ(a.size(), 4u);
  std::size_t zeros = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].v, b[i].v);
    for (double x : a[i].v) {
      EXPECT_TRUE(x == 0.0 || x == 1.0 / 0.75);
      zeros += x == 0.0;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / total, 0.25, 0.05);
}

TEST(Fusion, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = testing::CheckFusionGradient(testing::ToyConfig(seed), 4, seed);
    EXPECT_GT(r.checked, 300u);
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Fusion, PredictAppliesEmbeddedNormalizer) {
  FusionModel model = init_model(testing::ToyConfig(2));
  FeatureRecord rec;
  rec.scan_id = "s1";
  Rng rng(2);
  for (int d = 0; d < 6; ++d) rec.x1.push_back(rng.normal(10.0, 3.0));
  for (auto& f : rec.biomarkers.fields) f = Measurement::ok(rng.normal(5.0, 2.0));
  rec.biomarkers.fields[1] = Measurement::failed();
  NormalizationStats n;
  n.x1_mean.assign(6, 10.0);
  n.x1_std.assign(6, 3.0);
  n.bio_mean.fill(5.0);
  n.bio_std.fill(2.0);
  model.normalizer = n;
  const PredictionReport r = predict(model, rec);
  FusionInput in = to_fusion_input(apply_normalizer(n, rec), 3);
  EXPECT_EQ(in.biomarkers[1], 0.0);
  EXPECT_EQ(r.probability, trace(model, in).probability);
  EXPECT_EQ(r.names, (std::vector<std::string>{"deep_features", "PFATV", "PFATM", "PFATSTD"}));
  EXPECT_EQ(r.model_hash, model.version_hash());

  const auto j = nlohmann::json::parse(predictions_to_json({r}));
  EXPECT_EQ(j[0]["scan_id"], "s1");
  EXPECT_EQ(j[0]["contributions"].size(), 4u);
}

TEST(Fusion, RejectsMismatchedInput) {
  const FusionModel model = init_model(testing::ToyConfig(1));
  FusionInput in;
  in.x1.assign(5, 0.0);
  in.biomarkers.assign(3, 0.0);
  EXPECT_EQ(CodeOf([&] { trace(model, in); }), ErrorCode::ShapeMismatch);
  EXPECT_EQ(CodeOf([&] { interact(model, Tensor2(3, 4)); }), ErrorCode::ShapeMismatch);
  FusionConfig bad;
  bad.dropout = 1.0;
  EXPECT_EQ(CodeOf([&] { init_model(bad); }), ErrorCode::InvalidArgument);
}

TEST(ModelFile, RoundTripIsExact) {
  FusionModel model = init_model(testing::ToyConfig(12));
  NormalizationStats n;
  n.x1_mean = {0.1, 0.2, 1.0 / 3.0, 4, 5, 6};
  n.x1_std = {1, 2, 3, 4, 5, 1e-8};
  n.bio_mean.fill(0.7);
  n.bio_std.fill(1.3);
  model.normalizer = n;
  const std::string text = model_to_json(model);
  const FusionModel back = model_from_json(text);
  EXPECT_EQ(back.names, model.names);
  for (std::size_t i = 0; i < model.params.size(); ++i) EXPECT_EQ(back.params[i].v, model.params[i].v);
  ASSERT_TRUE(back.normalizer.has_value());
  EXPECT_EQ(back.normalizer->x1_mean, n.x1_mean);
  EXPECT_EQ(back.version_hash(), model.version_hash());
  EXPECT_EQ(model_to_json(back), text);
}

TEST(ModelFile, SingleByteTamperingIsDetected) {
  const std::string text = model_to_json(init_model(testing::ToyConfig(13)));
  Rng rng(13);
  for (int k = 0; k < 300; ++k) {
    std::string bad = text;
    const std::size_t pos = rng.below(bad.size());
    bad[pos] = static_cast<char>(bad[pos] ^ (1 + rng.below(255)));
    EXPECT_EQ(CodeOf([&] { model_from_json(bad); }), ErrorCode::HashMismatch) << "byte " << pos;
  }
}

TEST(ModelFile, RejectsOtherFormatVersions) {
  std::string text = model_to_json(init_model(testing::ToyConfig(14)));
  const std::string key = "\"format_version\": 1";
  text.replace(text.find(key), key.size(), "\"format_version\": 2");
  const auto tail = text.rfind(",\n  \"sha256\"");
  const std::string prefix = text.substr(0, tail);
  text = prefix + ",\n  \"sha256\": \"" + sha256_hex(prefix) + "\"\n}\n";
  EXPECT_EQ(CodeOf([&] { model_from_json(text); }), ErrorCode::VersionMismatch);
}

}  // namespace
}  // namespace ctquant
