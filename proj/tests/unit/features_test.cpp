// SPDX-License-Identifier: Apache-2.0
#include "ctquant/features.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"
#include "test_util.hpp"

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

GridGeometry Geometry(int nx, int ny, int nz) {
  GridGeometry g;
  g.dims = {nx, ny, nz};
  return g;
}

LabelMask HeartBox(const GridGeometry& g, std::array<int, 3> lo, std::array<int, 3> hi) {
  LabelMask m(g, MaskSchema::Pericardium);
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) m.at(x, y, z) = (x + y) % 2 ? labels::kChambers : labels::kPericardium;
  return m;
}

TEST(StubFeaturize, ConstantCropIsOneHotHistogram) {
  const auto g = Geometry(30, 30, 12);
  CtVolume v(g, 37);
  const auto m = HeartBox(g, {5, 5, 2}, {20, 20, 9});
  const auto f = stub_featurize(v, m);
  ASSERT_EQ(f.size(), kDeepFeatureDim);
  const int bin = (37 + 1024) / 20;
  for (int i = 0; i < 256; ++i) EXPECT_EQ(f[i], i == bin ? 16.0 * 16.0 * 8.0 : 0.0) << i;
  for (std::size_t i = 256; i < 512; ++i) EXPECT_EQ(f[i], 37.0);
}

TEST(StubFeaturize, PoolingIgnoresOrderWithinACell) {
  const auto g = Geometry(24, 24, 8);
  Rng rng(5);
  CtVolume v(g, 0);
  for (auto& h : v.hu) h = static_cast<std::int16_t>(-1000 + static_cast<int>(rng.below(2000)));
  const auto m = HeartBox(g, {0, 0, 0}, {15, 15, 7});
  // crop 16x16x8 -> cells of 2x2x2; swap two voxels inside cell (0,0,0)
  CtVolume w = v;
  std::swap(w.at(0, 0, 0), w.at(1, 1, 1));
  EXPECT_EQ(stub_featurize(v, m), stub_featurize(w, m));
  // a swap across cells changes the pooled part
  CtVolume u = v;
  std::swap(u.at(0, 0, 0), u.at(5, 5, 5));
  if (u.at(0, 0, 0) != v.at(0, 0, 0)) EXPECT_NE(stub_featurize(v, m), stub_featurize(u, m));
}

TEST(StubFeaturize, TinyCropStillFillsEveryCell) {
  const auto g = Geometry(10, 10, 10);
  CtVolume v(g, 100);
  v.at(3, 3, 3) = 200;
  const auto m = HeartBox(g, {3, 3, 3}, {4, 3, 3});
  const auto f = stub_featurize(v, m);
  for (std::size_t i = 256; i < 512; ++i) EXPECT_TRUE(f[i] == 100.0 || f[i] == 200.0);
}

TEST(StubFeaturize, DistinctScenesGiveDistinctVectors) {
  const auto g = Geometry(20, 20, 10);
  CtVolume a(g, 0), b(g, 0);
  b.at(10, 10, 5) = 400;
  const auto m = HeartBox(g, {2, 2, 2}, {17, 17, 7});
  EXPECT_NE(stub_featurize(a, m), stub_featurize(b, m));
  EXPECT_EQ(stub_featurize(a, m), stub_featurize(a, m));
}

TEST(StubFeaturize, EmptyHeartThrows) {
  const auto g = Geometry(4, 4, 4);
  EXPECT_EQ(CodeOf([&] { stub_featurize(CtVolume(g, 0), LabelMask(g, MaskSchema::Pericardium)); }),
            ErrorCode::EmptyMask);
}

std::vector<FeatureRecord> Cohort(std::size_t n, std::size_t dim, std::uint64_t seed) {
  auto recs = synthetic_cohort(n, dim, 3, 2.0, seed);
  Rng rng(seed);
  for (auto& r : recs) {
    for (auto& x : r.x1) x = x * 1e3 + 1.0 / 3.0;
    r.biomarkers[Biomarker::PFATV] = Measurement::ok(5000.0 + 1000.0 * rng.uniform());
    if (rng.uniform() < 0.2) r.biomarkers[Biomarker::ATI] = Measurement::failed();
    if (rng.uniform() < 0.2) r.biomarkers[Biomarker::RHR] = Measurement::empty();
  }
  recs[1].label.reset();
  return recs;
}

void ExpectSameRecords(const std::vector<FeatureRecord>& a, const std::vector<FeatureRecord>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].scan_id, b[r].scan_id);
    EXPECT_EQ(a[r].label, b[r].label);
    EXPECT_EQ(a[r].x1, b[r].x1);
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      EXPECT_EQ(a[r].biomarkers.fields[i].status, b[r].biomarkers.fields[i].status);
      if (a[r].biomarkers.fields[i].is_ok()) EXPECT_EQ(a[r].biomarkers.fields[i].value, b[r].biomarkers.fields[i].value);
    }
  }
}

TEST(FeatureTable, CsvAndJsonRoundTrip) {
  testing::TempDir dir;
  const auto recs = Cohort(40, kDeepFeatureDim, 11);
  export_features(recs, dir / "f.csv");
  export_features(recs, dir / "f.json");
  ExpectSameRecords(recs, import_features(dir / "f.csv"));
  ExpectSameRecords(recs, import_features(dir / "f.json"));
}

TEST(FeatureTable, WrongArityIsRejected) {
  auto recs = Cohort(3, 511, 2);
  const std::string csv = features_to_csv(recs);
  EXPECT_EQ(CodeOf([&] { features_from_csv(csv); }), ErrorCode::ArityMismatch);
  // a short row under a correct header
  auto good = features_to_csv(Cohort(2, kDeepFeatureDim, 2));
  const auto last_comma = good.rfind(',', good.size() - 2);
  good = good.substr(0, last_comma) + "\n";
  EXPECT_EQ(CodeOf([&] { features_from_csv(good); }), ErrorCode::ArityMismatch);
}

TEST(FeatureTable, DuplicateAndNonFiniteAreRejected) {
  auto recs = Cohort(3, 8, 2);
  recs[2].scan_id = recs[0].scan_id;
  EXPECT_EQ(CodeOf([&] { validate_records(recs, 8); }), ErrorCode::DuplicateScanId);
  EXPECT_EQ(CodeOf([&] { features_from_csv(features_to_csv(recs), 8); }), ErrorCode::DuplicateScanId);
  auto bad = Cohort(3, 8, 2);
  bad[1].x1[4] = std::nan("");
  EXPECT_EQ(CodeOf([&] { features_from_csv(features_to_csv(bad), 8); }), ErrorCode::NonFiniteValue);
}

TEST(Normalizer, ConstantColumnIsZero) {
  auto recs = Cohort(10, 4, 3);
  for (auto& r : recs) r.x1[2] = 7.5;
  const auto stats = fit_normalizer(recs);
  EXPECT_EQ(stats.x1_std[2], kStdFloor);
  for (const auto& r : recs) EXPECT_EQ(apply_normalizer(stats, r).x1[2], 0.0);
}

TEST(Normalizer, TrainingColumnsHaveZeroMean) {
  const auto recs = Cohort(200, 16, 4);
  const auto stats = fit_normalizer(recs);
  std::vector<double> x1(16, 0.0);
  std::array<double, kBiomarkerCount> bio{};
  for (const auto& r : recs) {
    const auto z = apply_normalizer(stats, r);
    for (std::size_t j = 0; j < 16; ++j) x1[j] += z.x1[j];
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) bio[i] += z.biomarkers.fields[i].value;
  }
  for (double s : x1) EXPECT_NEAR(s / 200.0, 0.0, 1e-9);
  for (double s : bio) EXPECT_NEAR(s / 200.0, 0.0, 1e-9);
}

TEST(Normalizer, HeldOutSplitMatchesIndependentZScores) {
  const auto a = Cohort(50, 6, 8);
  const auto b = Cohort(20, 6, 9);
  const auto stats = fit_normalizer(a);
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    // independent oracle over split A, ok values only, population std
    std::vector<double> vals;
    for (const auto& r : a)
      if (r.biomarkers.fields[i].is_ok()) vals.push_back(r.biomarkers.fields[i].value);
    long double mean = 0;
    for (double v : vals) mean += v;
    mean /= vals.size();
    long double var = 0;
    for (double v : vals) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(static_cast<double>(var / vals.size()));
    for (const auto& r : b) {
      const auto z = apply_normalizer(stats, r).biomarkers.fields[i];
      if (r.biomarkers.fields[i].is_ok()) {
        EXPECT_NEAR(z.value, (r.biomarkers.fields[i].value - static_cast<double>(mean)) / sd, 1e-9);
      } else {
        EXPECT_EQ(z.value, 0.0);
        EXPECT_EQ(z.status, r.biomarkers.fields[i].status);
      }
    }
  }
}

TEST(Normalizer, InvertsOnOkFields) {
  const auto recs = Cohort(30, 5, 12);
  const auto stats = fit_normalizer(recs);
  for (const auto& r : recs) {
    const auto back = invert_normalizer(stats, apply_normalizer(stats, r));
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(back.x1[j], r.x1[j], 1e-9 * std::max(1.0, std::abs(r.x1[j])));
    for (std::size_t i = 0; i < kBiomarkerCount; ++i)
      if (r.biomarkers.fields[i].is_ok())
        EXPECT_NEAR(back.biomarkers.fields[i].value, r.biomarkers.fields[i].value,
                    1e-9 * std::max(1.0, std::abs(r.biomarkers.fields[i].value)));
  }
}

TEST(Normalizer, NeedsTwoRecords) {
  EXPECT_EQ(CodeOf([&] { fit_normalizer(Cohort(1, 4, 1)); }), ErrorCode::TooFewRecords);
}

}  // namespace
}  // namespace ctquant
