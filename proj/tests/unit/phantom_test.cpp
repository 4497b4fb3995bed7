// SPDX-License-Identifier: Apache-2.0
#include "ctquant/phantom.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ctquant/error.hpp"

namespace ctquant {
namespace {

namespace fs = std::filesystem;

const fs::path kDataDir{CTQUANT_DATA_DIR};

std::vector<fs::path> BundledSpecs() {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(kDataDir / "phantoms"))
    if (e.path().extension() == ".json") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

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

PhantomSpec Blank(std::array<int, 3> dims, Vec3 spacing = {1.0, 1.0, 1.0}) {
  PhantomSpec s;
  s.grid.dims = dims;
  s.grid.spacing = spacing;
  return s;
}

CalciumInsert Insert(Vec3 lo, Vec3 hi, int hu, std::uint8_t label = labels::kCoronary) {
  CalciumInsert c;
  c.label = label;
  c.min_mm = lo;
  c.max_mm = hi;
  c.hu = hu;
  return c;
}

std::string Describe(const std::vector<TruthMismatch>& bad) {
  std::ostringstream os;
  for (const auto& m : bad) os << m.biomarker << ": " << m.detail << "\n";
  return os.str();
}

TEST(Phantom, AtLeastFiveSpecsAreBundled) { EXPECT_GE(BundledSpecs().size(), 5u); }

TEST(Phantom, BundledSpecsMeetTheirGroundTruth) {
  for (const auto& p : BundledSpecs()) {
    SCOPED_TRACE(p.filename().string());
    const auto ph = generate(load_phantom_spec(p));
    const auto measured = extract_all(ph.volume, ph.masks);
    const auto bad = compare_to_truth(measured, ph.truth);
    EXPECT_TRUE(bad.empty()) << Describe(bad);
  }
}

TEST(Phantom, BruteForceAgreesWithCalciumScores) {
  for (const auto& p : BundledSpecs()) {
    SCOPED_TRACE(p.filename().string());
    const auto ph = generate(load_phantom_spec(p));
    const auto [coronary, aortic] = brute_force_agatston(ph.volume, *ph.masks.calcium);
    const auto cs = calcium_scores(ph.volume, *ph.masks.calcium);
    EXPECT_EQ(cs.cacs.value, coronary);
    EXPECT_EQ(cs.acs.value, aortic);
  }
}

TEST(Phantom, MatchesGoldenBiomarkers) {
  std::ifstream in(kDataDir / "golden" / "phantom_biomarkers.csv");
  ASSERT_TRUE(in) << "golden file missing";
  std::stringstream ss;
  ss << in.rdbuf();
  const auto golden = biomarkers_from_csv(ss.str());
  ASSERT_EQ(golden.size(), BundledSpecs().size());
  for (const auto& row : golden) {
    SCOPED_TRACE(row.scan_id);
    const auto ph = generate(load_phantom_spec(kDataDir / "phantoms" / (row.scan_id + ".json")));
    const auto now = extract_all(ph.volume, ph.masks);
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      const auto& a = now.fields[i];
      const auto& b = row.biomarkers.fields[i];
      EXPECT_EQ(a.status, b.status) << kBiomarkerNames[i];
      EXPECT_NEAR(a.value, b.value, 1e-9 * std::max(1.0, std::abs(b.value))) << kBiomarkerNames[i];
    }
  }
}

TEST(Phantom, EmptyGridTruthMatchesExtraction) {
  const auto ph = generate(Blank({16, 16, 8}));
  const auto measured = extract_all(ph.volume, ph.masks);
  EXPECT_TRUE(compare_to_truth(measured, ph.truth).empty());
  EXPECT_EQ(ph.truth[Biomarker::PFATV].status, FieldStatus::Ok);
  EXPECT_EQ(ph.truth[Biomarker::PFATV].value, 0.0);
  EXPECT_EQ(ph.truth[Biomarker::PFATM].status, FieldStatus::EmptyInput);
  EXPECT_EQ(ph.truth[Biomarker::ATI].status, FieldStatus::Failed);
  EXPECT_EQ(ph.truth[Biomarker::LLR].status, FieldStatus::EmptyInput);
}

TEST(Phantom, SingleSlice400HuInsertScoresByHand) {
  auto s = Blank({20, 20, 4});
  s.calcium.push_back(Insert({5, 5, 1}, {7, 7, 1}, 400));
  const auto ph = generate(s);
  // 3x3 pixels of 1 mm^2 with weight 4.
  EXPECT_EQ(ph.truth[Biomarker::CACS].value, 36.0);
  EXPECT_DOUBLE_EQ(ph.truth[Biomarker::CACV].value, 9.0);
  const auto cs = calcium_scores(ph.volume, *ph.masks.calcium);
  EXPECT_EQ(cs.cacs.value, 36.0);
  EXPECT_EQ(cs.acs.value, 0.0);
}

TEST(Phantom, PixelBelowOneSquareMillimetreScoresZero) {
  auto s = Blank({12, 12, 3}, {0.9, 0.9, 3.0});
  s.calcium.push_back(Insert({4.5, 4.5, 3.0}, {4.5, 4.5, 3.0}, 450));
  const auto ph = generate(s);
  EXPECT_EQ(ph.truth[Biomarker::CACS].value, 0.0);
  EXPECT_EQ(calcium_scores(ph.volume, *ph.masks.calcium).cacs.value, 0.0);
  EXPECT_NEAR(ph.truth[Biomarker::CACV].value, 0.9 * 0.9 * 3.0, 1e-12);
}

TEST(Phantom, InsertBelowThresholdIsInvisible) {
  auto s = Blank({20, 20, 4});
  s.calcium.push_back(Insert({5, 5, 1}, {7, 7, 1}, 129));
  const auto ph = generate(s);
  EXPECT_EQ(ph.truth[Biomarker::CACS].value, 0.0);
  EXPECT_EQ(ph.truth[Biomarker::CACV].value, 0.0);
  EXPECT_TRUE(compare_to_truth(extract_all(ph.volume, ph.masks), ph.truth).empty());
}

TEST(Phantom, StraightTubeHasUnitTortuosity) {
  auto s = Blank({60, 60, 90});
  AortaSpec a;
  a.radius_mm = 8.5;
  a.path = {{30, 30, 10}, {30, 30, 78}};
  s.aorta = a;
  const auto ph = generate(s);
  EXPECT_DOUBLE_EQ(ph.truth[Biomarker::ATI].value, 1.0);
  EXPECT_DOUBLE_EQ(ph.truth[Biomarker::AMD].value, 17.0);
  const auto m = aorta_morphology(*ph.masks.aorta);
  EXPECT_NEAR(m.ati.value, 1.0, 0.03);
  EXPECT_NEAR(m.amd.value, 17.0, 1.0);
}

TEST(Phantom, FatShellTruthIsEllipsoidDifference) {
  auto s = Blank({80, 70, 70});
  HeartSpec h;
  h.center = {40, 35, 35};
  h.semi_axes = {30, 25, 28};
  h.chamber_semi_axes = {18, 14, 16};
  h.fat_thickness_mm = 4.0;
  s.heart = h;
  const auto ph = generate(s);
  const double pi = std::acos(-1.0);
  const double expect = 4.0 / 3.0 * pi * (30.0 * 25 * 28 - 26.0 * 21 * 24);
  EXPECT_NEAR(ph.truth[Biomarker::PFATV].value, expect, 1e-6 * expect);
  const auto fat = pericardial_fat(ph.volume, *ph.masks.pericardium);
  EXPECT_NEAR(fat.volume_mm3.value, expect, 0.05 * expect);
  EXPECT_EQ(fat.mean_hu.value, h.fat_hu);
}

TEST(Phantom, GenerationIsDeterministic) {
  auto spec = load_phantom_spec(kDataDir / "phantoms" / "thick_slices.json");
  const auto a = generate(spec);
  const auto b = generate(spec);
  EXPECT_EQ(a.volume.hu, b.volume.hu);
  EXPECT_EQ(a.masks.lungs->labels, b.masks.lungs->labels);
  spec.seed += 1;
  const auto c = generate(spec);
  EXPECT_NE(a.volume.hu, c.volume.hu);
}

TEST(Phantom, NoiseTouchesOnlyBackground) {
  auto s = Blank({40, 40, 40});
  s.noise_sd = 30.0;
  s.seed = 3;
  HeartSpec h;
  h.center = {20, 20, 20};
  h.semi_axes = {15, 15, 15};
  h.chamber_semi_axes = {8, 8, 8};
  h.fat_thickness_mm = 3.0;
  s.heart = h;
  const auto ph = generate(s);
  const auto& peri = *ph.masks.pericardium;
  bool background_moved = false;
  for (std::size_t i = 0; i < ph.volume.hu.size(); ++i) {
    if (peri.labels[i] != labels::kBackground) {
      ASSERT_TRUE(ph.volume.hu[i] == h.fat_hu || ph.volume.hu[i] == h.myocardium_hu ||
                  ph.volume.hu[i] == h.blood_hu);
    } else if (ph.volume.hu[i] != s.background_hu) {
      background_moved = true;
    }
  }
  EXPECT_TRUE(background_moved);
}

TEST(Phantom, ShapeLeavingGridIsOutOfBounds) {
  auto s = Blank({30, 30, 30});
  AortaSpec a;
  a.radius_mm = 5.0;
  a.path = {{3, 15, 10}, {3, 15, 20}};
  s.aorta = a;
  EXPECT_EQ(CodeOf([&] { generate(s); }), ErrorCode::OutOfBounds);
  s.aorta.reset();
  s.calcium.push_back(Insert({25, 25, 25}, {31, 26, 26}, 300));
  EXPECT_EQ(CodeOf([&] { generate(s); }), ErrorCode::OutOfBounds);
}

TEST(Phantom, OverlapsAreRejected) {
  auto s = Blank({30, 30, 10});
  s.calcium.push_back(Insert({5, 5, 2}, {8, 8, 2}, 300));
  s.calcium.push_back(Insert({8, 8, 2}, {10, 10, 2}, 300));
  EXPECT_EQ(CodeOf([&] { generate(s); }), ErrorCode::InvalidArgument);

  auto t = Blank({60, 40, 40});
  HeartSpec h;
  h.center = {30, 20, 20};
  h.semi_axes = {15, 15, 15};
  h.chamber_semi_axes = {8, 8, 8};
  h.fat_thickness_mm = 3.0;
  t.heart = h;
  LungSpec l;
  l.center = {40, 20, 20};
  l.semi_axes = {10, 10, 10};
  t.lungs.push_back(l);
  EXPECT_EQ(CodeOf([&] { generate(t); }), ErrorCode::InvalidArgument);
}

TEST(Phantom, InconsistentHeartIsRejected) {
  auto s = Blank({60, 60, 60});
  HeartSpec h;
  h.center = {30, 30, 30};
  h.semi_axes = {15, 15, 15};
  h.chamber_semi_axes = {14, 8, 8};
  h.fat_thickness_mm = 3.0;
  s.heart = h;
  EXPECT_EQ(CodeOf([&] { generate(s); }), ErrorCode::InvalidArgument);
}

TEST(Phantom, AllBandsRequirement) {
  auto s = Blank({60, 20, 4});
  s.require_all_bands = true;
  const int hu[] = {150, 250, 350};
  for (int i = 0; i < 3; ++i)
    s.calcium.push_back(Insert({5.0 + 10 * i, 5, 1}, {7.0 + 10 * i, 7, 1}, hu[i]));
  EXPECT_EQ(CodeOf([&] { generate(s); }), ErrorCode::InvalidArgument);
  s.calcium.push_back(Insert({35, 5, 1}, {37, 7, 1}, 450));
  const auto ph = generate(s);
  EXPECT_EQ(ph.truth[Biomarker::CACS].value, 9.0 * (1 + 2 + 3 + 4));
}

TEST(PhantomJson, ArcShorthandBuildsPolyline) {
  const auto s = phantom_spec_from_json(R"({
    "grid": {"dims": [100, 100, 100], "spacing": [1, 1, 1]},
    "aorta": {"radius_mm": 5, "arc": {"center": [50, 50, 50], "radius": 20, "u": [1, 0, 0], "v": [0, 1, 0],
              "from_deg": 0, "to_deg": 180, "segments": 4, "lead_in_mm": 10}}
  })");
  ASSERT_TRUE(s.aorta.has_value());
  const auto& p = s.aorta->path;
  ASSERT_EQ(p.size(), 6u);
  EXPECT_NEAR(p[1][0], 70.0, 1e-12);
  EXPECT_NEAR(p[1][1], 50.0, 1e-12);
  EXPECT_NEAR(p.back()[0], 30.0, 1e-12);
  EXPECT_NEAR(std::hypot(p[0][0] - p[1][0], p[0][1] - p[1][1]), 10.0, 1e-12);
}

TEST(PhantomJson, MalformedInputs) {
  EXPECT_EQ(CodeOf([] { phantom_spec_from_json("{"); }), ErrorCode::MalformedHeader);
  EXPECT_EQ(CodeOf([] { phantom_spec_from_json(R"({"seed": 1})"); }), ErrorCode::MalformedHeader);
  EXPECT_EQ(CodeOf([] {
              phantom_spec_from_json(R"({"grid": {"dims": [4, 4, 4], "spacing": [1, 1, 1]},
                "lungs": [{"label": "middle", "center": [1, 1, 1], "semi_axes": [1, 1, 1]}]})");
            }),
            ErrorCode::MalformedHeader);
  EXPECT_EQ(CodeOf([] { load_phantom_spec(kDataDir / "phantoms" / "nope.json"); }), ErrorCode::MissingFile);
}

}  // namespace
}  // namespace ctquant
