// SPDX-License-Identifier: Apache-2.0
//
// Synthetic chest scenes with analytically known biomarkers: ellipsoidal
// heart with a fat shell and chamber core, a tube aorta, box calcium
// inserts and ellipsoidal lungs with a declared attenuation mix.
// A voxel belongs to a shape when its centre does.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ctquant/biomarkers.hpp"
#include "ctquant/volume.hpp"

namespace ctquant {

using Vec3 = std::array<double, 3>;

struct HeartSpec {
  Vec3 center{};
  Vec3 semi_axes{};          // outer (pericardium) ellipsoid
  Vec3 chamber_semi_axes{};  // concentric chamber core
  double fat_thickness_mm = 0.0;  // shell between outer and outer minus this on every axis
  int fat_hu = -100;
  int myocardium_hu = 40;
  int blood_hu = 40;
};

struct AortaSpec {
  std::vector<Vec3> path;  // polyline; the tube ends are cut flat
  double radius_mm = 0.0;
  int wall_hu = 40;
};

struct CalciumInsert {
  std::uint8_t label = labels::kCoronary;
  Vec3 min_mm{}, max_mm{};  // inclusive box
  int hu = 0;
};

struct LungSpec {
  std::uint8_t label = labels::kLeftLung;
  Vec3 center{};
  Vec3 semi_axes{};
  int base_hu = -850;
  double high_fraction = 0.0;
  double low_fraction = 0.0;
  int high_hu = -100;
  int low_hu = -980;
};

struct PhantomSpec {
  std::string name = "phantom";
  GridGeometry grid;
  int background_hu = -1000;
  double noise_sd = 0.0;  // Gaussian noise on background voxels only
  std::uint64_t seed = 0;
  bool require_all_bands = false;  // inserts must cover Agatston weights 1..4
  std::optional<HeartSpec> heart;
  std::optional<AortaSpec> aorta;
  std::vector<LungSpec> lungs;
  std::vector<CalciumInsert> calcium;
};

/// Accepts "path" or an "arc" shorthand for the aorta (see README).
/// Errors: MalformedHeader.
PhantomSpec phantom_spec_from_json(const std::string& text);
PhantomSpec load_phantom_spec(const std::filesystem::path& path);

/// Expected value and acceptance band for one biomarker. A measurement
/// passes when its status matches and |x - value| <= max(abs_tol, rel_tol*|value|).
struct TruthEntry {
  FieldStatus status = FieldStatus::Failed;
  double value = 0.0;
  double abs_tol = 0.0;
  double rel_tol = 0.0;

  bool accepts(const Measurement& m) const;
};

struct GroundTruth {
  std::array<TruthEntry, kBiomarkerCount> fields{};
  TruthEntry& operator[](Biomarker b) { return fields[static_cast<std::size_t>(b)]; }
  const TruthEntry& operator[](Biomarker b) const { return fields[static_cast<std::size_t>(b)]; }
};

struct Phantom {
  CtVolume volume;
  MaskSet masks;  // all four present
  GroundTruth truth;
};

/// Errors: OutOfBounds (a shape leaves the grid), InvalidArgument
/// (inconsistent sizes, shapes that collide, missing weight bands).
Phantom generate(const PhantomSpec& spec);

/// Agatston totals (coronary, aortic) by exhaustive enumeration of slabs,
/// pixels and flood-filled lesions. Shares no code with calcium_scores.
std::pair<double, double> brute_force_agatston(const CtVolume& v, const LabelMask& calcium);

struct TruthMismatch {
  std::string biomarker;
  std::string detail;
};
std::vector<TruthMismatch> compare_to_truth(const BiomarkerVector& measured, const GroundTruth& truth);
std::string truth_to_json(const GroundTruth& truth);

}  // namespace ctquant
