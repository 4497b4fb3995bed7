// SPDX-License-Identifier: Apache-2.0
//
// The 18 quantitative CT biomarkers: pericardial fat, calcium scores and
// volumes, aortic shape, heart morphology and lung texture.
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctquant/volume.hpp"

namespace ctquant {

enum class Biomarker : std::size_t {
  PFATV, PFATM, PFATSTD,
  CACS, CACV, ACS, ACV,
  ATI, AMD, AMDSTD,
  CHR, CLD, CSD, CTR,
  LLR, RLR, LHR, RHR,
};

inline constexpr std::size_t kBiomarkerCount = 18;

inline constexpr std::array<std::string_view, kBiomarkerCount> kBiomarkerNames = {
    "PFATV", "PFATM", "PFATSTD", "CACS", "CACV", "ACS", "ACV", "ATI", "AMD",
    "AMDSTD", "CHR", "CLD", "CSD", "CTR", "LLR", "RLR", "LHR", "RHR",
};

enum class FieldStatus { Ok, EmptyInput, Failed };

std::string_view to_string(FieldStatus s);
/// Throws MalformedHeader on unknown text.
FieldStatus field_status_from_string(std::string_view s);

/// A measured value with its status. Non-ok values hold NaN.
struct Measurement {
  double value = 0.0;
  FieldStatus status = FieldStatus::Ok;

  static Measurement ok(double v) { return {v, FieldStatus::Ok}; }
  static Measurement empty();
  static Measurement failed();
  bool is_ok() const { return status == FieldStatus::Ok; }
};

struct BiomarkerVector {
  std::array<Measurement, kBiomarkerCount> fields{};

  Measurement& operator[](Biomarker b) { return fields[static_cast<std::size_t>(b)]; }
  const Measurement& operator[](Biomarker b) const { return fields[static_cast<std::size_t>(b)]; }

  /// Names of ok fields that break a range invariant (ratios in [0,1],
  /// ATI >= 1, CLD >= CSD, volumes and scores >= 0).
  std::vector<std::string> invariant_violations() const;
};

struct PericardialFat {
  Measurement volume_mm3, mean_hu, std_hu;
};
/// Fat = pericardium-labelled voxels with HU in [-190, -30].
PericardialFat pericardial_fat(const CtVolume& v, const LabelMask& pericardium);

struct CalciumScores {
  Measurement cacs, cacv, acs, acv;
};
/// Agatston weight for a lesion peak HU: 0 below 130, then 1..4.
int agatston_weight(int peak_hu);
CalciumScores calcium_scores(const CtVolume& v, const LabelMask& calcium);

struct AortaMorphology {
  Measurement ati, amd, amdstd;
};
/// Errors (EmptyMask, MultipleComponents, DegenerateShape) propagate.
AortaMorphology aorta_morphology(const LabelMask& aorta);

struct HeartMorphology {
  Measurement chr, cld, csd, ctr;
};
double chamber_ratio(const LabelMask& heart);
/// (semi-major, semi-minor) of the ellipse fitted on the maximal chamber slice.
std::pair<double, double> chamber_diameters(const LabelMask& heart);
double cardiothoracic_ratio(const LabelMask& heart, const LabelMask& lungs);
HeartMorphology heart_morphology(const CtVolume& v, const LabelMask& heart, const LabelMask& lungs);

struct LungTexture {
  Measurement llr, rlr, lhr, rhr;
};
LungTexture lung_texture(const CtVolume& v, const LabelMask& lungs);

/// Masks for one scan; an absent mask fails the biomarkers that need it.
struct MaskSet {
  std::optional<LabelMask> pericardium;
  std::optional<LabelMask> calcium;
  std::optional<LabelMask> aorta;
  std::optional<LabelMask> lungs;
};

/// All 18 biomarkers. Only misaligned or wrong-schema masks throw; every
/// other failure is recorded in the field status.
BiomarkerVector extract_all(const CtVolume& v, const MaskSet& masks);

struct ScanBiomarkers {
  std::string scan_id;
  BiomarkerVector biomarkers;
};

std::string biomarkers_to_csv(const std::vector<ScanBiomarkers>& rows);
std::vector<ScanBiomarkers> biomarkers_from_csv(const std::string& text);
std::string biomarkers_to_json(const std::vector<ScanBiomarkers>& rows);

}  // namespace ctquant
