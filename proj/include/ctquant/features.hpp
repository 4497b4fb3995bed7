// SPDX-License-Identifier: Apache-2.0
//
// Fusion input records: the deep feature vector x1 plus the 18 biomarkers,
// a deterministic stand-in featurizer, feature tables and z-score scaling.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ctquant/biomarkers.hpp"
#include "ctquant/volume.hpp"

namespace ctquant {

inline constexpr std::size_t kDeepFeatureDim = 512;

struct FeatureRecord {
  std::string scan_id;
  std::vector<double> x1;
  BiomarkerVector biomarkers;
  std::optional<int> label;  // 1 = CVD-positive, 0 = CVD-negative
};

/// 256 raw HU-histogram counts (20 HU bins from -1024) then 8x8x4 mean
/// pooling of the heart bounding-box crop, x fastest. Errors: EmptyMask.
std::vector<double> stub_featurize(const CtVolume& v, const LabelMask& heart);

/// Throws ArityMismatch, NonFiniteValue or DuplicateScanId.
void validate_records(const std::vector<FeatureRecord>& records, std::size_t dim = kDeepFeatureDim);

std::string features_to_csv(const std::vector<FeatureRecord>& records);
std::vector<FeatureRecord> features_from_csv(const std::string& text, std::size_t dim = kDeepFeatureDim);
std::string features_to_json(const std::vector<FeatureRecord>& records);
std::vector<FeatureRecord> features_from_json(const std::string& text, std::size_t dim = kDeepFeatureDim);

/// Reads `.json` as JSON and anything else as CSV, then validates.
std::vector<FeatureRecord> import_features(const std::filesystem::path& path, std::size_t dim = kDeepFeatureDim);
void export_features(const std::vector<FeatureRecord>& records, const std::filesystem::path& path);

struct NormalizationStats {
  std::vector<double> x1_mean, x1_std;
  std::array<double, kBiomarkerCount> bio_mean{}, bio_std{};
};

inline constexpr double kStdFloor = 1e-8;

/// Population mean/std per column over ok values; std floored at 1e-8.
/// Errors: TooFewRecords (< 2).
NormalizationStats fit_normalizer(const std::vector<FeatureRecord>& records);
/// z-scores every column; non-ok biomarkers become 0 and keep their status.
FeatureRecord apply_normalizer(const NormalizationStats& stats, const FeatureRecord& record);
/// Inverse of apply_normalizer for ok fields.
FeatureRecord invert_normalizer(const NormalizationStats& stats, const FeatureRecord& record);

/// Synthetic labelled cohort: balanced labels, biomarker `informative`
/// shifted by `effect` standard units between classes, everything else
/// standard-normal noise.
std::vector<FeatureRecord> synthetic_cohort(std::size_t n, std::size_t dim, std::size_t informative, double effect,
                                            std::uint64_t seed);

}  // namespace ctquant
