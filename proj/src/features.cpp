// SPDX-License-Identifier: Apache-2.0
#include "ctquant/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

constexpr int kHistBins = 256;
constexpr int kHistWidthHu = 20;
constexpr std::array<int, 3> kPoolCells = {8, 8, 4};

// Cell c of n split over `len` samples: [lo, hi), never empty.
std::pair<int, int> cell_range(int c, int n, int len) {
  int lo = static_cast<int>(static_cast<long long>(c) * len / n);
  int hi = static_cast<int>(static_cast<long long>(c + 1) * len / n);
  lo = std::min(lo, len - 1);
  hi = std::max(hi, lo + 1);
  return {lo, hi};
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(',', start);
    cells.push_back(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cells;
}

double parse_cell(const std::string& cell, const std::string& what) {
  double v = 0.0;
  if (!parse_double(cell, v)) throw Error(ErrorCode::NonFiniteValue, "unparseable value for " + what + ": '" + cell + "'");
  return v;
}

}  // namespace

std::vector<double> stub_featurize(const CtVolume& v, const LabelMask& heart) {
  require_schema(heart, MaskSchema::Pericardium);
  require_aligned(v, heart);
  const auto& g = v.geometry;
  std::array<int, 3> lo = {g.dims[0], g.dims[1], g.dims[2]}, hi = {-1, -1, -1};
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        if (heart.at(x, y, z) == labels::kBackground) continue;
        const std::array<int, 3> p = {x, y, z};
        for (int k = 0; k < 3; ++k) {
          lo[k] = std::min(lo[k], p[k]);
          hi[k] = std::max(hi[k], p[k]);
        }
      }
  if (hi[0] < 0) throw Error(ErrorCode::EmptyMask, "no heart voxels to featurize");

  std::vector<double> out(kDeepFeatureDim, 0.0);
  for (int z = lo[2]; z <= hi[2]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const int bin = std::clamp((v.at(x, y, z) - kMinHu) / kHistWidthHu, 0, kHistBins - 1);
        out[static_cast<std::size_t>(bin)] += 1.0;
      }

  const std::array<int, 3> len = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};
  std::size_t slot = kHistBins;
  for (int cz = 0; cz < kPoolCells[2]; ++cz)
    for (int cy = 0; cy < kPoolCells[1]; ++cy)
      for (int cx = 0; cx < kPoolCells[0]; ++cx) {
        const auto [x0, x1] = cell_range(cx, kPoolCells[0], len[0]);
        const auto [y0, y1] = cell_range(cy, kPoolCells[1], len[1]);
        const auto [z0, z1] = cell_range(cz, kPoolCells[2], len[2]);
        double sum = 0.0;
        std::size_t n = 0;
        for (int z = z0; z < z1; ++z)
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
              sum += v.at(lo[0] + x, lo[1] + y, lo[2] + z);
              ++n;
            }
        out[slot++] = sum / static_cast<double>(n);
      }
  return out;
}

void validate_records(const std::vector<FeatureRecord>& records, std::size_t dim) {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.x1.size() != dim) {
      throw Error(ErrorCode::ArityMismatch, r.scan_id + ": x1 has " + std::to_string(r.x1.size()) + " values, expected " +
                                                std::to_string(dim));
    }
    for (double x : r.x1) {
      if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": non-finite deep feature");
    }
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      const auto& f = r.biomarkers.fields[i];
      if (f.is_ok() && !std::isfinite(f.value)) {
        throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": non-finite " + std::string(kBiomarkerNames[i]));
      }
    }
    if (r.label && *r.label != 0 && *r.label != 1) {
      throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": label must be 0 or 1");
    }
    if (!seen.insert(r.scan_id).second) throw Error(ErrorCode::DuplicateScanId, "duplicate scan_id " + r.scan_id);
  }
}

std::string features_to_csv(const std::vector<FeatureRecord>& records) {
  const std::size_t dim = records.empty() ? kDeepFeatureDim : records.front().x1.size();
  std::ostringstream os;
  os << "scan_id,label";
  for (std::size_t i = 0; i < dim; ++i) os << ",x1_" << i;
  for (auto n : kBiomarkerNames) os << ',' << n;
  for (auto n : kBiomarkerNames) os << ',' << n << "_status";
  os << '\n';
  for (const auto& r : records) {
    os << r.scan_id << ',';
    if (r.label) os << *r.label;
    for (double x : r.x1) os << ',' << format_double(x);
    for (const auto& f : r.biomarkers.fields) os << ',' << (f.is_ok() ? format_double(f.value) : "nan");
    for (const auto& f : r.biomarkers.fields) os << ',' << to_string(f.status);
    os << '\n';
  }
  return os.str();
}

std::vector<FeatureRecord> features_from_csv(const std::string& text, std::size_t dim) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::MalformedHeader, "empty feature table");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);

  // column layout from the header
  if (header.size() < 2 || header[0] != "scan_id") throw Error(ErrorCode::MalformedHeader, "first column must be scan_id");
  std::size_t col = 1;
  const bool has_label = header[1] == "label";
  if (has_label) ++col;
  const std::size_t x1_start = col;
  while (col < header.size() && header[col].rfind("x1_", 0) == 0) ++col;
  const std::size_t x1_count = col - x1_start;
  if (x1_count != dim) {
    throw Error(ErrorCode::ArityMismatch,
                "feature table has " + std::to_string(x1_count) + " x1 columns, expected " + std::to_string(dim));
  }
  const std::size_t bio_start = col;
  for (std::size_t i = 0; i < kBiomarkerCount; ++i, ++col) {
    if (col >= header.size() || header[col] != kBiomarkerNames[i]) {
      throw Error(ErrorCode::ArityMismatch, "expected biomarker column " + std::string(kBiomarkerNames[i]));
    }
  }
  const bool has_status = col < header.size();
  if (has_status) {
    for (std::size_t i = 0; i < kBiomarkerCount; ++i, ++col) {
      if (col >= header.size() || header[col] != std::string(kBiomarkerNames[i]) + "_status") {
        throw Error(ErrorCode::ArityMismatch, "expected status column for " + std::string(kBiomarkerNames[i]));
      }
    }
  }
  if (col != header.size()) throw Error(ErrorCode::ArityMismatch, "unexpected trailing columns");

  std::vector<FeatureRecord> out;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::ArityMismatch, "row has " + std::to_string(cells.size()) + " cells, header has " +
                                                std::to_string(header.size()));
    }
    FeatureRecord r;
    r.scan_id = cells[0];
    if (has_label && !cells[1].empty()) {
      const double l = parse_cell(cells[1], r.scan_id + " label");
      if (l != 0.0 && l != 1.0) throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": label must be 0 or 1");
      r.label = static_cast<int>(l);
    }
    r.x1.resize(dim);
    for (std::size_t i = 0; i < dim; ++i) r.x1[i] = parse_cell(cells[x1_start + i], r.scan_id + " x1");
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      auto& f = r.biomarkers.fields[i];
      f.status = has_status ? field_status_from_string(cells[bio_start + kBiomarkerCount + i]) : FieldStatus::Ok;
      f.value = f.is_ok() ? parse_cell(cells[bio_start + i], r.scan_id + " " + std::string(kBiomarkerNames[i]))
                          : std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(std::move(r));
  }
  validate_records(out, dim);
  return out;
}

std::string features_to_json(const std::vector<FeatureRecord>& records) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json obj;
    obj["scan_id"] = r.scan_id;
    obj["label"] = r.label ? nlohmann::ordered_json(*r.label) : nlohmann::ordered_json(nullptr);
    obj["x1"] = r.x1;
    nlohmann::ordered_json values, status;
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      const auto& f = r.biomarkers.fields[i];
      const std::string name(kBiomarkerNames[i]);
      values[name] = f.is_ok() ? nlohmann::ordered_json(f.value) : nlohmann::ordered_json(nullptr);
      status[name] = std::string(to_string(f.status));
    }
    obj["biomarkers"] = std::move(values);
    obj["status"] = std::move(status);
    arr.push_back(std::move(obj));
  }
  return arr.dump(2) + "\n";
}

std::vector<FeatureRecord> features_from_json(const std::string& text, std::size_t dim) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, std::string("feature JSON: ") + e.what());
  }
  if (!doc.is_array()) throw Error(ErrorCode::MalformedHeader, "feature JSON must be an array of records");
  std::vector<FeatureRecord> out;
  try {
    for (const auto& obj : doc) {
      FeatureRecord r;
      r.scan_id = obj.at("scan_id").get<std::string>();
      if (obj.contains("label") && !obj["label"].is_null()) r.label = obj["label"].get<int>();
      for (const auto& x : obj.at("x1")) {
        if (!x.is_number()) throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": non-numeric deep feature");
        r.x1.push_back(x.get<double>());
      }
      const auto& values = obj.at("biomarkers");
      if (values.size() != kBiomarkerCount) throw Error(ErrorCode::ArityMismatch, r.scan_id + ": expected 18 biomarkers");
      for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
        const std::string name(kBiomarkerNames[i]);
        auto& f = r.biomarkers.fields[i];
        f.status = obj.contains("status") ? field_status_from_string(obj["status"].at(name).get<std::string>())
                                          : FieldStatus::Ok;
        const auto& val = values.at(name);
        if (f.is_ok()) {
          if (!val.is_number()) throw Error(ErrorCode::NonFiniteValue, r.scan_id + ": " + name + " is not a number");
          f.value = val.get<double>();
        } else {
          f.value = std::numeric_limits<double>::quiet_NaN();
        }
      }
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, std::string("feature JSON: ") + e.what());
  }
  validate_records(out, dim);
  return out;
}

std::vector<FeatureRecord> import_features(const std::filesystem::path& path, std::size_t dim) {
  const std::string text = read_file(path);
  return path.extension() == ".json" ? features_from_json(text, dim) : features_from_csv(text, dim);
}

void export_features(const std::vector<FeatureRecord>& records, const std::filesystem::path& path) {
  write_file(path, path.extension() == ".json" ? features_to_json(records) : features_to_csv(records));
}

NormalizationStats fit_normalizer(const std::vector<FeatureRecord>& records) {
  if (records.size() < 2) throw Error(ErrorCode::TooFewRecords, "normalization needs at least 2 records");
  const std::size_t dim = records.front().x1.size();
  NormalizationStats s;
  s.x1_mean.assign(dim, 0.0);
  s.x1_std.assign(dim, 0.0);
  const double n = static_cast<double>(records.size());
  for (std::size_t j = 0; j < dim; ++j) {
    double sum = 0.0;
    for (const auto& r : records) sum += r.x1.at(j);
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& r : records) ss += (r.x1[j] - mean) * (r.x1[j] - mean);
    s.x1_mean[j] = mean;
    s.x1_std[j] = std::max(std::sqrt(ss / n), kStdFloor);
  }
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : records) {
      if (!r.biomarkers.fields[i].is_ok()) continue;
      sum += r.biomarkers.fields[i].value;
      ++count;
    }
    const double mean = count ? sum / static_cast<double>(count) : 0.0;
    double ss = 0.0;
    for (const auto& r : records) {
      if (r.biomarkers.fields[i].is_ok()) ss += (r.biomarkers.fields[i].value - mean) * (r.biomarkers.fields[i].value - mean);
    }
    s.bio_mean[i] = mean;
    s.bio_std[i] = std::max(count ? std::sqrt(ss / static_cast<double>(count)) : 0.0, kStdFloor);
  }
  return s;
}

FeatureRecord apply_normalizer(const NormalizationStats& stats, const FeatureRecord& record) {
  if (record.x1.size() != stats.x1_mean.size()) throw Error(ErrorCode::ArityMismatch, "x1 width differs from normalizer");
  FeatureRecord out = record;
  for (std::size_t j = 0; j < out.x1.size(); ++j) out.x1[j] = (record.x1[j] - stats.x1_mean[j]) / stats.x1_std[j];
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    auto& f = out.biomarkers.fields[i];
    f.value = f.is_ok() ? (f.value - stats.bio_mean[i]) / stats.bio_std[i] : 0.0;
  }
  return out;
}

FeatureRecord invert_normalizer(const NormalizationStats& stats, const FeatureRecord& record) {
  if (record.x1.size() != stats.x1_mean.size()) throw Error(ErrorCode::ArityMismatch, "x1 width differs from normalizer");
  FeatureRecord out = record;
  for (std::size_t j = 0; j < out.x1.size(); ++j) out.x1[j] = record.x1[j] * stats.x1_std[j] + stats.x1_mean[j];
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    auto& f = out.biomarkers.fields[i];
    f.value = f.is_ok() ? f.value * stats.bio_std[i] + stats.bio_mean[i] : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

std::vector<FeatureRecord> synthetic_cohort(std::size_t n, std::size_t dim, std::size_t informative, double effect,
                                            std::uint64_t seed) {
  if (informative >= kBiomarkerCount) throw Error(ErrorCode::InvalidArgument, "informative biomarker index out of range");
  Rng rng(mix_seed(seed, 0x5eed));
  std::vector<FeatureRecord> out;
  out.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    FeatureRecord rec;
    rec.scan_id = "syn-" + std::to_string(r);
    rec.label = static_cast<int>(r % 2);
    rec.x1.resize(dim);
    for (auto& x : rec.x1) x = rng.normal();
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      double v = rng.normal();
      if (i == informative) v += (*rec.label ? 0.5 : -0.5) * effect;
      rec.biomarkers.fields[i] = Measurement::ok(v);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace ctquant
