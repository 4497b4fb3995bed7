// SPDX-License-Identifier: Apache-2.0
#include "ctquant/biomarkers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/geometry.hpp"
#include "ctquant/log.hpp"

namespace ctquant {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

constexpr int kFatLow = -190;
constexpr int kFatHigh = -30;
constexpr int kCalciumThreshold = 130;
constexpr double kAgatstonSlabMm = 3.0;
constexpr double kMinLesionAreaMm2 = 1.0;
constexpr int kHighAttenuation = -200;
constexpr int kLowAttenuation = -950;

struct Moments {
  double mean = 0.0;
  double std = 0.0;
};

// Two-pass population mean and standard deviation.
Moments moments(const std::vector<double>& xs) {
  Moments m;
  if (xs.empty()) return m;
  double sum = 0.0;
  for (double x : xs) sum += x;
  m.mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return m;
}

// Agatston score of one label's refined voxels, on 3 mm slabs.
double agatston(const CtVolume& v, const LabelMask& m, std::uint8_t label) {
  const auto& g = v.geometry;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const double pixel_area = g.spacing[0] * g.spacing[1];
  const auto plane = static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny);

  // slab footprint: per-pixel peak HU, 0 where no calcium
  std::map<int, std::vector<int>> slabs;
  for (int z = 0; z < nz; ++z) {
    const int slab = static_cast<int>(std::floor((z + 0.5) * g.spacing[2] / kAgatstonSlabMm));
    std::vector<int>* peak = nullptr;
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        const std::size_t i = g.index(x, y, z);
        if (m.labels[i] != label || v.hu[i] < kCalciumThreshold) continue;
        if (peak == nullptr) {
          auto& s = slabs[slab];
          if (s.empty()) s.assign(plane, 0);
          peak = &s;
        }
        auto& p = (*peak)[static_cast<std::size_t>(y) * nx + x];
        p = std::max<int>(p, v.hu[i]);
      }
    }
  }

  // weighted pixel count, scaled by the pixel area once at the end
  std::uint64_t weighted_pixels = 0;
  std::vector<int> stack;
  for (auto& [slab, peak] : slabs) {
    std::vector<std::uint8_t> seen(plane, 0);
    for (std::size_t start = 0; start < plane; ++start) {
      if (peak[start] == 0 || seen[start]) continue;
      std::size_t area_px = 0;
      int lesion_peak = 0;
      stack.assign(1, static_cast<int>(start));
      seen[start] = 1;
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        ++area_px;
        lesion_peak = std::max(lesion_peak, peak[cur]);
        const int cx = cur % nx, cy = cur / nx;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int qx = cx + dx, qy = cy + dy;
            if ((dx == 0 && dy == 0) || qx < 0 || qy < 0 || qx >= nx || qy >= ny) continue;
            const int q = qy * nx + qx;
            if (peak[q] == 0 || seen[q]) continue;
            seen[q] = 1;
            stack.push_back(q);
          }
        }
      }
      if (static_cast<double>(area_px) * pixel_area < kMinLesionAreaMm2) continue;
      weighted_pixels += area_px * static_cast<std::uint64_t>(agatston_weight(lesion_peak));
    }
  }
  return static_cast<double>(weighted_pixels) * pixel_area;
}

// Axial slice with the most voxels in `selected`; -1 when none.
int max_area_slice(const LabelMask& m, std::span<const std::uint8_t> selected) {
  const auto& g = m.geometry;
  std::array<bool, 256> pick{};
  for (auto l : selected) pick[l] = true;
  int best = -1;
  std::size_t best_count = 0;
  const std::size_t plane = static_cast<std::size_t>(g.dims[0]) * g.dims[1];
  for (int z = 0; z < g.dims[2]; ++z) {
    std::size_t count = 0;
    const std::size_t base = plane * z;
    for (std::size_t i = 0; i < plane; ++i) count += pick[m.labels[base + i]] ? 1 : 0;
    if (count > best_count) {
      best_count = count;
      best = z;
    }
  }
  return best;
}

constexpr std::array<std::uint8_t, 2> kWholeHeart = {labels::kPericardium, labels::kChambers};
constexpr std::array<std::uint8_t, 1> kChamberOnly = {labels::kChambers};
constexpr std::array<std::uint8_t, 2> kBothLungs = {labels::kLeftLung, labels::kRightLung};

template <typename F>
void guarded(std::string_view group, F&& f, std::initializer_list<Measurement*> outs) {
  try {
    f();
  } catch (const Error& e) {
    logger().warn("{}: {} ({})", group, e.what(), to_string(e.code()));
    for (auto* o : outs) *o = Measurement::failed();
  }
}

}  // namespace

std::string_view to_string(FieldStatus s) {
  switch (s) {
    case FieldStatus::Ok: return "ok";
    case FieldStatus::EmptyInput: return "empty-input";
    case FieldStatus::Failed: return "failed";
  }
  return "failed";
}

FieldStatus field_status_from_string(std::string_view s) {
  if (s == "ok") return FieldStatus::Ok;
  if (s == "empty-input") return FieldStatus::EmptyInput;
  if (s == "failed") return FieldStatus::Failed;
  throw Error(ErrorCode::MalformedHeader, "unknown biomarker status '" + std::string(s) + "'");
}

Measurement Measurement::empty() { return {kNaN, FieldStatus::EmptyInput}; }
Measurement Measurement::failed() { return {kNaN, FieldStatus::Failed}; }

std::vector<std::string> BiomarkerVector::invariant_violations() const {
  std::vector<std::string> bad;
  auto check = [&](Biomarker b, bool good) {
    if ((*this)[b].is_ok() && !good) bad.emplace_back(kBiomarkerNames[static_cast<std::size_t>(b)]);
  };
  for (Biomarker b : {Biomarker::PFATV, Biomarker::CACS, Biomarker::CACV, Biomarker::ACS, Biomarker::ACV,
                      Biomarker::PFATSTD, Biomarker::AMD, Biomarker::AMDSTD, Biomarker::CLD, Biomarker::CSD}) {
    check(b, (*this)[b].value >= 0.0);
  }
  for (Biomarker b : {Biomarker::CHR, Biomarker::CTR, Biomarker::LLR, Biomarker::RLR, Biomarker::LHR, Biomarker::RHR}) {
    const double x = (*this)[b].value;
    check(b, x >= 0.0 && x <= 1.0);
  }
  check(Biomarker::ATI, (*this)[Biomarker::ATI].value >= 1.0 - 1e-9);
  if ((*this)[Biomarker::CLD].is_ok() && (*this)[Biomarker::CSD].is_ok()) {
    check(Biomarker::CLD, (*this)[Biomarker::CLD].value >= (*this)[Biomarker::CSD].value);
  }
  return bad;
}

PericardialFat pericardial_fat(const CtVolume& v, const LabelMask& pericardium) {
  require_schema(pericardium, MaskSchema::Pericardium);
  require_aligned(v, pericardium);
  std::vector<double> fat;
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    if (pericardium.labels[i] != labels::kPericardium) continue;
    const int hu = v.hu[i];
    if (hu >= kFatLow && hu <= kFatHigh) fat.push_back(hu);
  }
  PericardialFat out;
  out.volume_mm3 = Measurement::ok(static_cast<double>(fat.size()) * v.geometry.voxel_volume_mm3());
  if (fat.empty()) {
    out.mean_hu = Measurement::empty();
    out.std_hu = Measurement::empty();
    return out;
  }
  const Moments mo = moments(fat);
  out.mean_hu = Measurement::ok(mo.mean);
  out.std_hu = Measurement::ok(mo.std);
  return out;
}

int agatston_weight(int peak_hu) {
  if (peak_hu < 130) return 0;
  if (peak_hu < 200) return 1;
  if (peak_hu < 300) return 2;
  if (peak_hu < 400) return 3;
  return 4;
}

CalciumScores calcium_scores(const CtVolume& v, const LabelMask& calcium) {
  require_schema(calcium, MaskSchema::Calcium);
  require_aligned(v, calcium);
  std::size_t coronary = 0, aortic = 0;
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    if (v.hu[i] < kCalciumThreshold) continue;
    if (calcium.labels[i] == labels::kCoronary) ++coronary;
    if (calcium.labels[i] == labels::kAorticCalc) ++aortic;
  }
  const double vox = v.geometry.voxel_volume_mm3();
  CalciumScores out;
  out.cacv = Measurement::ok(static_cast<double>(coronary) * vox);
  out.acv = Measurement::ok(static_cast<double>(aortic) * vox);
  out.cacs = Measurement::ok(coronary > 0 ? agatston(v, calcium, labels::kCoronary) : 0.0);
  out.acs = Measurement::ok(aortic > 0 ? agatston(v, calcium, labels::kAorticCalc) : 0.0);
  return out;
}

AortaMorphology aorta_morphology(const LabelMask& aorta) {
  require_schema(aorta, MaskSchema::Aorta);
  constexpr std::array<std::uint8_t, 1> sel = {labels::kAorta};
  const BinaryGrid grid = BinaryGrid::from_mask(aorta, sel);
  const Centerline cl = extract_centerline(grid);
  const double chord = cl.chord_mm();
  if (!(chord > 0.0)) throw Error(ErrorCode::DegenerateShape, "centerline endpoints coincide");

  std::vector<double> diameters;
  for (const auto& cs : cross_sections(grid, cl, 1.0)) {
    if (cs.max_diameter_mm > 0.0) diameters.push_back(cs.max_diameter_mm);
  }
  if (diameters.empty()) throw Error(ErrorCode::DegenerateShape, "no cross-section intersects the aorta");
  const Moments mo = moments(diameters);
  AortaMorphology out;
  out.ati = Measurement::ok(std::max(1.0, cl.arc_length_mm / chord));
  out.amd = Measurement::ok(*std::max_element(diameters.begin(), diameters.end()));
  out.amdstd = Measurement::ok(mo.std);
  return out;
}

double chamber_ratio(const LabelMask& heart) {
  require_schema(heart, MaskSchema::Pericardium);
  std::size_t chambers = 0, peri = 0;
  for (auto l : heart.labels) {
    chambers += l == labels::kChambers ? 1 : 0;
    peri += l == labels::kPericardium ? 1 : 0;
  }
  if (chambers == 0) throw Error(ErrorCode::EmptyMask, "no chamber voxels");
  return static_cast<double>(chambers) / static_cast<double>(chambers + peri);
}

std::pair<double, double> chamber_diameters(const LabelMask& heart) {
  require_schema(heart, MaskSchema::Pericardium);
  const int z = max_area_slice(heart, kChamberOnly);
  if (z < 0) throw Error(ErrorCode::EmptyMask, "no chamber voxels");
  const auto& g = heart.geometry;
  auto inside = [&](int x, int y) {
    return x >= 0 && y >= 0 && x < g.dims[0] && y < g.dims[1] && heart.labels[g.index(x, y, z)] == labels::kChambers;
  };
  // midpoints of pixel edges between chamber and non-chamber
  std::vector<Point2> edge;
  const double hx = 0.5 * g.spacing[0], hy = 0.5 * g.spacing[1];
  for (int y = 0; y < g.dims[1]; ++y) {
    for (int x = 0; x < g.dims[0]; ++x) {
      if (!inside(x, y)) continue;
      const auto p = g.position(x, y, z);
      if (!inside(x - 1, y)) edge.push_back({p[0] - hx, p[1]});
      if (!inside(x + 1, y)) edge.push_back({p[0] + hx, p[1]});
      if (!inside(x, y - 1)) edge.push_back({p[0], p[1] - hy});
      if (!inside(x, y + 1)) edge.push_back({p[0], p[1] + hy});
    }
  }
  const EllipseFit fit = fit_ellipse(edge);
  return {fit.semi_major_mm, fit.semi_minor_mm};
}

double cardiothoracic_ratio(const LabelMask& heart, const LabelMask& lungs) {
  require_schema(heart, MaskSchema::Pericardium);
  require_schema(lungs, MaskSchema::Lungs);
  if (!(heart.geometry == lungs.geometry)) throw Error(ErrorCode::DimsMismatch, "heart and lung masks differ in geometry");
  const int z = max_area_slice(heart, kWholeHeart);
  if (z < 0) throw Error(ErrorCode::EmptyMask, "no heart voxels");
  const double heart_width = axial_extent_mm(heart, kWholeHeart, Axis::X, z);
  const double lung_width = axial_extent_mm(lungs, kBothLungs, Axis::X, z);
  if (!(lung_width > 0.0)) throw Error(ErrorCode::EmptyMask, "no lung voxels on the maximal heart slice");
  return heart_width / lung_width;
}

HeartMorphology heart_morphology(const CtVolume& v, const LabelMask& heart, const LabelMask& lungs) {
  require_aligned(v, heart);
  require_aligned(v, lungs);
  HeartMorphology out;
  out.chr = Measurement::ok(chamber_ratio(heart));
  const auto [major, minor] = chamber_diameters(heart);
  out.cld = Measurement::ok(major);
  out.csd = Measurement::ok(minor);
  out.ctr = Measurement::ok(cardiothoracic_ratio(heart, lungs));
  return out;
}

LungTexture lung_texture(const CtVolume& v, const LabelMask& lungs) {
  require_schema(lungs, MaskSchema::Lungs);
  require_aligned(v, lungs);
  std::array<std::size_t, 3> total{}, high{}, low{};
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    const auto l = lungs.labels[i];
    if (l == 0) continue;
    ++total[l];
    high[l] += v.hu[i] > kHighAttenuation ? 1 : 0;
    low[l] += v.hu[i] < kLowAttenuation ? 1 : 0;
  }
  auto ratio = [&](const std::array<std::size_t, 3>& hits, std::uint8_t l) {
    if (total[l] == 0) return Measurement::empty();
    return Measurement::ok(static_cast<double>(hits[l]) / static_cast<double>(total[l]));
  };
  LungTexture out;
  out.llr = ratio(low, labels::kLeftLung);
  out.rlr = ratio(low, labels::kRightLung);
  out.lhr = ratio(high, labels::kLeftLung);
  out.rhr = ratio(high, labels::kRightLung);
  return out;
}

BiomarkerVector extract_all(const CtVolume& v, const MaskSet& masks) {
  const std::pair<const std::optional<LabelMask>*, MaskSchema> expected[] = {
      {&masks.pericardium, MaskSchema::Pericardium},
      {&masks.calcium, MaskSchema::Calcium},
      {&masks.aorta, MaskSchema::Aorta},
      {&masks.lungs, MaskSchema::Lungs},
  };
  for (const auto& [mask, schema] : expected) {
    if (!mask->has_value()) continue;
    require_schema(**mask, schema);
    require_aligned(v, **mask);
  }

  BiomarkerVector b;
  for (auto& f : b.fields) f = Measurement::failed();
  using B = Biomarker;

  if (masks.pericardium) {
    guarded("pericardial fat", [&] {
      const auto r = pericardial_fat(v, *masks.pericardium);
      b[B::PFATV] = r.volume_mm3;
      b[B::PFATM] = r.mean_hu;
      b[B::PFATSTD] = r.std_hu;
    }, {&b[B::PFATV], &b[B::PFATM], &b[B::PFATSTD]});
    guarded("chamber ratio", [&] { b[B::CHR] = Measurement::ok(chamber_ratio(*masks.pericardium)); }, {&b[B::CHR]});
    guarded("chamber diameters", [&] {
      const auto [major, minor] = chamber_diameters(*masks.pericardium);
      b[B::CLD] = Measurement::ok(major);
      b[B::CSD] = Measurement::ok(minor);
    }, {&b[B::CLD], &b[B::CSD]});
    if (masks.lungs) {
      guarded("cardiothoracic ratio", [&] {
        b[B::CTR] = Measurement::ok(cardiothoracic_ratio(*masks.pericardium, *masks.lungs));
      }, {&b[B::CTR]});
    }
  }
  if (masks.calcium) {
    guarded("calcium", [&] {
      const auto r = calcium_scores(v, *masks.calcium);
      b[B::CACS] = r.cacs;
      b[B::CACV] = r.cacv;
      b[B::ACS] = r.acs;
      b[B::ACV] = r.acv;
    }, {&b[B::CACS], &b[B::CACV], &b[B::ACS], &b[B::ACV]});
  }
  if (masks.aorta) {
    guarded("aorta", [&] {
      const auto r = aorta_morphology(*masks.aorta);
      b[B::ATI] = r.ati;
      b[B::AMD] = r.amd;
      b[B::AMDSTD] = r.amdstd;
    }, {&b[B::ATI], &b[B::AMD], &b[B::AMDSTD]});
  }
  if (masks.lungs) {
    guarded("lung texture", [&] {
      const auto r = lung_texture(v, *masks.lungs);
      b[B::LLR] = r.llr;
      b[B::RLR] = r.rlr;
      b[B::LHR] = r.lhr;
      b[B::RHR] = r.rhr;
    }, {&b[B::LLR], &b[B::RLR], &b[B::LHR], &b[B::RHR]});
  }

  for (const auto& name : b.invariant_violations()) {
    logger().error("biomarker {} violates its range invariant; marking failed", name);
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      if (kBiomarkerNames[i] == name) b.fields[i] = Measurement::failed();
    }
  }
  return b;
}

std::string biomarkers_to_csv(const std::vector<ScanBiomarkers>& rows) {
  std::ostringstream os;
  os << "scan_id";
  for (auto n : kBiomarkerNames) os << ',' << n;
  for (auto n : kBiomarkerNames) os << ',' << n << "_status";
  os << '\n';
  for (const auto& r : rows) {
    os << r.scan_id;
    for (const auto& f : r.biomarkers.fields) os << ',' << (f.is_ok() ? format_double(f.value) : "nan");
    for (const auto& f : r.biomarkers.fields) os << ',' << to_string(f.status);
    os << '\n';
  }
  return os.str();
}

std::vector<ScanBiomarkers> biomarkers_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::MalformedHeader, "empty biomarker table");
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(s);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  constexpr std::size_t kColumns = 1 + 2 * kBiomarkerCount;
  if (split(line).size() != kColumns) throw Error(ErrorCode::ArityMismatch, "biomarker header has wrong column count");
  std::vector<ScanBiomarkers> out;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != kColumns) throw Error(ErrorCode::ArityMismatch, "biomarker row has wrong column count");
    ScanBiomarkers row;
    row.scan_id = cells[0];
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      auto& f = row.biomarkers.fields[i];
      f.status = field_status_from_string(cells[1 + kBiomarkerCount + i]);
      if (!f.is_ok()) {
        f.value = kNaN;
      } else if (!parse_double(cells[1 + i], f.value) || !std::isfinite(f.value)) {
        throw Error(ErrorCode::NonFiniteValue, "bad value for " + std::string(kBiomarkerNames[i]));
      }
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::string biomarkers_to_json(const std::vector<ScanBiomarkers>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json obj;
    obj["scan_id"] = r.scan_id;
    nlohmann::ordered_json values, status;
    for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
      const auto& f = r.biomarkers.fields[i];
      const std::string name(kBiomarkerNames[i]);
      if (f.is_ok()) {
        values[name] = f.value;
      } else {
        values[name] = nullptr;
      }
      status[name] = std::string(to_string(f.status));
    }
    obj["biomarkers"] = std::move(values);
    obj["status"] = std::move(status);
    arr.push_back(std::move(obj));
  }
  return arr.dump(2) + "\n";
}

}  // namespace ctquant
