// SPDX-License-Identifier: Apache-2.0
#include "ctquant/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <nlohmann/json.hpp>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/rng.hpp"

namespace ctquant {
namespace {

using nlohmann::json;

enum Owner : std::uint8_t { kFree = 0, kHeart = 1, kAortaOwner = 2, kLung = 3 };

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add_scaled(const Vec3& a, const Vec3& d, double s) { return {a[0] + s * d[0], a[1] + s * d[1], a[2] + s * d[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorCode::MalformedHeader, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

// Index range of voxel centres inside [lo, hi] along one axis.
std::pair<int, int> index_range(const GridGeometry& g, int a, double lo, double hi) {
  const int i0 = std::max(0, static_cast<int>(std::ceil((lo - g.origin[a]) / g.spacing[a] - 1e-9)));
  const int i1 = std::min(g.dims[a] - 1, static_cast<int>(std::floor((hi - g.origin[a]) / g.spacing[a] + 1e-9)));
  return {i0, i1};
}

void require_inside(const GridGeometry& g, const Vec3& lo, const Vec3& hi, const std::string& what) {
  for (int a = 0; a < 3; ++a) {
    const double first = g.origin[a], last = g.origin[a] + (g.dims[a] - 1) * g.spacing[a];
    if (lo[a] < first - 1e-9 || hi[a] > last + 1e-9) {
      throw Error(ErrorCode::OutOfBounds, what + " leaves the grid");
    }
  }
}

// Visits every voxel whose centre lies in the box [lo, hi].
template <typename Fn>
void for_box(const GridGeometry& g, const Vec3& lo, const Vec3& hi, Fn&& fn) {
  const auto [x0, x1] = index_range(g, 0, lo[0], hi[0]);
  const auto [y0, y1] = index_range(g, 1, lo[1], hi[1]);
  const auto [z0, z1] = index_range(g, 2, lo[2], hi[2]);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) fn(x, y, z, g.position(x, y, z));
}

double ellipsoid_r2(const Vec3& p, const Vec3& c, const Vec3& s) {
  double r = 0.0;
  for (int a = 0; a < 3; ++a) r += (p[a] - c[a]) * (p[a] - c[a]) / (s[a] * s[a]);
  return r;
}

double polyline_length(const std::vector<Vec3>& path) {
  double len = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) len += norm(sub(path[i], path[i - 1]));
  return len;
}

// Inside the tube of radius r around the polyline, between the flat end planes.
bool in_tube(const Vec3& p, const AortaSpec& a) {
  const auto& path = a.path;
  const Vec3 t0 = sub(path[1], path[0]);
  const Vec3 t1 = sub(path.back(), path[path.size() - 2]);
  if (dot(sub(p, path.front()), t0) < 0.0 || dot(sub(p, path.back()), t1) > 0.0) return false;
  const double r2 = a.radius_mm * a.radius_mm;
  for (std::size_t i = 1; i < path.size(); ++i) {
    const Vec3 d = sub(path[i], path[i - 1]);
    const double t = std::clamp(dot(sub(p, path[i - 1]), d) / dot(d, d), 0.0, 1.0);
    const Vec3 q = sub(p, add_scaled(path[i - 1], d, t));
    if (dot(q, q) <= r2) return true;
  }
  return false;
}

// Number of voxel centres along axis `a` inside [lo, hi].
long centres_in(const GridGeometry& g, int a, double lo, double hi) {
  const auto [i0, i1] = index_range(g, a, lo, hi);
  return std::max(0, i1 - i0 + 1);
}

// Voxel plane nearest to world z (lower plane on an exact tie).
int nearest_plane(const GridGeometry& g, double z) {
  const double f = (z - g.origin[2]) / g.spacing[2];
  return std::clamp(static_cast<int>(std::ceil(f - 0.5)), 0, g.dims[2] - 1);
}

double half_width_at(double semi_x, double center_z, double semi_z, double z) {
  const double u = (z - center_z) / semi_z;
  return u * u >= 1.0 ? 0.0 : semi_x * std::sqrt(1.0 - u * u);
}

int weight_band(int hu) { return hu < 130 ? 0 : hu < 200 ? 1 : hu < 300 ? 2 : hu < 400 ? 3 : 4; }

std::int16_t clamp_hu(double hu) {
  return static_cast<std::int16_t>(std::clamp(std::lround(hu), static_cast<long>(kMinHu), static_cast<long>(kMaxHu)));
}

std::vector<Vec3> arc_path(const json& j) {
  const Vec3 c = vec3(j.at("center"));
  const double rho = j.at("radius").get<double>();
  const Vec3 u = vec3(j.at("u")), v = vec3(j.at("v"));
  const double from = j.at("from_deg").get<double>() * std::numbers::pi / 180.0;
  const double to = j.at("to_deg").get<double>() * std::numbers::pi / 180.0;
  const int segments = j.value("segments", 90);
  const double lead_in = j.value("lead_in_mm", 0.0), lead_out = j.value("lead_out_mm", 0.0);
  if (segments < 1 || !(rho > 0.0)) throw Error(ErrorCode::MalformedHeader, "arc needs radius > 0 and segments >= 1");
  auto point = [&](double th) { return add_scaled(add_scaled(c, u, rho * std::cos(th)), v, rho * std::sin(th)); };
  const double sign = to > from ? 1.0 : -1.0;
  auto tangent = [&](double th) {
    const Vec3 d = add_scaled(add_scaled(Vec3{0, 0, 0}, u, -std::sin(th)), v, std::cos(th));
    return Vec3{sign * d[0], sign * d[1], sign * d[2]};
  };
  std::vector<Vec3> path;
  if (lead_in > 0.0) path.push_back(add_scaled(point(from), tangent(from), -lead_in));
  for (int i = 0; i <= segments; ++i) path.push_back(point(from + (to - from) * i / segments));
  if (lead_out > 0.0) path.push_back(add_scaled(point(to), tangent(to), lead_out));
  return path;
}

std::uint8_t lung_label(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "left") return labels::kLeftLung;
  if (s == "right") return labels::kRightLung;
  throw Error(ErrorCode::MalformedHeader, "lung label must be left or right");
}

std::uint8_t calcium_label(const json& j) {
  const auto s = j.get<std::string>();
  if (s == "coronary") return labels::kCoronary;
  if (s == "aortic") return labels::kAorticCalc;
  throw Error(ErrorCode::MalformedHeader, "calcium label must be coronary or aortic");
}

void validate_spec(const PhantomSpec& s) {
  s.grid.validate();
  if (s.noise_sd < 0.0) throw Error(ErrorCode::InvalidArgument, "noise_sd must be >= 0");
  if (s.heart) {
    const HeartSpec& h = *s.heart;
    for (int a = 0; a < 3; ++a) {
      if (!(h.semi_axes[a] > 0.0) || !(h.chamber_semi_axes[a] > 0.0) || !(h.fat_thickness_mm > 0.0) ||
          h.chamber_semi_axes[a] >= h.semi_axes[a] - h.fat_thickness_mm) {
        throw Error(ErrorCode::InvalidArgument, "heart needs 0 < chamber < outer - fat thickness on every axis");
      }
    }
    if (h.fat_hu < -190 || h.fat_hu > -30) throw Error(ErrorCode::InvalidArgument, "fat_hu must lie in [-190, -30]");
    for (int hu : {h.myocardium_hu, h.blood_hu})
      if (hu >= -190 && hu <= -30) throw Error(ErrorCode::InvalidArgument, "non-fat heart HU inside the fat window");
    require_inside(s.grid, sub(h.center, h.semi_axes), add_scaled(h.center, h.semi_axes, 1.0), "heart");
  }
  if (s.aorta) {
    if (s.aorta->path.size() < 2 || !(s.aorta->radius_mm > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "aorta needs two path points and a positive radius");
    }
    for (const auto& p : s.aorta->path) {
      const Vec3 r = {s.aorta->radius_mm, s.aorta->radius_mm, s.aorta->radius_mm};
      require_inside(s.grid, sub(p, r), add_scaled(p, r, 1.0), "aorta");
    }
  }
  bool seen[3] = {false, false, false};
  for (const auto& l : s.lungs) {
    if (seen[l.label]) throw Error(ErrorCode::InvalidArgument, "duplicate lung label");
    seen[l.label] = true;
    if (l.high_fraction < 0 || l.low_fraction < 0 || l.high_fraction + l.low_fraction > 1.0) {
      throw Error(ErrorCode::InvalidArgument, "lung fractions must be >= 0 and sum to <= 1");
    }
    if (l.high_hu <= -200 || l.low_hu >= -950 || l.base_hu > -200 || l.base_hu < -950) {
      throw Error(ErrorCode::InvalidArgument, "lung HU levels do not match their classes");
    }
    for (int a = 0; a < 3; ++a)
      if (!(l.semi_axes[a] > 0.0)) throw Error(ErrorCode::InvalidArgument, "lung semi-axes must be positive");
    require_inside(s.grid, sub(l.center, l.semi_axes), add_scaled(l.center, l.semi_axes, 1.0), "lung");
  }
  bool bands[5] = {false, false, false, false, false};
  for (std::size_t i = 0; i < s.calcium.size(); ++i) {
    const auto& c = s.calcium[i];
    for (int a = 0; a < 3; ++a)
      if (c.min_mm[a] > c.max_mm[a]) throw Error(ErrorCode::InvalidArgument, "insert box has min > max");
    require_inside(s.grid, c.min_mm, c.max_mm, "calcium insert");
    bands[weight_band(c.hu)] = true;
    for (std::size_t j = 0; j < i; ++j) {
      const auto& o = s.calcium[j];
      bool overlap = true;
      for (int a = 0; a < 3; ++a) overlap = overlap && c.min_mm[a] <= o.max_mm[a] && o.min_mm[a] <= c.max_mm[a];
      if (overlap) throw Error(ErrorCode::InvalidArgument, "calcium inserts overlap");
    }
  }
  if (s.require_all_bands && !(bands[1] && bands[2] && bands[3] && bands[4])) {
    throw Error(ErrorCode::InvalidArgument, "inserts do not cover all four weight bands");
  }
}

TruthEntry ok(double value, double abs_tol, double rel_tol) { return {FieldStatus::Ok, value, abs_tol, rel_tol}; }
TruthEntry status_only(FieldStatus s) { return {s, 0.0, 0.0, 0.0}; }

constexpr double kVolumeRel = 0.05;
constexpr double kDiameterAbs = 1.0, kDiameterRel = 0.02;
constexpr double kRatioAbs = 0.02;
constexpr double kAtiRel = 0.03;
constexpr double kHuAbs = 1.0;

GroundTruth analytic_truth(const PhantomSpec& s, const CtVolume& v, const LabelMask& calcium) {
  using B = Biomarker;
  const auto& g = s.grid;
  GroundTruth t;
  for (auto& f : t.fields) f = status_only(FieldStatus::Failed);

  if (s.heart) {
    const HeartSpec& h = *s.heart;
    const auto& a = h.semi_axes;
    const auto& c = h.chamber_semi_axes;
    const double tk = h.fat_thickness_mm;
    const double shell = 4.0 / 3.0 * std::numbers::pi * (a[0] * a[1] * a[2] - (a[0] - tk) * (a[1] - tk) * (a[2] - tk));
    t[B::PFATV] = ok(shell, 0.0, kVolumeRel);
    t[B::PFATM] = ok(h.fat_hu, kHuAbs, 0.0);
    t[B::PFATSTD] = ok(0.0, kHuAbs, 0.0);
    t[B::CHR] = ok(c[0] * c[1] * c[2] / (a[0] * a[1] * a[2]), kRatioAbs, 0.0);
    const double zc = g.position(0, 0, nearest_plane(g, h.center[2]))[2];
    const double f = std::sqrt(std::max(0.0, 1.0 - std::pow((zc - h.center[2]) / c[2], 2)));
    t[B::CLD] = ok(std::max(c[0], c[1]) * f, kDiameterAbs, kDiameterRel);
    t[B::CSD] = ok(std::min(c[0], c[1]) * f, kDiameterAbs, kDiameterRel);
    if (!s.lungs.empty()) {
      const double heart_w = 2.0 * half_width_at(a[0], h.center[2], a[2], zc);
      double lo = 1e300, hi = -1e300;
      for (const auto& l : s.lungs) {
        const double hw = half_width_at(l.semi_axes[0], l.center[2], l.semi_axes[2], zc);
        if (hw <= 0.0) continue;
        lo = std::min(lo, l.center[0] - hw);
        hi = std::max(hi, l.center[0] + hw);
      }
      if (hi > lo) t[B::CTR] = ok(heart_w / (hi - lo), kRatioAbs, 0.0);
    }
  } else {
    t[B::PFATV] = ok(0.0, 0.0, 0.0);
    t[B::PFATM] = status_only(FieldStatus::EmptyInput);
    t[B::PFATSTD] = status_only(FieldStatus::EmptyInput);
  }

  double cacv = 0.0, acv = 0.0;
  for (const auto& c : s.calcium) {
    if (c.hu < 130) continue;
    const double n = static_cast<double>(centres_in(g, 0, c.min_mm[0], c.max_mm[0]) *
                                         centres_in(g, 1, c.min_mm[1], c.max_mm[1]) *
                                         centres_in(g, 2, c.min_mm[2], c.max_mm[2]));
    (c.label == labels::kCoronary ? cacv : acv) += n * g.voxel_volume_mm3();
  }
  t[B::CACV] = ok(cacv, 0.0, kVolumeRel);
  t[B::ACV] = ok(acv, 0.0, kVolumeRel);
  const auto [cacs, acs] = brute_force_agatston(v, calcium);
  t[B::CACS] = ok(cacs, 0.0, 0.0);
  t[B::ACS] = ok(acs, 0.0, 0.0);

  if (s.aorta) {
    const auto& p = s.aorta->path;
    t[B::ATI] = ok(polyline_length(p) / norm(sub(p.back(), p.front())), 0.0, kAtiRel);
    t[B::AMD] = ok(2.0 * s.aorta->radius_mm, kDiameterAbs, kDiameterRel);
    t[B::AMDSTD] = ok(0.0, kDiameterAbs, 0.0);
  }

  for (B b : {B::LLR, B::RLR, B::LHR, B::RHR}) t[b] = status_only(FieldStatus::EmptyInput);
  for (const auto& l : s.lungs) {
    const bool left = l.label == labels::kLeftLung;
    t[left ? B::LLR : B::RLR] = ok(l.low_fraction, kRatioAbs, 0.0);
    t[left ? B::LHR : B::RHR] = ok(l.high_fraction, kRatioAbs, 0.0);
  }
  return t;
}

}  // namespace

PhantomSpec phantom_spec_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    PhantomSpec s;
    s.name = j.value("name", std::string("phantom"));
    const auto& jg = j.at("grid");
    const auto dims = jg.at("dims").get<std::array<int, 3>>();
    s.grid.dims = dims;
    s.grid.spacing = vec3(jg.at("spacing"));
    if (jg.contains("origin")) s.grid.origin = vec3(jg["origin"]);
    s.background_hu = j.value("background_hu", -1000);
    s.noise_sd = j.value("noise_sd", 0.0);
    s.seed = j.value("seed", std::uint64_t{0});
    s.require_all_bands = j.value("require_all_bands", false);
    if (j.contains("heart")) {
      const auto& h = j["heart"];
      HeartSpec hs;
      hs.center = vec3(h.at("center"));
      hs.semi_axes = vec3(h.at("semi_axes"));
      hs.chamber_semi_axes = vec3(h.at("chamber_semi_axes"));
      hs.fat_thickness_mm = h.at("fat_thickness_mm").get<double>();
      hs.fat_hu = h.value("fat_hu", hs.fat_hu);
      hs.myocardium_hu = h.value("myocardium_hu", hs.myocardium_hu);
      hs.blood_hu = h.value("blood_hu", hs.blood_hu);
      s.heart = hs;
    }
    if (j.contains("aorta")) {
      const auto& a = j["aorta"];
      AortaSpec as;
      as.radius_mm = a.at("radius_mm").get<double>();
      as.wall_hu = a.value("wall_hu", as.wall_hu);
      if (a.contains("arc")) {
        as.path = arc_path(a["arc"]);
      } else {
        for (const auto& p : a.at("path")) as.path.push_back(vec3(p));
      }
      s.aorta = as;
    }
    for (const auto& l : j.value("lungs", json::array())) {
      LungSpec ls;
      ls.label = lung_label(l.at("label"));
      ls.center = vec3(l.at("center"));
      ls.semi_axes = vec3(l.at("semi_axes"));
      ls.base_hu = l.value("base_hu", ls.base_hu);
      ls.high_fraction = l.value("high_fraction", 0.0);
      ls.low_fraction = l.value("low_fraction", 0.0);
      ls.high_hu = l.value("high_hu", ls.high_hu);
      ls.low_hu = l.value("low_hu", ls.low_hu);
      s.lungs.push_back(ls);
    }
    for (const auto& c : j.value("calcium", json::array())) {
      CalciumInsert ci;
      ci.label = calcium_label(c.at("label"));
      ci.min_mm = vec3(c.at("min_mm"));
      ci.max_mm = vec3(c.at("max_mm"));
      ci.hu = c.at("hu").get<int>();
      s.calcium.push_back(ci);
    }
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, std::string("phantom spec: ") + e.what());
  }
}

PhantomSpec load_phantom_spec(const std::filesystem::path& path) { return phantom_spec_from_json(read_file(path)); }

bool TruthEntry::accepts(const Measurement& m) const {
  if (m.status != status) return false;
  if (status != FieldStatus::Ok) return true;
  return std::abs(m.value - value) <= std::max(abs_tol, rel_tol * std::abs(value));
}

Phantom generate(const PhantomSpec& spec) {
  validate_spec(spec);
  const GridGeometry& g = spec.grid;
  Phantom out;
  out.volume = CtVolume(g, clamp_hu(spec.background_hu));
  LabelMask peri(g, MaskSchema::Pericardium), calcium(g, MaskSchema::Calcium), aorta(g, MaskSchema::Aorta),
      lungs(g, MaskSchema::Lungs);
  std::vector<std::uint8_t> owner(g.voxel_count(), kFree);
  std::vector<bool> fat(g.voxel_count(), false);
  auto claim = [&](std::size_t i, Owner who, const char* what) {
    if (owner[i] != kFree && owner[i] != who) throw Error(ErrorCode::InvalidArgument, std::string(what) + " overlaps another shape");
    owner[i] = who;
  };

  if (spec.heart) {
    const HeartSpec& h = *spec.heart;
    const Vec3 inner = {h.semi_axes[0] - h.fat_thickness_mm, h.semi_axes[1] - h.fat_thickness_mm,
                        h.semi_axes[2] - h.fat_thickness_mm};
    for_box(g, sub(h.center, h.semi_axes), add_scaled(h.center, h.semi_axes, 1.0), [&](int x, int y, int z, const Vec3& p) {
      if (ellipsoid_r2(p, h.center, h.semi_axes) > 1.0) return;
      const std::size_t i = g.index(x, y, z);
      claim(i, kHeart, "heart");
      if (ellipsoid_r2(p, h.center, h.chamber_semi_axes) <= 1.0) {
        peri.labels[i] = labels::kChambers;
        out.volume.hu[i] = clamp_hu(h.blood_hu);
      } else {
        peri.labels[i] = labels::kPericardium;
        const bool in_shell = ellipsoid_r2(p, h.center, inner) > 1.0;
        fat[i] = in_shell;
        out.volume.hu[i] = clamp_hu(in_shell ? h.fat_hu : h.myocardium_hu);
      }
    });
  }

  if (spec.aorta) {
    const AortaSpec& a = *spec.aorta;
    Vec3 lo = a.path[0], hi = a.path[0];
    for (const auto& p : a.path)
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(lo[k], p[k] - a.radius_mm);
        hi[k] = std::max(hi[k], p[k] + a.radius_mm);
      }
    for_box(g, lo, hi, [&](int x, int y, int z, const Vec3& p) {
      if (!in_tube(p, a)) return;
      const std::size_t i = g.index(x, y, z);
      claim(i, kAortaOwner, "aorta");
      aorta.labels[i] = labels::kAorta;
      out.volume.hu[i] = clamp_hu(a.wall_hu);
    });
  }

  for (const auto& l : spec.lungs) {
    Rng rng(mix_seed(spec.seed, l.label));
    for_box(g, sub(l.center, l.semi_axes), add_scaled(l.center, l.semi_axes, 1.0), [&](int x, int y, int z, const Vec3& p) {
      if (ellipsoid_r2(p, l.center, l.semi_axes) > 1.0) return;
      const std::size_t i = g.index(x, y, z);
      claim(i, kLung, "lung");
      if (lungs.labels[i] != 0) throw Error(ErrorCode::InvalidArgument, "lungs overlap");
      lungs.labels[i] = l.label;
      const double u = rng.uniform();
      out.volume.hu[i] = clamp_hu(u < l.high_fraction                   ? l.high_hu
                                  : u < l.high_fraction + l.low_fraction ? l.low_hu
                                                                         : l.base_hu);
    });
  }

  for (const auto& c : spec.calcium) {
    for_box(g, c.min_mm, c.max_mm, [&](int x, int y, int z, const Vec3&) {
      const std::size_t i = g.index(x, y, z);
      if (fat[i] || owner[i] == kLung) throw Error(ErrorCode::InvalidArgument, "calcium insert touches fat or lung");
      calcium.labels[i] = c.label;
      out.volume.hu[i] = clamp_hu(c.hu);
    });
  }

  if (spec.noise_sd > 0.0) {
    Rng rng(mix_seed(spec.seed, 100));
    for (std::size_t i = 0; i < owner.size(); ++i) {
      if (owner[i] == kFree && calcium.labels[i] == 0) {
        out.volume.hu[i] = clamp_hu(spec.background_hu + rng.normal(0.0, spec.noise_sd));
      }
    }
  }

  out.truth = analytic_truth(spec, out.volume, calcium);
  out.masks.pericardium = std::move(peri);
  out.masks.calcium = std::move(calcium);
  out.masks.aorta = std::move(aorta);
  out.masks.lungs = std::move(lungs);
  return out;
}

std::pair<double, double> brute_force_agatston(const CtVolume& v, const LabelMask& m) {
  if (!(v.geometry == m.geometry)) throw Error(ErrorCode::DimsMismatch, "volume and mask grids differ");
  const auto& g = v.geometry;
  const int nx = g.dims[0], ny = g.dims[1], nz = g.dims[2];
  const double pixel_mm2 = g.spacing[0] * g.spacing[1];
  // Slab of slice z: the 3 mm bin holding the slice centre.
  std::vector<int> slab_of(static_cast<std::size_t>(nz));
  int slabs = 0;
  for (int z = 0; z < nz; ++z) {
    slab_of[z] = static_cast<int>(std::floor((z + 0.5) * g.spacing[2] / 3.0));
    slabs = std::max(slabs, slab_of[z] + 1);
  }
  long long weighted[3] = {0, 0, 0};
  std::vector<int> peak(static_cast<std::size_t>(nx) * ny);
  std::vector<char> seen(peak.size());
  std::vector<int> stack;
  for (const std::uint8_t label : {labels::kCoronary, labels::kAorticCalc}) {
    for (int s = 0; s < slabs; ++s) {
      std::fill(peak.begin(), peak.end(), -1);
      for (int z = 0; z < nz; ++z) {
        if (slab_of[z] != s) continue;
        for (int y = 0; y < ny; ++y)
          for (int x = 0; x < nx; ++x) {
            const int hu = v.at(x, y, z);
            if (m.at(x, y, z) == label && hu >= 130) peak[y * nx + x] = std::max(peak[y * nx + x], hu);
          }
      }
      std::fill(seen.begin(), seen.end(), 0);
      for (int start = 0; start < nx * ny; ++start) {
        if (peak[start] < 0 || seen[start]) continue;
        long pixels = 0;
        int top = 0;
        stack.assign(1, start);
        seen[start] = 1;
        while (!stack.empty()) {
          const int cur = stack.back();
          stack.pop_back();
          ++pixels;
          top = std::max(top, peak[cur]);
          const int cx = cur % nx, cy = cur / nx;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int qx = cx + dx, qy = cy + dy;
              if (qx < 0 || qy < 0 || qx >= nx || qy >= ny) continue;
              const int q = qy * nx + qx;
              if (peak[q] >= 0 && !seen[q]) {
                seen[q] = 1;
                stack.push_back(q);
              }
            }
        }
        if (static_cast<double>(pixels) * pixel_mm2 < 1.0) continue;
        weighted[label] += pixels * weight_band(top);
      }
    }
  }
  return {static_cast<double>(weighted[labels::kCoronary]) * pixel_mm2,
          static_cast<double>(weighted[labels::kAorticCalc]) * pixel_mm2};
}

std::vector<TruthMismatch> compare_to_truth(const BiomarkerVector& measured, const GroundTruth& truth) {
  std::vector<TruthMismatch> out;
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    const auto& m = measured.fields[i];
    const auto& t = truth.fields[i];
    if (t.accepts(m)) continue;
    std::string detail = "expected " + std::string(to_string(t.status));
    if (t.status == FieldStatus::Ok) detail += " " + format_double(t.value);
    detail += ", got " + std::string(to_string(m.status));
    if (m.is_ok()) detail += " " + format_double(m.value);
    out.push_back({std::string(kBiomarkerNames[i]), detail});
  }
  return out;
}

std::string truth_to_json(const GroundTruth& truth) {
  nlohmann::ordered_json doc;
  for (std::size_t i = 0; i < kBiomarkerCount; ++i) {
    const auto& t = truth.fields[i];
    nlohmann::ordered_json e;
    e["status"] = to_string(t.status);
    e["value"] = t.status == FieldStatus::Ok ? nlohmann::ordered_json(t.value) : nlohmann::ordered_json(nullptr);
    e["abs_tol"] = t.abs_tol;
    e["rel_tol"] = t.rel_tol;
    doc[std::string(kBiomarkerNames[i])] = std::move(e);
  }
  return doc.dump(2) + "\n";
}

}  // namespace ctquant
