// SPDX-License-Identifier: Apache-2.0
//
// Geometry over label grids: connected components, Euclidean distance
// transform, single-tube centerlines, orthogonal cross-sections, direct
// least-squares ellipse fitting and axis extents.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ctquant/volume.hpp"

namespace ctquant {

using Point3 = std::array<double, 3>;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

enum class Connectivity { Six, TwentySix };

/// A foreground/background grid sharing a CtVolume's geometry.
struct BinaryGrid {
  GridGeometry geometry;
  std::vector<std::uint8_t> data;  // 0 or 1

  BinaryGrid() = default;
  explicit BinaryGrid(GridGeometry g) : geometry(g), data(g.voxel_count(), 0) {}

  /// Foreground = voxels whose label is in `selected`.
  static BinaryGrid from_mask(const LabelMask& mask, std::span<const std::uint8_t> selected);

  bool at(int x, int y, int z) const { return data[geometry.index(x, y, z)] != 0; }
  void set(int x, int y, int z, bool on = true) { data[geometry.index(x, y, z)] = on ? 1 : 0; }
  std::size_t count() const;
};

struct BoundingBox {
  std::array<int, 3> lo{};  // inclusive
  std::array<int, 3> hi{};  // inclusive
};

struct ComponentSet {
  /// 0 for background, otherwise a dense id 1..count(), numbered in order of
  /// each component's first voxel in x-fastest scan order.
  std::vector<std::int32_t> ids;
  std::vector<std::size_t> voxel_counts;  // [id - 1]
  std::vector<BoundingBox> boxes;         // [id - 1]
  Connectivity connectivity = Connectivity::TwentySix;

  int count() const { return static_cast<int>(voxel_counts.size()); }
};

ComponentSet connected_components(const BinaryGrid& grid, Connectivity connectivity);

/// Euclidean distance (mm) from each foreground voxel centre to the nearest
/// background voxel centre; voxels outside the grid count as background.
/// Background voxels get 0.
std::vector<double> distance_transform_mm(const BinaryGrid& grid);

/// Trilinear interpolation of the 0/1 grid at a world position (mm);
/// outside the grid reads as 0.
double sample_trilinear(const BinaryGrid& grid, const Point3& world);

struct Centerline {
  std::vector<Point3> points;  // mm, world coordinates, ordered R -> E
  double arc_length_mm = 0.0;

  const Point3& start() const { return points.front(); }
  const Point3& end() const { return points.back(); }
  /// Straight-line distance |R - E| in mm.
  double chord_mm() const;
  /// Position at arc length s (clamped to [0, arc_length_mm]).
  Point3 point_at(double s) const;
};

struct CenterlineOptions {
  double resample_step_mm = 1.0;
  int smoothing_window = 5;
  int smoothing_passes = 3;
  /// Ends of the ridge path whose depth falls below this fraction of the
  /// median path depth are trimmed and re-extended along the local tangent.
  double end_trim_fraction = 0.85;
};

/// Centerline of a single tube-shaped foreground component.
/// Errors: EmptyMask, MultipleComponents, DegenerateShape.
Centerline extract_centerline(const BinaryGrid& grid, const CenterlineOptions& options = {});

struct CrossSection {
  Point3 center{};
  Point3 tangent{};
  int samples_per_side = 0;  // sample grid is samples_per_side x samples_per_side
  double pitch_mm = 0.0;
  std::vector<std::uint8_t> samples;  // mask samples on the plane, row-major (v rows, u columns)
  double max_diameter_mm = 0.0;
};

struct CrossSectionOptions {
  double pitch_mm = 0.5;
  double window_mm = 100.0;
  double tangent_half_span_mm = 2.0;
};

/// Sections at arc positions 0, interval, 2*interval, ...: exactly
/// floor(arc_length / interval) + 1 of them.
std::vector<CrossSection> cross_sections(const BinaryGrid& grid, const Centerline& centerline, double interval_mm,
                                         const CrossSectionOptions& options = {});

struct EllipseFit {
  Point2 center;
  double semi_major_mm = 0.0;
  double semi_minor_mm = 0.0;
  double angle_rad = 0.0;  // direction of the major axis, in (-pi/2, pi/2]
};

/// Direct ellipse-specific least squares. Errors: TooFewPoints (< 6),
/// DegenerateConic (collinear input or no ellipse solution).
EllipseFit fit_ellipse(std::span<const Point2> points);

enum class Axis { X = 0, Y = 1, Z = 2 };

/// (max index - min index + 1) * spacing along `axis` over voxels whose label
/// is in `selected`, optionally restricted to one axial (z) slice. 0 when
/// nothing matches.
double axial_extent_mm(const LabelMask& mask, std::span<const std::uint8_t> selected, Axis axis,
                       std::optional<int> z_slice = std::nullopt);

}  // namespace ctquant
