// SPDX-License-Identifier: Apache-2.0
//
// Volumetric data model and the .ctqh on-disk format: a JSON header plus a raw
// little-endian payload, x-fastest.
//
// Axis convention: x = left-right, y = anterior-posterior, z = inferior-superior.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace ctquant {

inline constexpr std::int16_t kMinHu = -1024;
inline constexpr std::int16_t kMaxHu = 4095;

struct GridGeometry {
  std::array<int, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  /// The one linearization used everywhere: x fastest, then y, then z.
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }

  std::array<int, 3> coords(std::size_t idx) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny), static_cast<int>(idx / (nx * ny))};
  }

  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }

  /// World position (mm) of a voxel centre.
  std::array<double, 3> position(int x, int y, int z) const {
    return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
  }

  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  /// Throws MalformedHeader if dims < 1 or spacing is not strictly positive.
  void validate() const;

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

enum class MaskSchema { Pericardium, Calcium, Aorta, Lungs };

std::string_view to_string(MaskSchema schema);
MaskSchema mask_schema_from_string(std::string_view name);

/// Largest legal label value for a schema (labels are 0..max).
std::uint8_t max_label(MaskSchema schema);

namespace labels {
inline constexpr std::uint8_t kBackground = 0;
// Pericardium schema
inline constexpr std::uint8_t kPericardium = 1;
inline constexpr std::uint8_t kChambers = 2;
// Calcium schema
inline constexpr std::uint8_t kCoronary = 1;
inline constexpr std::uint8_t kAorticCalc = 2;
// Aorta schema
inline constexpr std::uint8_t kAorta = 1;
// Lungs schema
inline constexpr std::uint8_t kLeftLung = 1;
inline constexpr std::uint8_t kRightLung = 2;
}  // namespace labels

struct CtVolume {
  GridGeometry geometry;
  std::vector<std::int16_t> hu;
  /// Number of samples clamped into [kMinHu, kMaxHu] when the volume was loaded.
  std::size_t clamped_count = 0;

  CtVolume() = default;
  CtVolume(GridGeometry geom, std::int16_t fill);

  std::int16_t at(int x, int y, int z) const { return hu[geometry.index(x, y, z)]; }
  std::int16_t& at(int x, int y, int z) { return hu[geometry.index(x, y, z)]; }

  /// Clamps every sample into the legal HU range and returns how many moved.
  std::size_t clamp_hu();
};

struct LabelMask {
  GridGeometry geometry;
  std::vector<std::uint8_t> labels;
  MaskSchema schema = MaskSchema::Pericardium;

  LabelMask() = default;
  LabelMask(GridGeometry geom, MaskSchema s);

  std::uint8_t at(int x, int y, int z) const { return labels[geometry.index(x, y, z)]; }
  std::uint8_t& at(int x, int y, int z) { return labels[geometry.index(x, y, z)]; }

  /// Throws IllegalLabel if any voxel falls outside the schema's label set.
  void validate_labels() const;
};

double voxel_volume_mm3(const CtVolume& v);

/// Throws DimsMismatch unless the mask grid equals the volume grid exactly.
void require_aligned(const CtVolume& v, const LabelMask& m);
/// Throws SchemaMismatch unless the mask carries the expected schema.
void require_schema(const LabelMask& m, MaskSchema expected);

CtVolume load_volume(const std::filesystem::path& header_path);
void save_volume(const CtVolume& v, const std::filesystem::path& header_path);
LabelMask load_mask(const std::filesystem::path& header_path, MaskSchema schema);
void save_mask(const LabelMask& m, const std::filesystem::path& header_path);

}  // namespace ctquant
