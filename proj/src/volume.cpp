// SPDX-License-Identifier: Apache-2.0
#include "ctquant/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>
#include <string>

#include "ctquant/digest.hpp"
#include "ctquant/error.hpp"
#include "ctquant/log.hpp"

namespace ctquant {
namespace {

using ordered_json = nlohmann::ordered_json;

constexpr const char* kMagic = "CTQV";
constexpr int kVersion = 1;

struct RawHeader {
  GridGeometry geometry;
  std::string dtype;
  std::filesystem::path data_file;
  std::uint32_t crc = 0;
};

std::string crc_hex(std::uint32_t crc) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc);
  return buf;
}

std::filesystem::path default_data_file(const std::filesystem::path& header_path) {
  auto name = header_path.filename();
  name.replace_extension(".raw");
  return name;
}

template <std::size_t N>
std::array<double, N> read_reals(const ordered_json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != N) {
    throw Error(ErrorCode::MalformedHeader, std::string("field '") + key + "' must be an array of 3 numbers");
  }
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!j[key][i].is_number()) throw Error(ErrorCode::MalformedHeader, std::string("non-numeric ") + key);
    out[i] = j[key][i].get<double>();
  }
  return out;
}

RawHeader read_header(const std::filesystem::path& header_path, std::string_view expected_dtype) {
  if (!std::filesystem::exists(header_path)) throw Error(ErrorCode::MissingFile, header_path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(header_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedHeader, header_path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::MalformedHeader, "header is not a JSON object");
  auto require_string = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) {
      throw Error(ErrorCode::MalformedHeader, std::string("missing string field '") + key + "'");
    }
    return j[key].get<std::string>();
  };
  if (require_string("magic") != kMagic) throw Error(ErrorCode::MalformedHeader, "bad magic");
  if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != kVersion) {
    throw Error(ErrorCode::MalformedHeader, "unsupported version");
  }
  RawHeader h;
  h.dtype = require_string("dtype");
  if (h.dtype != expected_dtype) {
    throw Error(ErrorCode::MalformedHeader, "dtype '" + h.dtype + "', expected '" + std::string(expected_dtype) + "'");
  }
  if (require_string("order") != "x-fastest") throw Error(ErrorCode::MalformedHeader, "order must be x-fastest");
  if (require_string("endianness") != "little") throw Error(ErrorCode::MalformedHeader, "endianness must be little");

  if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].size() != 3) {
    throw Error(ErrorCode::MalformedHeader, "field 'dims' must be an array of 3 integers");
  }
  for (int i = 0; i < 3; ++i) {
    if (!j["dims"][i].is_number_integer()) throw Error(ErrorCode::MalformedHeader, "non-integer dims");
    h.geometry.dims[i] = j["dims"][i].get<int>();
  }
  h.geometry.spacing = read_reals<3>(j, "spacing_mm");
  h.geometry.origin = read_reals<3>(j, "origin_mm");
  h.geometry.validate();

  const std::string crc_text = require_string("crc32");
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(crc_text, &used, 16);
    if (used != crc_text.size() || v > 0xFFFFFFFFul) throw std::invalid_argument("range");
    h.crc = static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
    throw Error(ErrorCode::MalformedHeader, "crc32 is not a 32-bit hex value");
  }
  h.data_file = header_path.parent_path() / require_string("data_file");
  return h;
}

std::vector<std::uint8_t> read_payload(const RawHeader& h, std::size_t element_size) {
  if (!std::filesystem::exists(h.data_file)) throw Error(ErrorCode::MissingFile, h.data_file.string());
  const std::string bytes = read_file(h.data_file);
  const std::size_t expected = h.geometry.voxel_count() * element_size;
  if (bytes.size() != expected) {
    throw Error(ErrorCode::SizeMismatch, "payload has " + std::to_string(bytes.size()) + " bytes, expected " +
                                             std::to_string(expected));
  }
  std::vector<std::uint8_t> payload(bytes.begin(), bytes.end());
  if (crc32(payload) != h.crc) throw Error(ErrorCode::ChecksumMismatch, h.data_file.string());
  return payload;
}

void write_pair(const std::filesystem::path& header_path, const GridGeometry& g, std::string_view dtype,
                std::span<const std::uint8_t> payload) {
  const auto data_name = default_data_file(header_path);
  ordered_json j;
  j["magic"] = kMagic;
  j["version"] = kVersion;
  j["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
  j["spacing_mm"] = {g.spacing[0], g.spacing[1], g.spacing[2]};
  j["origin_mm"] = {g.origin[0], g.origin[1], g.origin[2]};
  j["dtype"] = std::string(dtype);
  j["order"] = "x-fastest";
  j["endianness"] = "little";
  j["data_file"] = data_name.string();
  j["crc32"] = crc_hex(crc32(payload));
  write_file(header_path.parent_path() / data_name,
             std::string_view(reinterpret_cast<const char*>(payload.data()), payload.size()));
  write_file(header_path, j.dump(2) + "\n");
}

}  // namespace

void GridGeometry::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (dims[i] < 1) throw Error(ErrorCode::MalformedHeader, "dims must be >= 1");
    if (!(spacing[i] > 0.0) || !std::isfinite(spacing[i])) {
      throw Error(ErrorCode::MalformedHeader, "spacing must be strictly positive");
    }
    if (!std::isfinite(origin[i])) throw Error(ErrorCode::MalformedHeader, "origin must be finite");
  }
}

std::string_view to_string(MaskSchema schema) {
  switch (schema) {
    case MaskSchema::Pericardium: return "pericardium";
    case MaskSchema::Calcium: return "calcium";
    case MaskSchema::Aorta: return "aorta";
    case MaskSchema::Lungs: return "lungs";
  }
  return "unknown";
}

MaskSchema mask_schema_from_string(std::string_view name) {
  for (auto s : {MaskSchema::Pericardium, MaskSchema::Calcium, MaskSchema::Aorta, MaskSchema::Lungs}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown mask schema '" + std::string(name) + "'");
}

std::uint8_t max_label(MaskSchema schema) { return schema == MaskSchema::Aorta ? 1 : 2; }

CtVolume::CtVolume(GridGeometry geom, std::int16_t fill) : geometry(geom), hu(geom.voxel_count(), fill) {}

std::size_t CtVolume::clamp_hu() {
  std::size_t n = 0;
  for (auto& v : hu) {
    const auto c = std::clamp(v, kMinHu, kMaxHu);
    if (c != v) {
      v = c;
      ++n;
    }
  }
  return n;
}

LabelMask::LabelMask(GridGeometry geom, MaskSchema s) : geometry(geom), labels(geom.voxel_count(), 0), schema(s) {}

void LabelMask::validate_labels() const {
  const auto top = max_label(schema);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > top) {
      const auto c = geometry.coords(i);
      throw Error(ErrorCode::IllegalLabel, "label " + std::to_string(labels[i]) + " at (" + std::to_string(c[0]) +
                                               "," + std::to_string(c[1]) + "," + std::to_string(c[2]) +
                                               ") is not in the " + std::string(to_string(schema)) + " schema");
    }
  }
}

double voxel_volume_mm3(const CtVolume& v) { return v.geometry.voxel_volume_mm3(); }

void require_aligned(const CtVolume& v, const LabelMask& m) {
  if (v.geometry.dims != m.geometry.dims || v.geometry.spacing != m.geometry.spacing) {
    throw Error(ErrorCode::DimsMismatch, std::string(to_string(m.schema)) + " mask grid differs from the volume grid");
  }
  if (m.labels.size() != m.geometry.voxel_count() || v.hu.size() != v.geometry.voxel_count()) {
    throw Error(ErrorCode::DimsMismatch, "sample count does not match dims");
  }
}

void require_schema(const LabelMask& m, MaskSchema expected) {
  if (m.schema != expected) {
    throw Error(ErrorCode::SchemaMismatch, "expected a " + std::string(to_string(expected)) + " mask, got " +
                                               std::string(to_string(m.schema)));
  }
}

CtVolume load_volume(const std::filesystem::path& header_path) {
  const RawHeader h = read_header(header_path, "i16");
  const auto payload = read_payload(h, 2);
  CtVolume v;
  v.geometry = h.geometry;
  v.hu.resize(h.geometry.voxel_count());
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    const auto lo = static_cast<std::uint16_t>(payload[2 * i]);
    const auto hi = static_cast<std::uint16_t>(payload[2 * i + 1]);
    v.hu[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  v.clamped_count = v.clamp_hu();
  if (v.clamped_count > 0) {
    logger().warn("{}: clamped {} samples into [{}, {}] HU", header_path.string(), v.clamped_count, kMinHu, kMaxHu);
  }
  return v;
}

void save_volume(const CtVolume& v, const std::filesystem::path& header_path) {
  v.geometry.validate();
  if (v.hu.size() != v.geometry.voxel_count()) throw Error(ErrorCode::SizeMismatch, "sample count does not match dims");
  std::vector<std::uint8_t> payload(2 * v.hu.size());
  for (std::size_t i = 0; i < v.hu.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(v.hu[i]);
    payload[2 * i] = static_cast<std::uint8_t>(u & 0xFF);
    payload[2 * i + 1] = static_cast<std::uint8_t>(u >> 8);
  }
  write_pair(header_path, v.geometry, "i16", payload);
}

LabelMask load_mask(const std::filesystem::path& header_path, MaskSchema schema) {
  const RawHeader h = read_header(header_path, "u8");
  LabelMask m;
  m.geometry = h.geometry;
  m.schema = schema;
  m.labels = read_payload(h, 1);
  m.validate_labels();
  return m;
}

void save_mask(const LabelMask& m, const std::filesystem::path& header_path) {
  m.geometry.validate();
  if (m.labels.size() != m.geometry.voxel_count()) throw Error(ErrorCode::SizeMismatch, "label count does not match dims");
  m.validate_labels();
  write_pair(header_path, m.geometry, "u8", m.labels);
}

}  // namespace ctquant
