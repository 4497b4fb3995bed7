// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace ctquant {

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// SHA-256 of a whole file; throws Error(MissingFile) when unreadable.
std::string sha256_file(const std::filesystem::path& path);

/// Reads a whole file into a string; throws Error(MissingFile).
std::string read_file(const std::filesystem::path& path);

/// Writes bytes atomically enough for our purposes; throws Error(IoFailure).
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double value);

/// Strict full-string parse; returns false on trailing garbage.
bool parse_double(std::string_view text, double& out);

}  // namespace ctquant
