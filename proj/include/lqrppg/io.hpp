#pragma once

// Raw little-endian array files, JSON helpers and content hashing shared by
// the corpus, checkpoint and bank formats.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace lqrppg::io {

using json = nlohmann::json;

void write_f32(const std::filesystem::path& path, std::span<const float> data);
void write_f64(const std::filesystem::path& path, std::span<const double> data);
void write_i16(const std::filesystem::path& path, std::span<const std::int16_t> data);

/// Reads exactly `count` elements; a size mismatch raises DataError naming the path.
std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t count);
std::vector<std::int16_t> read_i16(const std::filesystem::path& path, std::size_t count);

std::vector<char> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const char> bytes);

void write_json(const std::filesystem::path& path, const json& j);
/// Parse errors and missing files raise DataError naming the path.
json read_json(const std::filesystem::path& path);

/// SHA-1 over "blob <len>\0<bytes>", hex encoded (same digest git uses).
std::string git_blob_sha1(std::span<const char> bytes);
std::string git_blob_sha1_file(const std::filesystem::path& path);

}  // namespace lqrppg::io
