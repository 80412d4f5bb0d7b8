#include "lqrppg/io.hpp"

#include "lqrppg/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace lqrppg::io {

namespace {

template <class T>
void byteswap_inplace(std::vector<char>& bytes) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i + sizeof(T) <= bytes.size(); i += sizeof(T))
      std::reverse(bytes.begin() + i, bytes.begin() + i + sizeof(T));
  }
}

template <class T>
void write_array(const std::filesystem::path& path, std::span<const T> data) {
  std::vector<char> bytes(data.size_bytes());
  if (!data.empty()) std::memcpy(bytes.data(), data.data(), bytes.size());
  byteswap_inplace<T>(bytes);
  write_bytes(path, bytes);
}

template <class T>
std::vector<T> read_array(const std::filesystem::path& path, std::size_t count) {
  std::vector<char> bytes = read_bytes(path);
  if (bytes.size() != count * sizeof(T))
    throw DataError("corrupt or truncated array file " + path.string() + ": expected " +
                    std::to_string(count * sizeof(T)) + " bytes, found " + std::to_string(bytes.size()));
  byteswap_inplace<T>(bytes);
  std::vector<T> out(count);
  if (count > 0) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace

void write_f32(const std::filesystem::path& path, std::span<const float> data) { write_array(path, data); }
void write_f64(const std::filesystem::path& path, std::span<const double> data) { write_array(path, data); }
void write_i16(const std::filesystem::path& path, std::span<const std::int16_t> data) { write_array(path, data); }

std::vector<float> read_f32(const std::filesystem::path& path, std::size_t count) {
  return read_array<float>(path, count);
}
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t count) {
  return read_array<double>(path, count);
}
std::vector<std::int16_t> read_i16(const std::filesystem::path& path, std::size_t count) {
  return read_array<std::int16_t>(path, count);
}

std::vector<char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

void write_json(const std::filesystem::path& path, const json& j) {
  const std::string s = j.dump(2) + "\n";
  write_bytes(path, std::span<const char>(s.data(), s.size()));
}

json read_json(const std::filesystem::path& path) {
  const std::vector<char> bytes = read_bytes(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw DataError("corrupt JSON in " + path.string() + ": " + e.what());
  }
}

std::string git_blob_sha1(std::span<const char> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  if (!bytes.empty()) EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);

  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xF]);
  }
  return out;
}

std::string git_blob_sha1_file(const std::filesystem::path& path) {
  const std::vector<char> bytes = read_bytes(path);
  return git_blob_sha1(bytes);
}

}  // namespace lqrppg::io
