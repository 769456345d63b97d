#pragma once

// Binary matrix container: 7-byte magic "BXMAT1\0", u64 rows, u64 cols (both
// little-endian), then rows*cols little-endian IEEE-754 binary32 values in
// row-major order.

#include "brainexplore/core.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

namespace brainexplore {

inline constexpr std::array<char, 7> kMatrixMagic = {'B', 'X', 'M', 'A', 'T', '1', '\0'};
inline constexpr std::size_t kMatrixHeaderBytes = kMatrixMagic.size() + 16;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline void put_f32(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_all(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_matrix(const Matrix& m) {
  std::string out(kMatrixMagic.data(), kMatrixMagic.size());
  out.reserve(kMatrixHeaderBytes + static_cast<std::size_t>(m.size()) * 4);
  detail::put_u64(out, static_cast<std::uint64_t>(m.rows()));
  detail::put_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) detail::put_f32(out, static_cast<float>(m(r, c)));
  return out;
}

inline Matrix decode_matrix(std::string_view bytes, const std::string& source = "<buffer>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kMatrixMagic.size() ||
      std::memcmp(bytes.data(), kMatrixMagic.data(), kMatrixMagic.size()) != 0)
    throw FormatError(source + ": bad magic at offset 0");
  if (bytes.size() < kMatrixHeaderBytes)
    throw FormatError(source + ": truncated header at offset " + std::to_string(bytes.size()));
  const std::uint64_t rows = detail::get_u64(p + 7);
  const std::uint64_t cols = detail::get_u64(p + 15);
  constexpr auto kMaxIndex = static_cast<std::uint64_t>(std::numeric_limits<Eigen::Index>::max());
  if (rows > kMaxIndex) throw FormatError(source + ": dimension overflow in row count at offset 7");
  if (cols > kMaxIndex) throw FormatError(source + ": dimension overflow in column count at offset 15");
  if (cols != 0 && rows > std::numeric_limits<std::uint64_t>::max() / 4 / cols)
    throw FormatError(source + ": dimension overflow (rows*cols) at offset 7");
  const std::uint64_t payload = rows * cols * 4;
  const std::uint64_t available = bytes.size() - kMatrixHeaderBytes;
  if (payload > available)
    throw FormatError(source + ": truncated data at offset " + std::to_string(bytes.size()) + " (expected " +
                      std::to_string(kMatrixHeaderBytes + payload) + " bytes)");
  if (payload < available)
    throw FormatError(source + ": trailing bytes at offset " + std::to_string(kMatrixHeaderBytes + payload));
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  const unsigned char* data = p + kMatrixHeaderBytes;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c, data += 4) m(r, c) = detail::get_f32(data);
  return m;
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  detail::write_all(path, encode_matrix(m));
}

inline Matrix load_matrix(const std::filesystem::path& path) {
  return decode_matrix(detail::read_all(path), path.string());
}

}  // namespace brainexplore
