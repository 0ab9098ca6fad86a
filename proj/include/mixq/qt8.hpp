#pragma once

// QT8 binary tensor files.
//
//   offset  size  field
//   0       4     magic "QT8\0" (51 54 38 00)
//   4       4     u32 LE version, currently 1
//   8       1     u8 dtype code: 0 = f32, 1 = i8, 2 = i32
//   9       1     u8 ndims, always 2
//   10      8     u64 LE rows
//   18      8     u64 LE cols
//   26      ...   row-major payload, little-endian elements
//
// No padding, no checksum.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace mixq::qt8 {

inline constexpr std::array<std::uint8_t, 4> kMagic{0x51, 0x54, 0x38, 0x00};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 26;

enum class Dtype : std::uint8_t { F32 = 0, I8 = 1, I32 = 2 };

using AnyMatrix = std::variant<DenseMatrix, Int8Matrix, Int32Matrix>;

namespace detail {

// Writes v little-endian at p and returns the position just past it.
template <typename U>
std::uint8_t* put_le(std::uint8_t* p, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) *p++ = static_cast<std::uint8_t>(v >> (8 * i));
  return p;
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<T, float>) return Dtype::F32;
  else if constexpr (std::is_same_v<T, std::int8_t>) return Dtype::I8;
  else return Dtype::I32;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 1, std::uint8_t, std::uint32_t>;

template <typename T>
Matrix<T> decode_payload(const std::uint8_t* p, std::size_t rows, std::size_t cols) {
  std::vector<T> v(rows * cols);
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::bit_cast<T>(get_le<Bits<T>>(p + i * sizeof(T)));
  return Matrix<T>(rows, cols, std::move(v));
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode(const Matrix<T>& m) {
  std::vector<std::uint8_t> out(kHeaderSize + m.size() * sizeof(T));
  std::uint8_t* p = std::copy(kMagic.begin(), kMagic.end(), out.data());
  p = detail::put_le<std::uint32_t>(p, kVersion);
  *p++ = static_cast<std::uint8_t>(detail::dtype_of<T>());
  *p++ = 2;
  p = detail::put_le<std::uint64_t>(p, m.rows());
  p = detail::put_le<std::uint64_t>(p, m.cols());
  for (T v : m.data()) p = detail::put_le(p, std::bit_cast<detail::Bits<T>>(v));
  return out;
}

inline std::vector<std::uint8_t> encode(const AnyMatrix& m) {
  return std::visit([](const auto& x) { return encode(x); }, m);
}

inline AnyMatrix decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw BadMagic("QT8: bad magic bytes");
  if (bytes.size() < kHeaderSize) throw TruncatedPayload("QT8: truncated header");
  const std::uint8_t* p = bytes.data();
  const auto version = detail::get_le<std::uint32_t>(p + 4);
  if (version != kVersion)
    throw VersionMismatch("QT8: unsupported version " + std::to_string(version));
  const std::uint8_t code = p[8];
  if (code > 2) throw UnknownDtype("QT8: unknown dtype code " + std::to_string(code));
  if (p[9] != 2) throw FormatError("QT8: ndims must be 2, got " + std::to_string(p[9]));
  const auto rows = detail::get_le<std::uint64_t>(p + 10);
  const auto cols = detail::get_le<std::uint64_t>(p + 18);
  const std::size_t elem = code == 1 ? 1 : 4;
  const std::size_t avail = bytes.size() - kHeaderSize;
  if (cols != 0 && rows > avail / elem / cols)
    throw TruncatedPayload("QT8: payload shorter than declared " + std::to_string(rows) + "x" +
                           std::to_string(cols));
  const std::size_t need = rows * cols * elem;
  if (avail < need) throw TruncatedPayload("QT8: truncated payload");
  if (avail > need) throw FormatError("QT8: trailing bytes after payload");
  p += kHeaderSize;
  switch (static_cast<Dtype>(code)) {
    case Dtype::F32: return detail::decode_payload<float>(p, rows, cols);
    case Dtype::I8: return detail::decode_payload<std::int8_t>(p, rows, cols);
    case Dtype::I32: return detail::decode_payload<std::int32_t>(p, rows, cols);
  }
  throw UnknownDtype("QT8: unknown dtype");
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

template <typename M>
void write_tensor(const std::filesystem::path& path, const M& m) {
  write_bytes(path, encode(m));
}

inline AnyMatrix read_tensor(const std::filesystem::path& path) { return decode(read_bytes(path)); }

// Reads a tensor and insists on a particular element type.
template <typename T>
Matrix<T> read_as(const std::filesystem::path& path) {
  auto any = read_tensor(path);
  if (auto* m = std::get_if<Matrix<T>>(&any)) return std::move(*m);
  throw FormatError("QT8: unexpected dtype in " + path.string());
}

}  // namespace mixq::qt8
