#pragma once

// Little-endian readers/writers shared by the binary weight and codebook
// formats. Values are encoded byte by byte so files are portable.

#include <array>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "fvla/error.hpp"

namespace fvla::binio {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline void write_f32s(std::ostream& os, std::span<const float> values) {
  for (float v : values) write_f32(os, v);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline std::uint32_t read_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw Error(ErrorCode::FormatError, "unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline float read_f32(std::istream& is) {
  const std::uint32_t bits = read_u32(is);
  float v = 0.0f;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void read_f32s(std::istream& is, std::span<float> out) {
  for (float& v : out) v = read_f32(is);
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!is || got != magic)
    throw Error(ErrorCode::FormatError, "bad magic, expected " + std::string(magic));
}

inline void expect_eof(std::istream& is) {
  if (is.peek() != std::char_traits<char>::eof())
    throw Error(ErrorCode::FormatError, "trailing bytes after payload");
}

}  // namespace fvla::binio
