#pragma once

// Little-endian primitives for the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace floodlora::binio {

template <class U>
void write_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
bool read_le(std::istream& in, U& value) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return true;
}

inline void write_f64(std::ostream& out, std::span<const double> values) {
  for (double v : values) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

inline bool read_f64(std::istream& in, std::span<double> values) {
  for (double& v : values) {
    std::uint64_t bits = 0;
    if (!read_le(in, bits)) return false;
    v = std::bit_cast<double>(bits);
  }
  return true;
}

inline void write_f32(std::ostream& out, std::span<const float> values) {
  for (float v : values) write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

inline bool read_f32(std::istream& in, std::span<float> values) {
  for (float& v : values) {
    std::uint32_t bits = 0;
    if (!read_le(in, bits)) return false;
    v = std::bit_cast<float>(bits);
  }
  return true;
}

inline void write_blob(std::ostream& out, const std::string& text) {
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

inline bool read_blob(std::istream& in, std::string& text, std::uint64_t max_size = (1ULL << 32)) {
  std::uint64_t size = 0;
  if (!read_le(in, size) || size > max_size) return false;
  text.resize(size);
  return static_cast<bool>(in.read(text.data(), static_cast<std::streamsize>(size)));
}

}  // namespace floodlora::binio
