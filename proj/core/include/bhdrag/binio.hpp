#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "bhdrag/error.hpp"

namespace bhdrag {

/// Little-endian binary writer for the BHDF/BHDX/BHDH container files.
class BinWriter {
 public:
  explicit BinWriter(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
  }

  void magic(const char tag[4]) { out_.write(tag, 4); }

  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }

  void bytes(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }

  void string16(const std::string& s) {
    if (s.size() > UINT16_MAX) {
      fail(ErrorCode::FormatError, "id longer than 65535 bytes in '" + path_.string() + "'");
    }
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  void finish() {
    out_.flush();
    if (!out_) fail(ErrorCode::IoError, "write failed on '" + path_.string() + "'");
  }

 private:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out_.write(buf, sizeof(T));
  }

  std::filesystem::path path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(ErrorCode::IoError, "cannot open '" + path.string() + "' for reading");
  }

  void expect_magic(const char tag[4]) {
    char buf[4];
    read(buf, 4);
    if (std::memcmp(buf, tag, 4) != 0) {
      fail(ErrorCode::FormatError,
           "bad magic in '" + path_.string() + "', expected " + std::string(tag, 4));
    }
  }

  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string string16() {
    const std::uint16_t n = u16();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  bool at_eof() {
    return in_.peek() == std::char_traits<char>::eof();
  }

 private:
  template <typename T>
  T get() {
    char buf[sizeof(T)];
    read(buf, sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(buf[i])) << (8 * i);
    }
    return v;
  }

  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail(ErrorCode::FormatError, "truncated file '" + path_.string() + "'");
    }
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace bhdrag
