#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace divpatch {

// Malformed or truncated file. Messages carry the byte offset of the fault.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Whole-file reader with explicit byte order and offset-tagged errors.
class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : path_(path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError(path + ": cannot open file");
    f.seekg(0, std::ios::end);
    buf_.resize(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  }

  size_t offset() const { return pos_; }
  size_t size() const { return buf_.size(); }
  bool at_end() const { return pos_ == buf_.size(); }

  void read_bytes(void* dst, size_t len) {
    if (pos_ + len > buf_.size())
      throw ParseError(path_ + ": truncated, needed " + std::to_string(len) +
                       " bytes at byte offset " + std::to_string(pos_));
    std::memcpy(dst, buf_.data() + pos_, len);
    pos_ += len;
  }

  uint8_t u8() {
    uint8_t v;
    read_bytes(&v, 1);
    return v;
  }

  uint32_t u32_le() {
    uint8_t b[4];
    read_bytes(b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }

  uint32_t u32_be() {
    uint8_t b[4];
    read_bytes(b, 4);
    return static_cast<uint32_t>(b[3]) | (static_cast<uint32_t>(b[2]) << 8) |
           (static_cast<uint32_t>(b[1]) << 16) | (static_cast<uint32_t>(b[0]) << 24);
  }

  float f32_le() {
    uint32_t u = u32_le();
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }

  void expect_magic(const char* magic, const char* what) {
    size_t at = pos_;
    char got[8] = {};
    size_t len = std::strlen(magic);
    read_bytes(got, len);
    if (std::memcmp(got, magic, len) != 0)
      throw ParseError(path_ + ": bad " + what + " magic at byte offset " + std::to_string(at));
  }

  // NUL-terminated string.
  std::string cstring() {
    size_t end = pos_;
    while (end < buf_.size() && buf_[end] != 0) ++end;
    if (end == buf_.size())
      throw ParseError(path_ + ": unterminated string at byte offset " + std::to_string(pos_));
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), end - pos_);
    pos_ = end + 1;
    return s;
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
};

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : path_(path), f_(path, std::ios::binary) {
    if (!f_) throw std::runtime_error(path + ": cannot open file for writing");
  }

  void bytes(const void* src, size_t len) {
    f_.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(len));
  }

  void u32_le(uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                    static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
    bytes(b, 4);
  }

  void f32_le(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    u32_le(u);
  }

  void close() {
    f_.close();
    if (!f_) throw std::runtime_error(path_ + ": write failed");
  }

 private:
  std::string path_;
  std::ofstream f_;
};

}  // namespace divpatch
