#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "grafit/error.hpp"

namespace grafit::io {

static_assert(std::endian::native == std::endian::little,
              "binary file formats assume a little-endian host");

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw DataError("write failed");
}

template <typename T>
void write_pod(std::ostream& os, T value) {
  write_bytes(os, &value, sizeof(T));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline void write_f64s(std::ostream& os, const std::vector<double>& v) {
  write_bytes(os, v.data(), v.size() * sizeof(double));
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  void read_bytes(void* data, std::size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw DataError(path_ + ": truncated at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  template <typename T>
  T read_pod() {
    T value{};
    read_bytes(&value, sizeof(T));
    return value;
  }

  std::string read_string() {
    auto n = read_pod<std::uint32_t>();
    std::string s(n, '\0');
    read_bytes(s.data(), n);
    return s;
  }

  std::vector<double> read_f64s(std::size_t n) {
    std::vector<double> v(n);
    read_bytes(v.data(), n * sizeof(double));
    return v;
  }

  void expect_magic(const char magic[4]) {
    char got[4];
    read_bytes(got, 4);
    if (std::memcmp(got, magic, 4) != 0) {
      throw DataError(path_ + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
    }
  }

  bool at_eof() {
    return is_.peek() == std::char_traits<char>::eof();
  }

  [[nodiscard]] std::uint64_t offset() const { return offset_; }
  [[nodiscard]] const std::string& path() const { return path_; }

 private:
  std::istream& is_;
  std::string path_;
  std::uint64_t offset_ = 0;
};

inline std::ofstream open_output(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path);
  return is;
}

// Fixed CSV float formatting: 17 significant digits round-trips any double
// and keeps re-run outputs byte-identical.
inline std::string format_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace grafit::io
