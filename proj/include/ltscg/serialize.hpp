// Little-endian binary stream helpers for checkpoints.
#pragma once

#include "ltscg/autodiff.hpp"
#include "ltscg/errors.hpp"

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

namespace ltscg::io {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void put_matrix(const ad::Matrix& m) {
    put<std::int64_t>(m.rows());
    put<std::int64_t>(m.cols());
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }

  std::string get_string() {
    const auto size = get<std::uint64_t>();
    if (size > (1ULL << 32)) throw LoadError("checkpoint: implausible string length");
    std::string s(size, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(size));
    check();
    return s;
  }

  ad::Matrix get_matrix() {
    const auto rows = get<std::int64_t>();
    const auto cols = get<std::int64_t>();
    if (rows < 0 || cols < 0 || rows * cols > (1LL << 31)) throw LoadError("checkpoint: implausible matrix shape");
    ad::Matrix m(rows, cols);
    in_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    check();
    return m;
  }

 private:
  void check() {
    if (!in_) throw LoadError("checkpoint: unexpected end of file");
  }

  std::istream& in_;
};

}  // namespace ltscg::io
