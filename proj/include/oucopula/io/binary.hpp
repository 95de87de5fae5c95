#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "oucopula/errors.hpp"

namespace oucopula::io {

/// Little-endian byte sink.
class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void text(std::string_view s) { bytes(s.data(), s.size()); }

  template <typename T>
  void put(T value) {
    static_assert(std::is_arithmetic_v<T>);
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes(raw.data(), raw.size());
  }

  const std::vector<unsigned char>& buffer() const { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw FormatError("failed writing '" + path + "'");
  }

 private:
  std::vector<unsigned char> buf_;
};

/// Little-endian byte source with offset-aware errors.
class ByteReader {
 public:
  explicit ByteReader(std::vector<unsigned char> data, std::string label = "input")
      : data_(std::move(data)), label_(std::move(label)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "' for reading");
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data), path);
  }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError(label_ + ": truncated at byte offset " + std::to_string(pos_) + " while reading " +
                        std::string(what) + " (need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) +
                        " left)");
    }
  }

  template <typename T>
  T get(std::string_view what) {
    need(sizeof(T), what);
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }

  std::string text(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(label_ + ": " + message + " at byte offset " + std::to_string(pos_));
  }

 private:
  std::vector<unsigned char> data_;
  std::string label_;
  std::size_t pos_ = 0;
};

}  // namespace oucopula::io
