// SPDX-License-Identifier: Apache-2.0
#pragma once

// Little-endian readers/writers shared by the PMTP, PMTT and PMTC formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "pmtmae/errors.hpp"

namespace pmt::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(std::string_view s) { buf_.append(s.data(), s.size()); }
  void magic(std::string_view m) { bytes(m); }
  void floats(const float* data, std::size_t n) {
    buf_.append(reinterpret_cast<const char*>(data), n * sizeof(float));
  }
  const std::string& buffer() const { return buf_; }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

// Bounds-checked cursor over an in-memory file image. Truncation raises a
// Format error naming the expected and available byte counts.
class Reader {
 public:
  Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      fail(ErrorKind::Format, what_ + ": truncated at byte " + std::to_string(pos_) + ", expected " +
                                  std::to_string(pos_ + n) + " bytes but file has " +
                                  std::to_string(data_.size()));
    }
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* out, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(out, data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  void expect_magic(std::string_view magic) {
    if (data_.size() - pos_ < magic.size() || data_.substr(pos_, magic.size()) != magic) {
      fail(ErrorKind::Format, what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    }
    pos_ += magic.size();
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }
  const std::string& what() const { return what_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace pmt::binio
