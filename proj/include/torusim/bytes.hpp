#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace torusim {

/// Little helpers for the fixed-layout messages carried in packet payloads.
class ByteWriter {
 public:
  template <typename T>
  ByteWriter& put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto n = buf_.size();
    buf_.resize(n + sizeof(T));
    std::memcpy(buf_.data() + n, &v, sizeof(T));
    return *this;
  }
  ByteWriter& bytes(std::span<const std::uint8_t> b) {
    put(static_cast<std::uint32_t>(b.size()));
    buf_.insert(buf_.end(), b.begin(), b.end());
    return *this;
  }
  ByteWriter& str(const std::string& s) {
    return bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }
  std::vector<std::uint8_t>& data() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}
  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::vector<std::uint8_t> bytes() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::vector<std::uint8_t> out(b_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::string str() {
    auto b = bytes();
    return std::string(b.begin(), b.end());
  }
  std::span<const std::uint8_t> rest() const { return b_.subspan(pos_); }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw std::runtime_error("truncated message");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace torusim
