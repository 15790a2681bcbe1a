#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace rrlab::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian and written with native byte order");

/// Malformed or truncated binary file; carries the byte offset of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

template <typename T>
void write_pod(std::ostream& os, const T& value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

/// Sequential reader that tracks its offset for error messages.
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <typename T>
  T pod(const char* field) {
    static_assert(std::is_trivially_copyable_v<T>);
    T value{};
    bytes(&value, sizeof(T), field);
    return value;
  }

  void bytes(void* dst, std::size_t count, const char* field) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(is_.gcount()) != count) {
      throw FormatError(std::string("truncated file while reading ") + field, offset_ + static_cast<std::uint64_t>(is_.gcount()));
    }
    offset_ += count;
  }

  bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace rrlab::io
