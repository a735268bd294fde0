#pragma once

// Little-endian byte encoding helpers shared by the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mcmfh::bin {

class Writer {
 public:
  void bytes(std::string_view raw) { buf_.insert(buf_.end(), raw.begin(), raw.end()); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::vector<char>& buffer() const { return buf_; }
  // Writes to a temporary sibling then renames over `path`.
  void save(const std::filesystem::path& path) const;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> buf_;
};

// Throws on short reads via the supplied callback so each format can report
// its own error type.
class Reader {
 public:
  explicit Reader(std::vector<char> data) : data_(std::move(data)) {}

  bool has(std::size_t n) const { return data_.size() - pos_ >= n; }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::string bytes(std::size_t n);
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  std::uint64_t get(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

// Reads a whole file; throws DataError if it cannot be opened.
std::vector<char> read_file(const std::filesystem::path& path);

}  // namespace mcmfh::bin
