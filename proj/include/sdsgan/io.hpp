#pragma once

#include "sdsgan/core.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace sdsgan::io {

/// Little-endian byte buffer writer for checkpoint payloads.
class Writer {
 public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  template <typename T>
  void put_array(const T* data, std::size_t count) {
    put<std::uint64_t>(count);
    const auto* p = reinterpret_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + count * sizeof(T));
  }
  template <typename Derived>
  void put_matrix(const Eigen::DenseBase<Derived>& m) {
    using T = typename Derived::Scalar;
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    put<std::uint64_t>(static_cast<std::uint64_t>(rm.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(rm.cols()));
    const auto* p = reinterpret_cast<const std::uint8_t*>(rm.data());
    bytes_.insert(bytes_.end(), p, p + rm.size() * sizeof(T));
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  template <typename T>
  std::vector<T> get_array() {
    const auto n = get<std::uint64_t>();
    if (n > remaining() / sizeof(T)) throw CorruptionError("checkpoint array length exceeds payload");
    std::vector<T> out(n);
    std::memcpy(out.data(), take(n * sizeof(T)), n * sizeof(T));
    return out;
  }
  template <typename T>
  MatrixR<T> get_matrix() {
    const auto rows = get<std::uint64_t>();
    const auto cols = get<std::uint64_t>();
    if (cols != 0 && rows > remaining() / sizeof(T) / cols) throw CorruptionError("checkpoint matrix exceeds payload");
    MatrixR<T> m(static_cast<Index>(rows), static_cast<Index>(cols));
    std::memcpy(m.data(), take(rows * cols * sizeof(T)), rows * cols * sizeof(T));
    return m;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void expect_end() const {
    if (remaining() != 0) throw CorruptionError("trailing bytes in checkpoint payload");
  }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) throw CorruptionError("checkpoint payload truncated");
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32(const std::uint8_t* data, std::size_t size);

/// Container layout (little endian):
///   "SGCK" | u32 version | u32 kind length | kind bytes | u64 payload length | payload | u32 crc32(payload)
void write_container(const std::filesystem::path& path, std::string_view kind, std::uint32_t version,
                     const std::vector<std::uint8_t>& payload);
std::vector<std::uint8_t> read_container(const std::filesystem::path& path, std::string_view kind, std::uint32_t version);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

/// 8-bit RGB PNG; values are clamped to [0,1] and rounded.
std::vector<std::uint8_t> encode_png(const Image<float>& image);
Image<float> decode_png(const std::vector<std::uint8_t>& bytes);
void write_png(const std::filesystem::path& path, const Image<float>& image);
Image<float> read_png(const std::filesystem::path& path);

/// Single-channel map written as grey RGB.
Image<float> grey_to_rgb(const VectorX<float>& values, int height, int width);
/// Horizontal strip of equally sized images.
Image<float> hstack(const std::vector<Image<float>>& images);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace sdsgan::io
