#pragma once

// Little-endian byte buffers shared by the sidecar files and the wire format.

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "dopinf/error.hpp"

namespace dopinf {

using Bytes = std::vector<std::byte>;

namespace detail {

template <class T>
T to_little(T v) noexcept {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto raw = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
    std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  } else {
    return v;
  }
}

}  // namespace detail

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    T le = detail::to_little(v);
    const auto* p = reinterpret_cast<const std::byte*>(&le);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }

  void put_u32(std::uint32_t v) { put(v); }
  void put_u64(std::uint64_t v) { put(v); }
  void put_f64(double v) { put(v); }

  void put_raw(std::string_view s) {
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    buf_.insert(buf_.end(), p, p + s.size());
  }

  void put_string(std::string_view s) {
    put_u64(s.size());
    put_raw(s);
  }

  void put_doubles(std::span<const double> xs) {
    if constexpr (std::endian::native == std::endian::little) {
      const auto* p = reinterpret_cast<const std::byte*>(xs.data());
      buf_.insert(buf_.end(), p, p + xs.size_bytes());
    } else {
      for (double x : xs) put_f64(x);
    }
  }

  /// Shape (rows, cols) followed by a row-major payload.
  void put_matrix(const Eigen::MatrixXd& m) {
    put_u64(static_cast<std::uint64_t>(m.rows()));
    put_u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(m(i, j));
  }

  void put_vector(const Eigen::VectorXd& v) {
    put_u64(static_cast<std::uint64_t>(v.size()));
    put_doubles({v.data(), static_cast<std::size_t>(v.size())});
  }

  const Bytes& bytes() const& { return buf_; }
  Bytes take() && { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  template <class T>
  T get() {
    static_assert(std::is_arithmetic_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return detail::to_little(v);
  }

  std::uint32_t get_u32() { return get<std::uint32_t>(); }
  std::uint64_t get_u64() { return get<std::uint64_t>(); }
  double get_f64() { return get<double>(); }

  std::string get_raw(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::string get_string() { return get_raw(checked_count(get_u64(), 1)); }

  void get_doubles(std::span<double> out) {
    need(out.size_bytes());
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (double& x : out) x = get_f64();
    }
  }

  Eigen::MatrixXd get_matrix() {
    auto rows = get_u64();
    auto cols = get_u64();
    checked_count(rows * cols, sizeof(double));
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get_f64();
    return m;
  }

  Eigen::VectorXd get_vector() {
    auto n = checked_count(get_u64(), sizeof(double));
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    get_doubles({v.data(), n});
    return v;
  }

  bool done() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(Errc::corrupt_dataset, "truncated binary payload");
  }
  std::size_t checked_count(std::uint64_t n, std::size_t elem) const {
    if (n > remaining() / elem) throw Error(Errc::corrupt_dataset, "implausible element count in binary payload");
    return static_cast<std::size_t>(n);
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

Bytes read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> data);

}  // namespace dopinf
