#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include <Eigen/Dense>

#include "dopinf/binio.hpp"

namespace testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("dopinf-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

/// Random matrix with prescribed, well separated singular values.
inline Eigen::MatrixXd with_spectrum(Eigen::Index rows, const Eigen::VectorXd& sigma, std::uint64_t seed) {
  const Eigen::Index k = sigma.size();
  Eigen::HouseholderQR<Eigen::MatrixXd> ql(gaussian(rows, k, seed));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian(k, k, seed + 1));
  const Eigen::MatrixXd left = ql.householderQ() * Eigen::MatrixXd::Identity(rows, k);
  const Eigen::MatrixXd right = qr.householderQ() * Eigen::MatrixXd::Identity(k, k);
  return left * sigma.asDiagonal() * right.transpose();
}

inline Eigen::MatrixXd naive_gram(const Eigen::MatrixXd& q) {
  Eigen::MatrixXd d(q.cols(), q.cols());
  for (Eigen::Index a = 0; a < q.cols(); ++a)
    for (Eigen::Index b = 0; b < q.cols(); ++b) {
      long double s = 0.0L;
      for (Eigen::Index i = 0; i < q.rows(); ++i) s += static_cast<long double>(q(i, a)) * q(i, b);
      d(a, b) = static_cast<double>(s);
    }
  return d;
}

inline bool same_bytes(const std::filesystem::path& a, const std::filesystem::path& b) {
  return dopinf::read_file_bytes(a) == dopinf::read_file_bytes(b);
}

}  // namespace testing
