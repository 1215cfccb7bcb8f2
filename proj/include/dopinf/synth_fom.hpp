#pragma once

// Desk-scale full-order data generators: an exact-subspace quadratic system
// with known reduced operators, a periodic viscous Burgers solver, and the
// serial thin-SVD reference used by the tests.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "dopinf/binio.hpp"
#include "dopinf/opinf_learn.hpp"
#include "dopinf/snapshot_store.hpp"

namespace dopinf {

struct SyntheticTruth {
  int r_star = 0;
  RomOperators operators;  // discrete form
  Matrix basis;            // n x r* (empty when not kept)
  Vector q0;
  Matrix trajectory;       // r* x n_t
  double dt = 1.0;
  std::uint64_t seed = 0;       // requested
  std::uint64_t used_seed = 0;  // after reseeding

  Bytes to_bytes() const;
  static SyntheticTruth from_bytes(std::span<const std::byte> data);
  void save(const std::filesystem::path& path) const;
  static SyntheticTruth load(const std::filesystem::path& path);
};

struct QuadraticGenOptions {
  std::uint64_t n = 0;
  int r_star = 0;
  std::uint64_t n_t = 0;
  std::uint64_t seed = 0;
  std::size_t shards = 1;
  bool keep_basis = true;
  int max_attempts = 10;
};

/// Draws stable discrete operators, rolls out r*-dimensional dynamics and
/// writes their embedding in a random orthonormal n x r* basis. Rows are
/// generated per shard, so the full matrix is never held in memory.
SyntheticTruth gen_subspace_quadratic(const std::filesystem::path& manifest_path, const QuadraticGenOptions& opts);

/// Random orthonormal n x r basis that can be materialized in row ranges.
/// Gaussian rows are drawn in fixed-size chunks and orthonormalized by two
/// streaming Cholesky-QR passes.
class EmbeddingBasis {
 public:
  EmbeddingBasis(std::uint64_t n, int r, std::uint64_t seed);

  Matrix rows(std::uint64_t start, std::uint64_t count) const;
  std::uint64_t n() const { return n_; }
  int r() const { return r_; }

 private:
  Matrix gaussian_rows(std::uint64_t start, std::uint64_t count) const;

  std::uint64_t n_;
  int r_;
  std::uint64_t seed_;
  Matrix r_inv_;  // upper-triangular R^{-1} of both passes combined
};

enum class BurgersIc { zero, sine, bump };
BurgersIc parse_burgers_ic(std::string_view name);

struct BurgersOptions {
  std::uint64_t n_x = 256;
  double viscosity = 0.01;
  std::uint64_t n_t = 100;  // saved snapshots, including the initial state
  double dt = 1e-4;
  std::uint64_t save_stride = 1;
  BurgersIc ic = BurgersIc::sine;
  std::size_t shards = 1;
};

/// Admissible time step for the diffusive and advective limits.
double burgers_max_dt(const BurgersOptions& opts);

/// Runs the solver and returns n_x x n_t saved snapshots.
Matrix simulate_burgers(const BurgersOptions& opts);

Manifest gen_burgers(const std::filesystem::path& manifest_path, const BurgersOptions& opts);

struct SerialPod {
  Matrix basis;     // V_r, m x r
  Matrix qhat;      // V_r^T Q, r x n_t
  Vector sigma;     // all singular values
  Matrix right;     // right singular vectors, sign-fixed
};

/// Thin SVD of the full matrix with the largest-entry-positive convention on
/// the right singular vectors.
SerialPod oracle_serial_pod(const Matrix& q, int r);

/// Reads the whole dataset on one rank, optionally centers and scales it.
SerialPod oracle_serial_pod(const Manifest& manifest, bool transform, int r, std::uint64_t train_cols = 0);

}  // namespace dopinf
