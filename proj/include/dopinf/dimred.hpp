#pragma once

// Method-of-snapshots dimensionality reduction over row-partitioned data:
// local Gram products, their global sum, the eigendecomposition of the
// n_t x n_t Gram matrix, and the reduced trajectory T_r^T D. The POD basis
// itself is never formed here.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dopinf/binio.hpp"
#include "dopinf/comm.hpp"
#include "dopinf/snapshot_store.hpp"

namespace dopinf {

/// Global bounds that fix the accumulation grid of the Gram kernel. Two
/// ranks holding the same row compute bit-identical contributions as long
/// as they share one GramScale.
struct GramScale {
  std::vector<double> col_max;   // max |Q(:, j)| over all ranks
  std::uint64_t total_rows = 0;  // rows summed over all ranks
};

GramScale local_gram_scale(const Matrix& block);
/// One max all-reduce and one sum all-reduce.
GramScale global_gram_scale(Communicator& comm, const Matrix& block);
GramScale global_gram_scale(Communicator& comm, GramScale local);

/// Partial Gram sums held as two exact fixed-grid folds. `high + low` is the
/// (once-rounded) Gram contribution of the block; folds from different
/// ranks add exactly, so the global sum does not depend on the partition.
struct LocalGram {
  Matrix high;
  Matrix low;

  Matrix value() const;
};

LocalGram local_gram(const Matrix& block, const GramScale& scale);

/// Q_i^T Q_i for a single block, on its own scale.
Matrix local_gram(const Matrix& block);

/// D = sum_j D_j on every rank (one all-reduce of the stacked folds).
Matrix global_gram(Communicator& comm, const LocalGram& local);

/// Convenience: scale reduction, local folds and their global sum.
Matrix global_gram(Communicator& comm, const Matrix& block);

struct ReductionFactors {
  Matrix gram;                 // D
  Vector eigenvalues;          // descending, clamped at zero below the rank threshold
  Matrix eigenvectors;         // columns u_k, largest-magnitude entry positive
  Vector singular_values;      // sqrt(eigenvalues)
  Vector energy;               // cumulative retained-energy ratios
  double clamp_threshold = 0;  // n_t * lambda_1 * 2^-52
  int numerical_rank = 0;
  int requested_r = 0;
  int r = 0;                   // effective r (may be below the request)
  bool truncated = false;      // request exceeded the numerical rank
  Matrix projection;           // T_r = U_r Lambda_r^{-1/2}, n_t x r

  Bytes to_bytes() const;
  static ReductionFactors from_bytes(std::span<const std::byte> data);
  void save(const std::filesystem::path& path) const;
  static ReductionFactors load(const std::filesystem::path& path);
};

ReductionFactors eig_factors(const Matrix& gram, int r_request);

/// Smallest r whose cumulative eigenvalue ratio reaches `energy` (0 < energy <= 1).
int choose_r_by_energy(std::span<const double> eigenvalues, double energy);
inline int choose_r_by_energy(const Vector& eigenvalues, double energy) {
  return choose_r_by_energy(std::span<const double>(eigenvalues.data(), static_cast<std::size_t>(eigenvalues.size())), energy);
}

/// Q_hat = T_r^T D (r x n_t).
Matrix reduced_trajectory(const Matrix& projection, const Matrix& gram);

/// Flips each column so that its largest-magnitude entry (first on ties) is positive.
void fix_column_signs(Matrix& columns);

}  // namespace dopinf
