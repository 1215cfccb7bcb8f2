#include "dopinf/dimred.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include <Eigen/Eigenvalues>

#include "dopinf/error.hpp"

namespace dopinf {

// ---------------------------------------------------------------------------
// Gram products
//
// Every product q_ra * q_rb is deposited into two accumulators pre-biased by
// sigma = 1.5 * 2^e. The first fold rounds the product onto a fixed grid
// (ulp of sigma_1) and passes the exact remainder to the second fold, whose
// rounding is made tie-free by forcing the remainder's last mantissa bit.
// Both folds therefore hold exact sums of per-row quantities, and the result
// is independent of how rows are split across ranks or ordered.

namespace {

struct FoldGrid {
  int e_high = 0;
  int e_low = 0;
};

int ceil_log2(std::uint64_t n) { return n <= 1 ? 0 : static_cast<int>(std::bit_width(n - 1)); }

FoldGrid fold_grid(double bound, std::uint64_t total_rows) {
  int e = 0;
  std::frexp(bound, &e);  // bound < 2^e
  const int l = ceil_log2(total_rows);
  FoldGrid g;
  g.e_high = std::max(e + l + 2, -1022 + 51 - l);
  g.e_low = g.e_high - 51 + l;
  if (g.e_high > 1020) throw Error(Errc::invalid_argument, "snapshot magnitudes too large for Gram accumulation");
  return g;
}

inline double force_odd(double x) { return std::bit_cast<double>(std::bit_cast<std::uint64_t>(x) | std::uint64_t{1}); }

void check_scale(const GramScale& scale, Eigen::Index cols) {
  if (scale.col_max.size() != static_cast<std::size_t>(cols))
    throw Error(Errc::shape_mismatch, "Gram scale has " + std::to_string(scale.col_max.size()) + " columns, block " + std::to_string(cols));
  for (double m : scale.col_max)
    if (!std::isfinite(m)) throw Error(Errc::invalid_argument, "non-finite snapshot entries");
}

}  // namespace

GramScale local_gram_scale(const Matrix& block) {
  GramScale s;
  s.total_rows = static_cast<std::uint64_t>(block.rows());
  s.col_max.resize(static_cast<std::size_t>(block.cols()), 0.0);
  for (Eigen::Index c = 0; c < block.cols(); ++c)
    s.col_max[static_cast<std::size_t>(c)] = block.rows() == 0 ? 0.0 : block.col(c).cwiseAbs().maxCoeff();
  return s;
}

GramScale global_gram_scale(Communicator& comm, const Matrix& block) { return global_gram_scale(comm, local_gram_scale(block)); }

GramScale global_gram_scale(Communicator& comm, GramScale s) {
  s.col_max = comm.allreduce_max_vector(s.col_max);
  Matrix rows(1, 1);
  rows(0, 0) = static_cast<double>(s.total_rows);
  s.total_rows = static_cast<std::uint64_t>(comm.allreduce_sum_matrix(rows)(0, 0));
  return s;
}

Matrix LocalGram::value() const { return high + low; }

LocalGram local_gram(const Matrix& block, const GramScale& scale) {
  const Eigen::Index m = block.rows();
  const Eigen::Index n = block.cols();
  check_scale(scale, n);
  if (static_cast<std::uint64_t>(m) > scale.total_rows) throw Error(Errc::invalid_argument, "Gram scale covers fewer rows than the block");

  const auto nn = static_cast<std::size_t>(n);
  std::vector<double> bias_hi(nn * nn, 0.0), bias_lo(nn * nn, 0.0);
  for (std::size_t a = 0; a < nn; ++a) {
    for (std::size_t b = a; b < nn; ++b) {
      const auto g = fold_grid(scale.col_max[a] * scale.col_max[b], scale.total_rows);
      bias_hi[a * nn + b] = std::ldexp(1.5, g.e_high);
      bias_lo[a * nn + b] = std::ldexp(1.5, g.e_low);
    }
  }
  std::vector<double> acc_hi = bias_hi, acc_lo = bias_lo;

  constexpr Eigen::Index kTile = 32;
  std::vector<double> tile(static_cast<std::size_t>(kTile) * nn);
  for (Eigen::Index r0 = 0; r0 < m; r0 += kTile) {
    const Eigen::Index rows = std::min(kTile, m - r0);
    for (Eigen::Index c = 0; c < n; ++c) {
      const double* src = block.col(c).data() + r0;
      for (Eigen::Index rr = 0; rr < rows; ++rr) tile[static_cast<std::size_t>(rr) * nn + static_cast<std::size_t>(c)] = src[rr];
    }
    for (std::size_t a = 0; a < nn; ++a) {
      double* __restrict hi = acc_hi.data() + a * nn;
      double* __restrict lo = acc_lo.data() + a * nn;
      for (Eigen::Index rr = 0; rr < rows; ++rr) {
        const double* __restrict row = tile.data() + static_cast<std::size_t>(rr) * nn;
        const double qa = row[a];
        for (std::size_t b = a; b < nn; ++b) {
          const double x = qa * row[b];
          const double t = hi[b] + x;
          const double kept = t - hi[b];
          hi[b] = t;
          lo[b] += force_odd(x - kept);
        }
      }
    }
  }

  LocalGram g{Matrix(n, n), Matrix(n, n)};
  for (std::size_t a = 0; a < nn; ++a) {
    for (std::size_t b = a; b < nn; ++b) {
      const double h = acc_hi[a * nn + b] - bias_hi[a * nn + b];
      const double l = acc_lo[a * nn + b] - bias_lo[a * nn + b];
      const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
      g.high(ia, ib) = g.high(ib, ia) = h;
      g.low(ia, ib) = g.low(ib, ia) = l;
    }
  }
  return g;
}

Matrix local_gram(const Matrix& block) { return local_gram(block, local_gram_scale(block)).value(); }

Matrix global_gram(Communicator& comm, const LocalGram& local) {
  const Eigen::Index n = local.high.rows();
  Matrix stacked(2 * n, n);
  stacked.topRows(n) = local.high;
  stacked.bottomRows(n) = local.low;
  const Matrix sum = comm.allreduce_sum_matrix(stacked);
  return sum.topRows(n) + sum.bottomRows(n);
}

Matrix global_gram(Communicator& comm, const Matrix& block) {
  const GramScale scale = global_gram_scale(comm, block);
  return global_gram(comm, local_gram(block, scale));
}

// ---------------------------------------------------------------------------
// Eigenpairs

void fix_column_signs(Matrix& columns) {
  for (Eigen::Index k = 0; k < columns.cols(); ++k) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < columns.rows(); ++i) {
      const double v = std::abs(columns(i, k));
      if (v > best) {
        best = v;
        arg = i;
      }
    }
    if (columns.rows() > 0 && columns(arg, k) < 0.0) columns.col(k) = -columns.col(k);
  }
}

ReductionFactors eig_factors(const Matrix& gram, int r_request) {
  const Eigen::Index n = gram.rows();
  if (gram.cols() != n || n == 0) throw Error(Errc::shape_mismatch, "Gram matrix must be square and non-empty");
  if (r_request < 1 || r_request > n)
    throw Error(Errc::invalid_argument, "requested r=" + std::to_string(r_request) + " outside [1, " + std::to_string(n) + "]");
  const double norm = gram.norm();
  if (!std::isfinite(norm)) throw Error(Errc::invalid_argument, "Gram matrix has non-finite entries");
  if ((gram - gram.transpose()).norm() > 1e-12 * norm) throw Error(Errc::asymmetric_matrix, "Gram matrix is not symmetric");

  Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
  if (es.info() != Eigen::Success) throw Error(Errc::zero_spectrum, "symmetric eigensolver did not converge");

  ReductionFactors f;
  f.gram = gram;
  f.eigenvalues = es.eigenvalues().reverse();
  f.eigenvectors = es.eigenvectors().rowwise().reverse();
  fix_column_signs(f.eigenvectors);

  const double lambda1 = f.eigenvalues(0);
  if (!(lambda1 > 0.0)) throw Error(Errc::zero_spectrum, "Gram matrix has no positive eigenvalue");
  f.clamp_threshold = static_cast<double>(n) * lambda1 * std::ldexp(1.0, -52);
  f.numerical_rank = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (f.eigenvalues(k) <= f.clamp_threshold)
      f.eigenvalues(k) = 0.0;
    else
      ++f.numerical_rank;
  }
  f.singular_values = f.eigenvalues.cwiseSqrt();

  f.energy.resize(n);
  const double total = f.eigenvalues.sum();
  double cum = 0.0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cum += f.eigenvalues(k);
    f.energy(k) = cum / total;
  }

  f.requested_r = r_request;
  f.r = std::min(r_request, f.numerical_rank);
  f.truncated = f.r < r_request;
  f.projection = f.eigenvectors.leftCols(f.r);
  for (int k = 0; k < f.r; ++k) f.projection.col(k) /= f.singular_values(k);
  return f;
}

int choose_r_by_energy(std::span<const double> eigenvalues, double energy) {
  if (!(energy > 0.0 && energy <= 1.0)) throw Error(Errc::invalid_argument, "energy threshold must lie in (0, 1]");
  double total = 0.0;
  for (double l : eigenvalues) total += l;
  if (!(total > 0.0)) throw Error(Errc::zero_spectrum, "all eigenvalues are zero");
  double cum = 0.0;
  for (std::size_t k = 0; k < eigenvalues.size(); ++k) {
    cum += eigenvalues[k];
    if (cum / total >= energy) return static_cast<int>(k + 1);
  }
  return static_cast<int>(eigenvalues.size());
}

Matrix reduced_trajectory(const Matrix& projection, const Matrix& gram) {
  if (projection.rows() != gram.rows() || gram.rows() != gram.cols())
    throw Error(Errc::shape_mismatch, "projection factor and Gram matrix disagree on n_t");
  return projection.transpose() * gram;
}

// ---------------------------------------------------------------------------
// Sidecar

namespace {
constexpr char kFactorsMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'R', 'F'};
}

Bytes ReductionFactors::to_bytes() const {
  ByteWriter w;
  w.put_raw(std::string_view(kFactorsMagic, sizeof(kFactorsMagic)));
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(requested_r));
  w.put_u32(static_cast<std::uint32_t>(r));
  w.put_u32(static_cast<std::uint32_t>(numerical_rank));
  w.put_u32(truncated ? 1 : 0);
  w.put_f64(clamp_threshold);
  w.put_matrix(gram);
  w.put_vector(eigenvalues);
  w.put_matrix(eigenvectors);
  w.put_vector(singular_values);
  w.put_vector(energy);
  w.put_matrix(projection);
  return std::move(w).take();
}

ReductionFactors ReductionFactors::from_bytes(std::span<const std::byte> data) {
  ByteReader r(data);
  if (std::memcmp(r.get_raw(8).data(), kFactorsMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "not a reduction-factors sidecar");
  if (r.get_u32() != 1) throw Error(Errc::corrupt_dataset, "unsupported reduction-factors version");
  ReductionFactors f;
  f.requested_r = static_cast<int>(r.get_u32());
  f.r = static_cast<int>(r.get_u32());
  f.numerical_rank = static_cast<int>(r.get_u32());
  f.truncated = r.get_u32() != 0;
  f.clamp_threshold = r.get_f64();
  f.gram = r.get_matrix();
  f.eigenvalues = r.get_vector();
  f.eigenvectors = r.get_matrix();
  f.singular_values = r.get_vector();
  f.energy = r.get_vector();
  f.projection = r.get_matrix();
  if (!r.done()) throw Error(Errc::corrupt_dataset, "trailing bytes in reduction-factors sidecar");
  return f;
}

void ReductionFactors::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

ReductionFactors ReductionFactors::load(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw Error(Errc::missing_params, "no reduction-factors sidecar at " + path.string());
  return from_bytes(read_file_bytes(path));
}

}  // namespace dopinf
