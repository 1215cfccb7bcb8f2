#pragma once

// Operator Inference: regression data, Tikhonov-regularized least squares,
// and the distributed regularization grid search with the growth constraint.
//
// Quadratic terms use the compact symmetric self-product
//   w(q) = [q_0 q_0, q_0 q_1, ..., q_0 q_{r-1}, q_1 q_1, ..., q_{r-1} q_{r-1}]
// (pairs k <= l in row-major order, r(r+1)/2 entries). The data matrix has
// columns [q | w(q) | 1].

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dopinf/binio.hpp"
#include "dopinf/comm.hpp"
#include "dopinf/snapshot_store.hpp"

namespace dopinf {

enum class ModelForm : std::uint32_t { discrete = 0, continuous = 1 };

std::string_view form_name(ModelForm f) noexcept;
ModelForm parse_form(std::string_view name);

/// r(r+1)/2.
std::size_t quadratic_terms(int r);
/// r + r(r+1)/2 + 1.
std::size_t data_columns(int r);

void quadratic_features(std::span<const double> q, std::span<double> w);
Vector quadratic_features(const Vector& q);

/// Regression rows available for `n_t` snapshots in the given form.
std::uint64_t regression_rows(ModelForm form, std::uint64_t n_t);
/// Largest r with r + r(r+1)/2 + 1 <= regression_rows (0 if none).
int max_admissible_r(ModelForm form, std::uint64_t n_t);
/// Same bound with the full r^2 Kronecker product instead of the compact one.
int max_admissible_r_full_kronecker(ModelForm form, std::uint64_t n_t);

struct RomOperators {
  int r = 0;
  ModelForm form = ModelForm::discrete;
  double dt = 0.0;  // time step of the continuous form, 0 for discrete
  Vector c;         // r
  Matrix A;         // r x r
  Matrix Hc;        // r x r(r+1)/2
  double beta1 = 0.0;
  double beta2 = 0.0;

  /// A q + Hc w(q) + c.
  Vector apply(const Vector& q) const;
  /// Full r x r^2 operator acting on q (x) q; off-diagonal pairs are split evenly.
  Matrix full_quadratic() const;
  bool finite() const;

  Bytes to_bytes() const;
  static RomOperators from_bytes(std::span<const std::byte> data);
  void save(const std::filesystem::path& path) const;
  static RomOperators load(const std::filesystem::path& path);
};

struct RegressionData {
  ModelForm form = ModelForm::discrete;
  int r = 0;
  double dt = 0.0;
  Matrix D;    // rows x (r + r(r+1)/2 + 1)
  Matrix rhs;  // rows x r
};

/// Discrete: rows from columns 0..n_t-2, targets from columns 1..n_t-1.
/// Continuous: all n_t columns, targets are second-order finite differences.
RegressionData build_data_matrix(const Matrix& qhat, ModelForm form, double dt = 0.0);

enum class LsqSolver { cholesky, qr };

/// D^T D and D^T rhs, reused across regularization pairs.
struct NormalSystem {
  ModelForm form = ModelForm::discrete;
  int r = 0;
  double dt = 0.0;
  Matrix gram;
  Matrix cross;
};

NormalSystem normal_system(const RegressionData& data);
RomOperators solve_normal(const NormalSystem& sys, double beta1, double beta2);

/// Minimizes ||D O^T - rhs||^2 + beta1 (||A||^2 + ||c||^2) + beta2 ||Hc||^2.
RomOperators solve_regularized_lsq(const RegressionData& data, double beta1, double beta2,
                                   LsqSolver solver = LsqSolver::cholesky);

struct TrainingStats {
  Vector mean;     // per-mode temporal mean
  Vector max_dev;  // per-mode max |q_k(t) - mean_k|

  static TrainingStats of(const Matrix& qhat);
};

/// True iff every trial value is finite and, per mode, stays within
/// (1 + tau) times the training deviation of the training mean.
bool stability_check(const Matrix& trial, const TrainingStats& stats, double tau);

/// Log-spaced values from min to max inclusive (`count` == 1 gives {min}).
std::vector<double> log_grid(double min, double max, int count);

struct SearchOptions {
  ModelForm form = ModelForm::discrete;
  double dt = 0.0;
  double tau = 0.5;
  int trial_steps = 0;  // 0 = the training horizon
  LsqSolver solver = LsqSolver::cholesky;
  /// Replaces the solve for selected pairs (used to inject candidates).
  std::function<std::optional<RomOperators>(double beta1, double beta2)> candidate_override;
};

struct SearchRecord {
  double beta1 = 0.0;
  double beta2 = 0.0;
  double error = 0.0;      // +inf when infeasible
  double raw_error = 0.0;  // training MSE regardless of feasibility
  bool feasible = false;
  int rank = 0;
};

struct RegSearchOutcome {
  std::vector<double> beta1_grid;
  std::vector<double> beta2_grid;
  std::size_t pairs = 0;         // B
  std::size_t padded_pairs = 0;  // B rounded up to a multiple of p
  std::vector<SearchRecord> records;  // one per grid pair, row-major (beta1 outer)
  double beta1_opt = 0.0;
  double beta2_opt = 0.0;
  double error_opt = 0.0;
  int owner = 0;
  double tau = 0.0;
  int trial_steps = 0;

  /// CSV `beta1,beta2,error,feasible,rank`.
  void write_log(const std::filesystem::path& path) const;
};

/// Contiguous block [begin, end) of padded pair indices evaluated by `rank`.
std::pair<std::size_t, std::size_t> pair_block(std::size_t padded_pairs, int p, int rank);

struct SearchResult {
  RomOperators operators;
  RegSearchOutcome outcome;
};

/// Every rank evaluates its block of the grid; the winner is chosen by an
/// argmin all-reduce and its operators are broadcast from the owning rank.
SearchResult grid_search(Communicator& comm, const Matrix& qhat, const std::vector<double>& beta1,
                         const std::vector<double>& beta2, const SearchOptions& opts);

}  // namespace dopinf
