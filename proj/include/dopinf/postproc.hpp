#pragma once

// POD basis blocks on demand, reconstruction in original coordinates, error
// tables and probe extraction.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dopinf/comm.hpp"
#include "dopinf/snapshot_store.hpp"
#include "dopinf/transforms.hpp"

namespace dopinf {

struct BasisPartition {
  int rank = 0;
  Matrix block;                  // V_{r,i}: m_i x r
  std::vector<VarCell> var_map;  // layout of the rows

  int r() const { return static_cast<int>(block.cols()); }
};

/// V_{r,i} = Q_i T_r. Rows are computed independently of each other.
BasisPartition basis_partition(const SnapshotPartition& part, const Matrix& projection);

/// ||V_r^T V_r - I||_F for the vertically concatenated basis (one sum all-reduce).
double orthonormality_defect(Communicator& comm, const BasisPartition& basis);

/// V_{r,i} states followed by the inverse transforms.
Matrix reconstruct(const BasisPartition& basis, const Matrix& states, const TransformParams& params);

struct ErrorTable {
  std::vector<std::uint32_t> vars;  // variables present
  Matrix per_time;                  // vars x n_p relative errors
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> absolute;  // reference norm was zero
  Vector mean;                      // time average per variable

  /// Largest time-averaged error over variables.
  double worst_mean() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Per-variable, per-time ||approx - ref|| / ||ref|| over all ranks.
ErrorTable relative_error(Communicator& comm, const Matrix& approx, const Matrix& ref, const std::vector<VarCell>& var_map);

struct Probe {
  std::uint32_t var = 0;
  std::uint64_t cell = 0;
  friend bool operator==(const Probe&, const Probe&) = default;
};

/// "var:cell[,var:cell...]".
std::vector<Probe> parse_probes(const std::string& text);

struct ProbeTable {
  std::vector<Probe> probes;  // the probes owned by this rank
  Matrix series;              // n_p x probes.size()

  bool empty() const { return probes.empty(); }
  /// `t,v<var>c<cell>,...`; nothing is written for an empty table.
  void write_csv(const std::filesystem::path& path, const Vector& times) const;
};

/// Extracts the rows owned by this rank. Probes outside the global layout throw.
ProbeTable probe(const Matrix& block, const std::vector<VarCell>& var_map, const PartitionPlan& plan,
                 const std::vector<Probe>& probes);

}  // namespace dopinf
