#pragma once

// Per-rank lifting, centering and scaling of snapshot blocks, and their
// inverses. Centering needs whole variables per cell on a rank (a
// variable-aligned plan); scaling needs one max all-reduce.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dopinf/binio.hpp"
#include "dopinf/comm.hpp"
#include "dopinf/snapshot_store.hpp"

namespace dopinf {

struct LiftSpec {
  enum class Kind : std::uint32_t { identity = 0, reciprocal = 1 };
  Kind kind = Kind::identity;
  std::uint32_t source_var = 0;  // reciprocal only

  /// "identity" or "reciprocal:<var>".
  static LiftSpec parse(const std::string& text);
  std::string str() const;
};

enum class TransformStage : std::uint32_t { lift = 1, center = 2, scale = 3 };

struct TransformParams {
  LiftSpec lift;
  std::vector<TransformStage> stages;  // in application order
  std::uint64_t source_rows = 0;       // n_i before lifting
  std::uint32_t source_vars = 0;       // n_s
  std::uint32_t state_vars = 0;        // m_s
  Vector means;                        // one per local (lifted) row
  Vector scales;                       // one per lifted variable
  std::vector<VarCell> var_map;        // lifted layout

  /// No-op parameters for an untransformed partition.
  static TransformParams identity(const SnapshotPartition& part);

  Bytes to_bytes() const;
  static TransformParams from_bytes(std::span<const std::byte> data);
  void save(const std::filesystem::path& path) const;
  static TransformParams load(const std::filesystem::path& path);
};

/// Appends auxiliary variables. Reciprocal adds 1/x rows for `source_var`.
SnapshotPartition lift(SnapshotPartition part, const LiftSpec& spec);

struct CenterScaleResult {
  SnapshotPartition partition;
  TransformParams params;
};

/// Centers every row by its temporal mean, then scales each variable by the
/// global max-abs of its centered values (one max all-reduce).
/// `lift_spec` and `source_rows` only annotate the returned params.
CenterScaleResult center_scale(SnapshotPartition part, Communicator& comm, const LiftSpec& lift_spec = {},
                               std::uint64_t source_rows = 0);

/// Re-applies stored parameters to a freshly read partition with the same layout.
SnapshotPartition apply_transform(SnapshotPartition part, const TransformParams& params);

/// Undoes scaling and centering, then drops auxiliary lifted rows.
Matrix inverse_transform(const Matrix& block, const TransformParams& params);

/// Number of variables present in a partition (after any lifting).
std::uint32_t state_variable_count(const SnapshotPartition& part);

}  // namespace dopinf
