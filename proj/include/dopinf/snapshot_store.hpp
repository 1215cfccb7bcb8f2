#pragma once

// On-disk snapshot container, partition plans, and per-rank block reads.
//
// A dataset is a text manifest plus `shard_count` binary shard files. Each
// shard holds a contiguous global row range, stored column-major as
// little-endian IEEE doubles behind a 64-byte header:
//
//   offset  size  field
//        0     8  magic "DOPINFSS"
//        8     4  format version (1)
//       12     4  scalar kind (1 = float64)
//       16     4  layout (1 = variable-major rows, column-major within shard)
//       20     4  n_vars
//       24     8  n_rows (global)
//       32     8  n_cols
//       40     8  rows_per_var
//       48     8  start_row of this shard
//       56     8  row_count of this shard
//
// Rows are variable-major: global row = var * rows_per_var + cell.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dopinf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr char kShardMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'S', 'S'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kScalarFloat64 = 1;
inline constexpr std::uint32_t kLayoutVariableMajor = 1;
inline constexpr std::size_t kShardHeaderBytes = 64;

struct DatasetHeader {
  std::uint32_t version = kFormatVersion;
  std::uint64_t n_rows = 0;
  std::uint64_t n_cols = 0;
  std::uint64_t n_vars = 1;
  std::uint64_t rows_per_var = 0;
  std::uint32_t scalar_kind = kScalarFloat64;
  std::uint32_t layout = kLayoutVariableMajor;

  static DatasetHeader make(std::uint64_t n_rows, std::uint64_t n_cols, std::uint64_t n_vars = 1);
  /// Throws corrupt_dataset when the invariants do not hold.
  void validate() const;
};

struct ShardEntry {
  std::size_t index = 0;
  std::string file;  // relative to the manifest directory
  std::uint64_t start_row = 0;
  std::uint64_t row_count = 0;
  std::uint64_t byte_length = 0;
};

struct Manifest {
  std::filesystem::path path;
  DatasetHeader header;
  std::vector<ShardEntry> shards;

  std::filesystem::path shard_path(const ShardEntry& s) const { return path.parent_path() / s.file; }
};

Manifest load_manifest(const std::filesystem::path& path);

enum class Alignment { row_balanced, variable_aligned };

struct RowRange {
  std::uint64_t begin = 0;
  std::uint64_t count = 0;
};

struct PartitionPlan {
  int ranks = 1;
  Alignment mode = Alignment::row_balanced;
  std::uint64_t n_rows = 0;
  std::uint64_t n_vars = 1;
  std::uint64_t rows_per_var = 0;
  std::vector<std::uint64_t> row_counts;
  /// Row-balanced: global starting row. Variable-aligned: starting row in the
  /// cell-major ordering (cell_offset * n_vars), so offsets stay increasing.
  std::vector<std::uint64_t> row_offsets;
  /// Variable-aligned only: contiguous cell range per rank.
  std::vector<std::uint64_t> cell_counts;
  std::vector<std::uint64_t> cell_offsets;

  /// Global row segments owned by `rank`, in local row order.
  std::vector<RowRange> segments(int rank) const;
};

/// Splits n_rows rows over p ranks. The remainder goes to the lowest ranks.
PartitionPlan plan_partition(std::uint64_t n_rows, int p, Alignment mode, std::uint64_t rows_per_var = 0);

struct VarCell {
  std::uint32_t var = 0;
  std::uint64_t cell = 0;
  friend bool operator==(const VarCell&, const VarCell&) = default;
};

struct SnapshotPartition {
  PartitionPlan plan;
  int rank = 0;
  std::uint64_t n_cols = 0;
  Matrix block;                  // n_i x n_t
  std::vector<VarCell> var_map;  // one entry per local row

  std::uint64_t local_rows() const { return static_cast<std::uint64_t>(block.rows()); }
};

/// Fills rows [start_row, start_row + block.rows()) of the global matrix.
using RowFill = std::function<void(std::uint64_t start_row, Matrix& block)>;

/// Writes a dataset without materializing it: `fill` is called once per shard.
Manifest write_dataset(const DatasetHeader& header, std::size_t shard_count,
                       const std::filesystem::path& manifest_path, const RowFill& fill);

Manifest write_dataset(const Matrix& matrix, const DatasetHeader& header, std::size_t shard_count,
                       const std::filesystem::path& manifest_path);

SnapshotPartition read_partition(const Manifest& manifest, const PartitionPlan& plan, int rank);

/// Reads a set of global rows in the given order (used for leading-row views).
Matrix read_rows(const Manifest& manifest, const std::vector<RowRange>& segments);

std::vector<VarCell> variable_map(const PartitionPlan& plan, int rank);

}  // namespace dopinf
