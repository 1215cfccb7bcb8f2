#include "dopinf/snapshot_store.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "dopinf/binio.hpp"
#include "dopinf/error.hpp"

namespace dopinf {

namespace fs = std::filesystem;

DatasetHeader DatasetHeader::make(std::uint64_t n_rows, std::uint64_t n_cols, std::uint64_t n_vars) {
  DatasetHeader h;
  h.n_rows = n_rows;
  h.n_cols = n_cols;
  h.n_vars = n_vars;
  h.rows_per_var = n_vars == 0 ? 0 : n_rows / n_vars;
  h.validate();
  return h;
}

void DatasetHeader::validate() const {
  if (version != kFormatVersion) throw Error(Errc::corrupt_dataset, "unsupported format version " + std::to_string(version));
  if (scalar_kind != kScalarFloat64) throw Error(Errc::corrupt_dataset, "unknown scalar kind " + std::to_string(scalar_kind));
  if (layout != kLayoutVariableMajor) throw Error(Errc::corrupt_dataset, "unknown layout " + std::to_string(layout));
  if (n_vars == 0 || n_rows != n_vars * rows_per_var)
    throw Error(Errc::corrupt_dataset, "n_rows must equal n_vars * rows_per_var");
  if (n_cols == 0 || n_rows == 0) throw Error(Errc::corrupt_dataset, "empty dataset");
}

// ---------------------------------------------------------------------------
// Partition plans

namespace {

void balanced_split(std::uint64_t total, int p, std::vector<std::uint64_t>& counts, std::vector<std::uint64_t>& offsets) {
  const auto up = static_cast<std::uint64_t>(p);
  const std::uint64_t base = total / up;
  const std::uint64_t extra = total % up;
  counts.resize(up);
  offsets.resize(up);
  std::uint64_t off = 0;
  for (std::uint64_t i = 0; i < up; ++i) {
    counts[i] = base + (i < extra ? 1 : 0);
    offsets[i] = off;
    off += counts[i];
  }
}

}  // namespace

PartitionPlan plan_partition(std::uint64_t n_rows, int p, Alignment mode, std::uint64_t rows_per_var) {
  if (p < 1) throw Error(Errc::invalid_partition, "rank count must be at least 1");
  if (static_cast<std::uint64_t>(p) > n_rows)
    throw Error(Errc::invalid_partition, "rank count " + std::to_string(p) + " exceeds row count " + std::to_string(n_rows));

  PartitionPlan plan;
  plan.ranks = p;
  plan.mode = mode;
  plan.n_rows = n_rows;

  if (mode == Alignment::row_balanced) {
    plan.n_vars = 1;
    plan.rows_per_var = rows_per_var == 0 ? n_rows : rows_per_var;
    if (n_rows % plan.rows_per_var != 0) throw Error(Errc::invalid_partition, "rows_per_var does not divide n_rows");
    plan.n_vars = n_rows / plan.rows_per_var;
    balanced_split(n_rows, p, plan.row_counts, plan.row_offsets);
    return plan;
  }

  if (rows_per_var == 0 || n_rows % rows_per_var != 0)
    throw Error(Errc::invalid_partition, "variable-aligned mode needs rows_per_var dividing n_rows");
  plan.rows_per_var = rows_per_var;
  plan.n_vars = n_rows / rows_per_var;
  if (static_cast<std::uint64_t>(p) > rows_per_var)
    throw Error(Errc::invalid_partition, "rank count " + std::to_string(p) + " exceeds cell count " + std::to_string(rows_per_var));
  balanced_split(rows_per_var, p, plan.cell_counts, plan.cell_offsets);
  plan.row_counts.resize(plan.cell_counts.size());
  plan.row_offsets.resize(plan.cell_counts.size());
  for (std::size_t i = 0; i < plan.cell_counts.size(); ++i) {
    plan.row_counts[i] = plan.cell_counts[i] * plan.n_vars;
    plan.row_offsets[i] = plan.cell_offsets[i] * plan.n_vars;
  }
  return plan;
}

std::vector<RowRange> PartitionPlan::segments(int rank) const {
  if (rank < 0 || rank >= ranks) throw Error(Errc::invalid_argument, "rank out of range");
  const auto r = static_cast<std::size_t>(rank);
  if (mode == Alignment::row_balanced) return {RowRange{row_offsets[r], row_counts[r]}};
  std::vector<RowRange> out;
  out.reserve(n_vars);
  for (std::uint64_t v = 0; v < n_vars; ++v) out.push_back({v * rows_per_var + cell_offsets[r], cell_counts[r]});
  return out;
}

std::vector<VarCell> variable_map(const PartitionPlan& plan, int rank) {
  std::vector<VarCell> map;
  map.reserve(plan.row_counts.at(static_cast<std::size_t>(rank)));
  for (const auto& seg : plan.segments(rank)) {
    for (std::uint64_t g = seg.begin; g < seg.begin + seg.count; ++g)
      map.push_back({static_cast<std::uint32_t>(g / plan.rows_per_var), g % plan.rows_per_var});
  }
  return map;
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::uint64_t parse_key(const std::string& token, const std::string& key) {
  const std::string prefix = key + "=";
  if (token.rfind(prefix, 0) != 0) throw Error(Errc::corrupt_dataset, "manifest header missing " + key);
  try {
    return std::stoull(token.substr(prefix.size()));
  } catch (const std::exception&) {
    throw Error(Errc::corrupt_dataset, "manifest header has a malformed " + key);
  }
}

Bytes encode_shard_header(const DatasetHeader& h, std::uint64_t start_row, std::uint64_t row_count) {
  ByteWriter w;
  w.put_raw(std::string_view(kShardMagic, sizeof(kShardMagic)));
  w.put_u32(h.version);
  w.put_u32(h.scalar_kind);
  w.put_u32(h.layout);
  w.put_u32(static_cast<std::uint32_t>(h.n_vars));
  w.put_u64(h.n_rows);
  w.put_u64(h.n_cols);
  w.put_u64(h.rows_per_var);
  w.put_u64(start_row);
  w.put_u64(row_count);
  return std::move(w).take();
}

}  // namespace

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(Errc::corrupt_dataset, "empty manifest " + path.string());

  Manifest m;
  m.path = path;
  {
    std::istringstream ls(line);
    std::string tag, version, rows, cols, vars;
    ls >> tag >> version >> rows >> cols >> vars;
    if (tag != "dopinf-manifest" || version != "v1") throw Error(Errc::corrupt_dataset, "not a v1 manifest: " + path.string());
    m.header.n_rows = parse_key(rows, "n_rows");
    m.header.n_cols = parse_key(cols, "n_cols");
    m.header.n_vars = parse_key(vars, "n_vars");
    if (m.header.n_vars == 0) throw Error(Errc::corrupt_dataset, "n_vars must be positive");
    m.header.rows_per_var = m.header.n_rows / m.header.n_vars;
    m.header.validate();
  }

  std::uint64_t next_row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ShardEntry s;
    ls >> tag >> s.index >> s.file >> s.start_row >> s.row_count >> s.byte_length;
    if (!ls || tag != "shard") throw Error(Errc::corrupt_dataset, "malformed manifest line: " + line);
    if (s.index != m.shards.size() || s.start_row != next_row || s.row_count == 0)
      throw Error(Errc::corrupt_dataset, "shards do not tile the row range contiguously");
    next_row += s.row_count;
    m.shards.push_back(std::move(s));
  }
  if (next_row != m.header.n_rows) throw Error(Errc::corrupt_dataset, "shards cover " + std::to_string(next_row) + " of " + std::to_string(m.header.n_rows) + " rows");
  return m;
}

// ---------------------------------------------------------------------------
// Writing

Manifest write_dataset(const DatasetHeader& header, std::size_t shard_count, const fs::path& manifest_path,
                       const RowFill& fill) {
  header.validate();
  if (shard_count < 1) throw Error(Errc::invalid_argument, "shard_count must be at least 1");
  if (shard_count > header.n_rows) throw Error(Errc::invalid_argument, "more shards than rows");

  const fs::path dir = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(Errc::io, "cannot create " + dir.string() + ": " + ec.message());

  std::vector<std::uint64_t> counts, offsets;
  balanced_split(header.n_rows, static_cast<int>(shard_count), counts, offsets);

  Manifest m;
  m.path = manifest_path;
  m.header = header;
  const std::string stem = manifest_path.stem().string();
  for (std::size_t s = 0; s < shard_count; ++s) {
    char name[64];
    std::snprintf(name, sizeof(name), ".shard%04zu.bin", s);
    ShardEntry e{s, stem + name, offsets[s], counts[s], kShardHeaderBytes + counts[s] * header.n_cols * sizeof(double)};

    Matrix block(static_cast<Eigen::Index>(counts[s]), static_cast<Eigen::Index>(header.n_cols));
    fill(offsets[s], block);

    std::ofstream out(dir / e.file, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write shard " + (dir / e.file).string());
    auto head = encode_shard_header(header, e.start_row, e.row_count);
    out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
    if constexpr (std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size() * sizeof(double)));
    } else {
      ByteWriter payload;
      payload.put_doubles({block.data(), static_cast<std::size_t>(block.size())});
      out.write(reinterpret_cast<const char*>(payload.bytes().data()), static_cast<std::streamsize>(payload.bytes().size()));
    }
    if (!out) throw Error(Errc::io, "short write on shard " + e.file);
    m.shards.push_back(std::move(e));
  }

  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw Error(Errc::io, "cannot write manifest " + manifest_path.string());
  mf << "dopinf-manifest v1 n_rows=" << header.n_rows << " n_cols=" << header.n_cols << " n_vars=" << header.n_vars << "\n";
  for (const auto& e : m.shards)
    mf << "shard " << e.index << ' ' << e.file << ' ' << e.start_row << ' ' << e.row_count << ' ' << e.byte_length << "\n";
  if (!mf) throw Error(Errc::io, "short write on manifest " + manifest_path.string());
  return m;
}

Manifest write_dataset(const Matrix& matrix, const DatasetHeader& header, std::size_t shard_count,
                       const fs::path& manifest_path) {
  if (static_cast<std::uint64_t>(matrix.rows()) != header.n_rows || static_cast<std::uint64_t>(matrix.cols()) != header.n_cols)
    throw Error(Errc::shape_mismatch, "matrix is " + std::to_string(matrix.rows()) + "x" + std::to_string(matrix.cols()) +
                                          " but header says " + std::to_string(header.n_rows) + "x" + std::to_string(header.n_cols));
  return write_dataset(header, shard_count, manifest_path, [&](std::uint64_t start, Matrix& block) {
    block = matrix.middleRows(static_cast<Eigen::Index>(start), block.rows());
  });
}

// ---------------------------------------------------------------------------
// Reading

namespace {

class ShardReader {
 public:
  ShardReader(const Manifest& m, const ShardEntry& e) : entry_(e), n_cols_(m.header.n_cols) {
    const auto path = m.shard_path(e);
    std::error_code ec;
    if (!fs::exists(path, ec)) throw Error(Errc::io, "missing shard file " + path.string());
    auto size = fs::file_size(path, ec);
    if (ec) throw Error(Errc::io, "cannot stat " + path.string());
    const std::uint64_t expect = kShardHeaderBytes + e.row_count * n_cols_ * sizeof(double);
    if (size != e.byte_length || size != expect)
      throw Error(Errc::corrupt_dataset, "shard " + e.file + " has " + std::to_string(size) + " bytes, expected " + std::to_string(expect));
    in_.open(path, std::ios::binary);
    if (!in_) throw Error(Errc::io, "cannot open shard " + path.string());

    Bytes head(kShardHeaderBytes);
    in_.read(reinterpret_cast<char*>(head.data()), kShardHeaderBytes);
    if (!in_) throw Error(Errc::io, "short read on shard header " + e.file);
    ByteReader r(head);
    if (std::memcmp(r.get_raw(8).data(), kShardMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "bad magic in shard " + e.file);
    DatasetHeader h;
    h.version = r.get_u32();
    h.scalar_kind = r.get_u32();
    h.layout = r.get_u32();
    h.n_vars = r.get_u32();
    h.n_rows = r.get_u64();
    h.n_cols = r.get_u64();
    h.rows_per_var = r.get_u64();
    const auto start = r.get_u64();
    const auto count = r.get_u64();
    h.validate();
    const auto& mh = m.header;
    if (h.n_rows != mh.n_rows || h.n_cols != mh.n_cols || h.n_vars != mh.n_vars || start != e.start_row || count != e.row_count)
      throw Error(Errc::corrupt_dataset, "shard " + e.file + " header disagrees with manifest");
  }

  /// Copies shard-local rows [row, row + count) into dst rows starting at dst_row.
  void read_rows(std::uint64_t row, std::uint64_t count, Matrix& dst, Eigen::Index dst_row) {
    std::vector<double> column(count);
    for (std::uint64_t c = 0; c < n_cols_; ++c) {
      const auto off = kShardHeaderBytes + (c * entry_.row_count + row) * sizeof(double);
      in_.seekg(static_cast<std::streamoff>(off));
      Bytes raw(count * sizeof(double));
      in_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      if (!in_) throw Error(Errc::io, "short read on shard " + entry_.file);
      ByteReader(raw).get_doubles(column);
      dst.col(static_cast<Eigen::Index>(c)).segment(dst_row, static_cast<Eigen::Index>(count)) =
          Eigen::Map<const Vector>(column.data(), static_cast<Eigen::Index>(count));
    }
  }

 private:
  const ShardEntry& entry_;
  std::uint64_t n_cols_;
  std::ifstream in_;
};

}  // namespace

Matrix read_rows(const Manifest& manifest, const std::vector<RowRange>& segments) {
  std::uint64_t total = 0;
  for (const auto& s : segments) {
    if (s.begin + s.count > manifest.header.n_rows) throw Error(Errc::invalid_argument, "row range beyond dataset");
    total += s.count;
  }
  Matrix out(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(manifest.header.n_cols));
  Eigen::Index dst = 0;
  for (const auto& seg : segments) {
    std::uint64_t row = seg.begin;
    const std::uint64_t end = seg.begin + seg.count;
    for (const auto& shard : manifest.shards) {
      const std::uint64_t s0 = shard.start_row, s1 = shard.start_row + shard.row_count;
      if (s1 <= row || s0 >= end) continue;
      const std::uint64_t a = std::max(row, s0), b = std::min(end, s1);
      ShardReader reader(manifest, shard);
      reader.read_rows(a - s0, b - a, out, dst);
      dst += static_cast<Eigen::Index>(b - a);
      row = b;
      if (row == end) break;
    }
  }
  return out;
}

SnapshotPartition read_partition(const Manifest& manifest, const PartitionPlan& plan, int rank) {
  if (plan.n_rows != manifest.header.n_rows) throw Error(Errc::invalid_partition, "plan row count does not match the dataset");
  if (rank < 0 || rank >= plan.ranks) throw Error(Errc::invalid_partition, "rank " + std::to_string(rank) + " outside plan");
  if (plan.mode == Alignment::variable_aligned && (plan.rows_per_var != manifest.header.rows_per_var || plan.n_vars != manifest.header.n_vars))
    throw Error(Errc::invalid_partition, "variable-aligned plan does not match the dataset's variable layout");

  SnapshotPartition part;
  part.plan = plan;
  part.rank = rank;
  part.n_cols = manifest.header.n_cols;
  part.block = read_rows(manifest, plan.segments(rank));
  if (plan.mode == Alignment::row_balanced) {
    // Row-balanced plans carry the dataset's variable layout for the map.
    PartitionPlan labelled = plan;
    labelled.rows_per_var = manifest.header.rows_per_var;
    labelled.n_vars = manifest.header.n_vars;
    part.var_map = variable_map(labelled, rank);
  } else {
    part.var_map = variable_map(plan, rank);
  }
  return part;
}

}  // namespace dopinf
