#include "dopinf/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dopinf/error.hpp"

namespace dopinf {

namespace {
constexpr char kParamsMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'T', 'P'};
}

LiftSpec LiftSpec::parse(const std::string& text) {
  if (text.empty() || text == "identity") return {};
  const std::string prefix = "reciprocal:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      const auto var = std::stoul(text.substr(prefix.size()));
      return {Kind::reciprocal, static_cast<std::uint32_t>(var)};
    } catch (const std::exception&) {
    }
  }
  throw Error(Errc::invalid_argument, "unknown lifting spec '" + text + "' (expected identity or reciprocal:<var>)");
}

std::string LiftSpec::str() const {
  return kind == Kind::identity ? "identity" : "reciprocal:" + std::to_string(source_var);
}

std::uint32_t state_variable_count(const SnapshotPartition& part) {
  std::uint32_t vars = static_cast<std::uint32_t>(part.plan.n_vars);
  for (const auto& vc : part.var_map) vars = std::max(vars, vc.var + 1);
  return vars;
}

SnapshotPartition lift(SnapshotPartition part, const LiftSpec& spec) {
  if (spec.kind == LiftSpec::Kind::identity) return part;

  const auto vars = state_variable_count(part);
  if (spec.source_var >= vars)
    throw Error(Errc::invalid_argument, "lifting references variable " + std::to_string(spec.source_var) + " but only " +
                                            std::to_string(vars) + " exist");
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < part.var_map.size(); ++i)
    if (part.var_map[i].var == spec.source_var) rows.push_back(static_cast<Eigen::Index>(i));

  const Eigen::Index base = part.block.rows();
  Matrix extra(static_cast<Eigen::Index>(rows.size()), part.block.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Eigen::Index src = rows[k];
    for (Eigen::Index c = 0; c < part.block.cols(); ++c) {
      const double x = part.block(src, c);
      if (x == 0.0)
        throw Error(Errc::singular_lift, "reciprocal of variable " + std::to_string(spec.source_var) + " is undefined at cell " +
                                             std::to_string(part.var_map[static_cast<std::size_t>(src)].cell) + ", time index " +
                                             std::to_string(c));
      extra(static_cast<Eigen::Index>(k), c) = 1.0 / x;
    }
  }
  for (Eigen::Index src : rows) part.var_map.push_back({vars, part.var_map[static_cast<std::size_t>(src)].cell});
  part.block.conservativeResize(base + extra.rows(), Eigen::NoChange);
  part.block.bottomRows(extra.rows()) = extra;
  return part;
}

CenterScaleResult center_scale(SnapshotPartition part, Communicator& comm, const LiftSpec& lift_spec,
                               std::uint64_t source_rows) {
  const Eigen::Index rows = part.block.rows();
  const Eigen::Index cols = part.block.cols();
  if (static_cast<std::size_t>(rows) != part.var_map.size())
    throw Error(Errc::shape_mismatch, "variable map does not cover the block");
  if (cols == 0) throw Error(Errc::invalid_argument, "cannot center a block without columns");

  CenterScaleResult res;
  auto& p = res.params;
  p.lift = lift_spec;
  p.source_rows = source_rows == 0 ? static_cast<std::uint64_t>(rows) : source_rows;
  p.source_vars = static_cast<std::uint32_t>(part.plan.n_vars);
  p.state_vars = state_variable_count(part);
  p.var_map = part.var_map;
  if (lift_spec.kind != LiftSpec::Kind::identity) p.stages.push_back(TransformStage::lift);
  p.stages.push_back(TransformStage::center);
  p.stages.push_back(TransformStage::scale);

  res.partition = std::move(part);
  Matrix& q = res.partition.block;
  // Fixed column order per row keeps the result independent of the partition.
  p.means = Vector::Zero(rows);
  for (Eigen::Index c = 0; c < cols; ++c) p.means += q.col(c);
  p.means /= static_cast<double>(cols);
  for (Eigen::Index c = 0; c < cols; ++c) q.col(c) -= p.means;

  std::vector<double> local_max(p.state_vars, 0.0);
  const Vector row_max = q.cwiseAbs().rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < rows; ++i) {
    auto& m = local_max[p.var_map[static_cast<std::size_t>(i)].var];
    m = std::max(m, row_max(i));
  }
  const auto global_max = comm.allreduce_max_vector(local_max);

  p.scales.resize(p.state_vars);
  for (std::uint32_t v = 0; v < p.state_vars; ++v) {
    if (!(global_max[v] > 0.0) || !std::isfinite(global_max[v]))
      throw Error(Errc::degenerate_variable, "variable " + std::to_string(v) + " is constant in time at every cell (max-abs " +
                                                 std::to_string(global_max[v]) + ")");
    p.scales[v] = global_max[v];
  }
  Vector row_scale(rows);
  for (Eigen::Index i = 0; i < rows; ++i) row_scale(i) = p.scales[p.var_map[static_cast<std::size_t>(i)].var];
  for (Eigen::Index c = 0; c < cols; ++c) q.col(c).array() /= row_scale.array();
  return res;
}

TransformParams TransformParams::identity(const SnapshotPartition& part) {
  TransformParams p;
  p.source_rows = part.local_rows();
  p.source_vars = static_cast<std::uint32_t>(part.plan.n_vars);
  p.state_vars = state_variable_count(part);
  p.means = Vector::Zero(part.block.rows());
  p.scales = Vector::Ones(p.state_vars);
  p.var_map = part.var_map;
  return p;
}

SnapshotPartition apply_transform(SnapshotPartition part, const TransformParams& params) {
  if (part.local_rows() != params.source_rows) throw Error(Errc::shape_mismatch, "partition does not match the stored transform layout");
  part = lift(std::move(part), params.lift);
  if (part.var_map != params.var_map || params.means.size() != part.block.rows())
    throw Error(Errc::shape_mismatch, "partition does not match the stored transform layout");
  Matrix& q = part.block;
  for (Eigen::Index c = 0; c < q.cols(); ++c) q.col(c) -= params.means;
  Vector row_scale(q.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i) row_scale(i) = params.scales[params.var_map[static_cast<std::size_t>(i)].var];
  for (Eigen::Index c = 0; c < q.cols(); ++c) q.col(c).array() /= row_scale.array();
  return part;
}

Matrix inverse_transform(const Matrix& block, const TransformParams& params) {
  if (static_cast<std::size_t>(block.rows()) != params.var_map.size() || params.means.size() != block.rows())
    throw Error(Errc::shape_mismatch, "block has " + std::to_string(block.rows()) + " rows but the transform describes " +
                                          std::to_string(params.var_map.size()));
  if (params.source_rows > static_cast<std::uint64_t>(block.rows()))
    throw Error(Errc::shape_mismatch, "transform records more source rows than the block holds");
  Matrix out = block.topRows(static_cast<Eigen::Index>(params.source_rows));
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double s = params.scales[params.var_map[static_cast<std::size_t>(i)].var];
    const double mu = params.means[i];
    for (Eigen::Index c = 0; c < out.cols(); ++c) out(i, c) = out(i, c) * s + mu;
  }
  return out;
}

Bytes TransformParams::to_bytes() const {
  ByteWriter w;
  w.put_raw(std::string_view(kParamsMagic, sizeof(kParamsMagic)));
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(lift.kind));
  w.put_u32(lift.source_var);
  w.put_u32(static_cast<std::uint32_t>(stages.size()));
  for (auto s : stages) w.put_u32(static_cast<std::uint32_t>(s));
  w.put_u64(source_rows);
  w.put_u32(source_vars);
  w.put_u32(state_vars);
  w.put_vector(means);
  w.put_vector(scales);
  w.put_u64(var_map.size());
  for (const auto& vc : var_map) {
    w.put_u32(vc.var);
    w.put_u64(vc.cell);
  }
  return std::move(w).take();
}

TransformParams TransformParams::from_bytes(std::span<const std::byte> data) {
  ByteReader r(data);
  if (std::memcmp(r.get_raw(8).data(), kParamsMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "not a transform sidecar");
  if (r.get_u32() != 1) throw Error(Errc::corrupt_dataset, "unsupported transform sidecar version");
  TransformParams p;
  p.lift.kind = static_cast<LiftSpec::Kind>(r.get_u32());
  p.lift.source_var = r.get_u32();
  const auto n_stages = r.get_u32();
  for (std::uint32_t i = 0; i < n_stages; ++i) p.stages.push_back(static_cast<TransformStage>(r.get_u32()));
  p.source_rows = r.get_u64();
  p.source_vars = r.get_u32();
  p.state_vars = r.get_u32();
  p.means = r.get_vector();
  p.scales = r.get_vector();
  const auto n_map = r.get_u64();
  if (n_map != static_cast<std::uint64_t>(p.means.size())) throw Error(Errc::corrupt_dataset, "transform sidecar is inconsistent");
  p.var_map.resize(n_map);
  for (auto& vc : p.var_map) {
    vc.var = r.get_u32();
    vc.cell = r.get_u64();
  }
  if (!r.done()) throw Error(Errc::corrupt_dataset, "trailing bytes in transform sidecar");
  return p;
}

void TransformParams::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

TransformParams TransformParams::load(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw Error(Errc::missing_params, "no transform sidecar at " + path.string());
  return from_bytes(read_file_bytes(path));
}

}  // namespace dopinf
