#include "dopinf/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "dopinf/error.hpp"

namespace dopinf {

BasisPartition basis_partition(const SnapshotPartition& part, const Matrix& projection) {
  if (part.block.cols() != projection.rows())
    throw Error(Errc::shape_mismatch, "block has " + std::to_string(part.block.cols()) + " columns but the projection factor has " +
                                          std::to_string(projection.rows()) + " rows");
  BasisPartition b;
  b.rank = part.rank;
  b.block = part.block.lazyProduct(projection);
  b.var_map = part.var_map;
  return b;
}

double orthonormality_defect(Communicator& comm, const BasisPartition& basis) {
  const Matrix local = basis.block.transpose() * basis.block;
  const Matrix g = comm.allreduce_sum_matrix(local);
  return (g - Matrix::Identity(g.rows(), g.cols())).norm();
}

Matrix reconstruct(const BasisPartition& basis, const Matrix& states, const TransformParams& params) {
  if (basis.block.cols() != states.rows())
    throw Error(Errc::shape_mismatch, "basis has r=" + std::to_string(basis.block.cols()) + " but the trajectory has " +
                                          std::to_string(states.rows()) + " modes");
  const Matrix lifted = basis.block.lazyProduct(states);
  return inverse_transform(lifted, params);
}

// ---------------------------------------------------------------------------
// Errors

double ErrorTable::worst_mean() const { return mean.size() == 0 ? 0.0 : mean.maxCoeff(); }

void ErrorTable::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "t";
  for (auto v : vars) out << ",var" << v;
  out << '\n';
  for (Eigen::Index j = 0; j < per_time.cols(); ++j) {
    out << j;
    for (Eigen::Index i = 0; i < per_time.rows(); ++i) out << ',' << per_time(i, j);
    out << '\n';
  }
  out << "mean";
  for (Eigen::Index i = 0; i < mean.size(); ++i) out << ',' << mean(i);
  out << '\n';
}

ErrorTable relative_error(Communicator& comm, const Matrix& approx, const Matrix& ref, const std::vector<VarCell>& var_map) {
  if (approx.rows() != ref.rows() || approx.cols() != ref.cols())
    throw Error(Errc::shape_mismatch, "approximation and reference blocks differ in shape");
  if (var_map.size() < static_cast<std::size_t>(ref.rows())) throw Error(Errc::shape_mismatch, "variable map does not cover the block");

  std::uint32_t local_vars = 0;
  for (Eigen::Index i = 0; i < ref.rows(); ++i) local_vars = std::max(local_vars, var_map[static_cast<std::size_t>(i)].var + 1);
  const auto nv = static_cast<std::uint32_t>(comm.allreduce_max_vector(std::vector<double>{static_cast<double>(local_vars)})[0]);

  const Eigen::Index n_p = ref.cols();
  Matrix sums = Matrix::Zero(2 * static_cast<Eigen::Index>(nv), n_p);
  for (Eigen::Index i = 0; i < ref.rows(); ++i) {
    const auto v = static_cast<Eigen::Index>(var_map[static_cast<std::size_t>(i)].var);
    sums.row(v) += (approx.row(i) - ref.row(i)).cwiseAbs2();
    sums.row(nv + v) += ref.row(i).cwiseAbs2();
  }
  sums = comm.allreduce_sum_matrix(sums);

  ErrorTable t;
  t.per_time.resize(nv, n_p);
  t.absolute.resize(nv, n_p);
  t.mean = Vector::Zero(nv);
  for (std::uint32_t v = 0; v < nv; ++v) {
    t.vars.push_back(v);
    for (Eigen::Index j = 0; j < n_p; ++j) {
      const double diff = std::sqrt(sums(v, j));
      const double norm = std::sqrt(sums(nv + v, j));
      t.absolute(v, j) = norm == 0.0;
      t.per_time(v, j) = norm == 0.0 ? diff : diff / norm;
    }
    if (n_p > 0) t.mean(v) = t.per_time.row(v).mean();
  }
  return t;
}

// ---------------------------------------------------------------------------
// Probes

std::vector<Probe> parse_probes(const std::string& text) {
  std::vector<Probe> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      const auto var = std::stoul(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument(item);
      const auto cell = std::stoull(item.substr(colon + 1), &used);
      if (used != item.size() - colon - 1) throw std::invalid_argument(item);
      out.push_back({static_cast<std::uint32_t>(var), cell});
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "malformed probe '" + item + "' (expected var:cell)");
    }
  }
  return out;
}

ProbeTable probe(const Matrix& block, const std::vector<VarCell>& var_map, const PartitionPlan& plan,
                 const std::vector<Probe>& probes) {
  if (var_map.size() < static_cast<std::size_t>(block.rows())) throw Error(Errc::shape_mismatch, "variable map does not cover the block");
  std::map<std::pair<std::uint32_t, std::uint64_t>, Eigen::Index> where;
  for (Eigen::Index i = 0; i < block.rows(); ++i) where[{var_map[static_cast<std::size_t>(i)].var, var_map[static_cast<std::size_t>(i)].cell}] = i;

  ProbeTable t;
  std::vector<Eigen::Index> rows;
  for (const auto& pr : probes) {
    if (pr.var >= plan.n_vars || pr.cell >= plan.rows_per_var)
      throw Error(Errc::probe_out_of_range, "probe (" + std::to_string(pr.var) + ", " + std::to_string(pr.cell) + ") lies outside " +
                                                std::to_string(plan.n_vars) + " variables x " + std::to_string(plan.rows_per_var) + " cells");
    if (auto it = where.find({pr.var, pr.cell}); it != where.end()) {
      t.probes.push_back(pr);
      rows.push_back(it->second);
    }
  }
  t.series.resize(block.cols(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t k = 0; k < rows.size(); ++k) t.series.col(static_cast<Eigen::Index>(k)) = block.row(rows[k]).transpose();
  return t;
}

void ProbeTable::write_csv(const std::filesystem::path& path, const Vector& times) const {
  if (empty()) return;
  if (times.size() != series.rows()) throw Error(Errc::shape_mismatch, "probe times do not match the series length");
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << 't';
  for (const auto& pr : probes) out << ",v" << pr.var << 'c' << pr.cell;
  out << '\n';
  for (Eigen::Index j = 0; j < series.rows(); ++j) {
    out << times(j);
    for (Eigen::Index k = 0; k < series.cols(); ++k) out << ',' << series(j, k);
    out << '\n';
  }
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

}  // namespace dopinf
