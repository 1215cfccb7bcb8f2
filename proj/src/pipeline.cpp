#include "dopinf/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>

#include <json.hpp>

#include "dopinf/error.hpp"

namespace dopinf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::filesystem::path ranked(const std::filesystem::path& dir, const char* stem, const char* ext, int rank) {
  char name[96];
  std::snprintf(name, sizeof(name), "%s.rank%04d.%s", stem, rank, ext);
  return dir / name;
}

/// Wall time of a barrier-fenced phase, split into local work and collectives.
class PhaseClock {
 public:
  explicit PhaseClock(Communicator& comm) : comm_(comm) {}

  void start() {
    comm_.barrier();
    t0_ = Clock::now();
    c0_ = comm_.comm_seconds();
  }

  /// Returns (work, comm) seconds since start().
  std::pair<double, double> stop() {
    comm_.barrier();
    const double wall = seconds_since(t0_);
    const double in_comm = comm_.comm_seconds() - c0_;
    return {std::max(0.0, wall - in_comm), in_comm};
  }

 private:
  Communicator& comm_;
  Clock::time_point t0_;
  double c0_ = 0.0;
};

/// Calls `visit` on consecutive row chunks of the rank's training block.
void for_each_chunk(const Manifest& manifest, const std::vector<RowRange>& segments, std::uint64_t chunk_rows, Eigen::Index train,
                    double& read_seconds, const std::function<void(const Matrix&)>& visit) {
  for (const auto& seg : segments) {
    for (std::uint64_t off = 0; off < seg.count; off += chunk_rows) {
      const auto t0 = Clock::now();
      Matrix chunk = read_rows(manifest, {{seg.begin + off, std::min(chunk_rows, seg.count - off)}});
      if (chunk.cols() > train) chunk.conservativeResize(Eigen::NoChange, train);
      read_seconds += seconds_since(t0);
      visit(chunk);
    }
  }
}

/// Two passes over the disk: the global column scale, then the exact folds.
Matrix streamed_gram(Communicator& comm, const Manifest& manifest, const PartitionPlan& plan, std::uint64_t chunk_rows,
                     Eigen::Index train, double& read_seconds) {
  const auto segments = plan.segments(comm.rank());
  GramScale local;
  local.col_max.assign(static_cast<std::size_t>(train), 0.0);
  for_each_chunk(manifest, segments, chunk_rows, train, read_seconds, [&](const Matrix& chunk) {
    const GramScale s = local_gram_scale(chunk);
    local.total_rows += s.total_rows;
    for (std::size_t c = 0; c < s.col_max.size(); ++c) local.col_max[c] = std::max(local.col_max[c], s.col_max[c]);
  });
  const GramScale scale = global_gram_scale(comm, local);

  LocalGram folds{Matrix::Zero(train, train), Matrix::Zero(train, train)};
  for_each_chunk(manifest, segments, chunk_rows, train, read_seconds, [&](const Matrix& chunk) {
    const LocalGram g = local_gram(chunk, scale);
    folds.high += g.high;
    folds.low += g.low;
  });
  return global_gram(comm, folds);
}

}  // namespace

std::filesystem::path RunFiles::transform(int rank) const { return ranked(dir, "transform", "bin", rank); }
std::filesystem::path RunFiles::reconstruction(int rank) const { return ranked(dir, "reconstruction", "bin", rank); }
std::filesystem::path RunFiles::probes(int rank) const { return ranked(dir, "probes", "csv", rank); }

SnapshotPartition load_partition(const Manifest& manifest, int p, int rank, bool variable_aligned, std::uint64_t row_limit) {
  const auto& h = manifest.header;
  if (row_limit == 0 || row_limit >= h.n_rows) {
    const auto mode = variable_aligned ? Alignment::variable_aligned : Alignment::row_balanced;
    return read_partition(manifest, plan_partition(h.n_rows, p, mode, h.rows_per_var), rank);
  }
  if (h.n_vars != 1) throw Error(Errc::invalid_argument, "leading-row truncation needs a single-variable dataset");
  SnapshotPartition part;
  part.plan = plan_partition(row_limit, p, Alignment::row_balanced, row_limit);
  part.rank = rank;
  part.n_cols = h.n_cols;
  part.block = read_rows(manifest, part.plan.segments(rank));
  part.var_map = variable_map(part.plan, rank);
  return part;
}

namespace {

std::uint64_t training_columns(const TrainConfig& cfg, std::uint64_t n_cols) {
  const std::uint64_t train = cfg.train_cols == 0 ? n_cols : cfg.train_cols;
  if (train < 2 || train > n_cols)
    throw Error(Errc::invalid_argument, "training columns must lie in [2, " + std::to_string(n_cols) + "], got " + std::to_string(train));
  return train;
}

/// Basis selection, projection and the regularization search; the phase
/// clock is running on entry.
void reduce_and_learn(Communicator& comm, const TrainConfig& cfg, const Matrix& gram, TrainResult& res, PhaseClock& phase) {
  int r = cfg.r;
  if (cfg.energy > 0.0) {
    const auto probe = eig_factors(gram, 1);
    r = choose_r_by_energy(probe.eigenvalues, cfg.energy);
  }
  res.factors = eig_factors(gram, r);
  res.qhat = reduced_trajectory(res.factors.projection, gram);
  {
    const auto [work, in_comm] = phase.stop();
    res.timings.compute += work;
    res.timings.comm += in_comm;
  }

  phase.start();
  auto search = grid_search(comm, res.qhat, cfg.beta1, cfg.beta2, cfg.search);
  res.operators = std::move(search.operators);
  res.outcome = std::move(search.outcome);
  {
    const auto [work, in_comm] = phase.stop();
    res.timings.learn = work;
    res.timings.comm += in_comm;
  }
}

TrainResult train_streamed(Communicator& comm, const TrainConfig& cfg) {
  const auto t_start = Clock::now();
  if (cfg.transform || cfg.lift.kind != LiftSpec::Kind::identity)
    throw Error(Errc::invalid_argument, "chunked reading works on untransformed data only");
  TrainResult res;
  PhaseClock phase(comm);

  phase.start();
  const Manifest manifest = load_manifest(cfg.data);
  const auto& h = manifest.header;
  const std::uint64_t rows = cfg.row_limit == 0 || cfg.row_limit >= h.n_rows ? h.n_rows : cfg.row_limit;
  if (rows < h.n_rows && h.n_vars != 1) throw Error(Errc::invalid_argument, "leading-row truncation needs a single-variable dataset");
  const std::uint64_t train = training_columns(cfg, h.n_cols);
  SnapshotPartition& part = res.partition;
  part.plan = plan_partition(rows, comm.size(), Alignment::row_balanced, rows < h.n_rows ? rows : h.rows_per_var);
  part.rank = comm.rank();
  part.n_cols = train;

  double read_seconds = 0.0;
  const Matrix gram = streamed_gram(comm, manifest, part.plan, cfg.chunk_rows, static_cast<Eigen::Index>(train), read_seconds);
  const auto [work, in_comm] = phase.stop();
  res.timings.io = std::min(read_seconds, work);
  res.timings.compute = work - res.timings.io;
  res.timings.comm = in_comm;

  phase.start();
  reduce_and_learn(comm, cfg, gram, res, phase);
  res.timings.total = seconds_since(t_start);
  return res;
}

}  // namespace

TrainResult train_rank(Communicator& comm, const TrainConfig& cfg) {
  if (cfg.chunk_rows > 0) return train_streamed(comm, cfg);
  const auto t_start = Clock::now();
  TrainResult res;
  PhaseClock phase(comm);

  phase.start();
  const Manifest manifest = load_manifest(cfg.data);
  SnapshotPartition part = load_partition(manifest, comm.size(), comm.rank(), cfg.transform, cfg.row_limit);
  std::tie(res.timings.io, res.timings.comm) = phase.stop();

  phase.start();
  const std::uint64_t train = training_columns(cfg, manifest.header.n_cols);
  if (train < manifest.header.n_cols) {
    part.block.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(train));
    part.n_cols = train;
  }
  if (cfg.transform) {
    const std::uint64_t source_rows = part.local_rows();
    auto cs = center_scale(lift(std::move(part), cfg.lift), comm, cfg.lift, source_rows);
    res.partition = std::move(cs.partition);
    res.params = std::move(cs.params);
  } else {
    if (cfg.lift.kind != LiftSpec::Kind::identity) throw Error(Errc::invalid_argument, "lifting requires transforms to be enabled");
    res.params = TransformParams::identity(part);
    res.partition = std::move(part);
  }

  const Matrix gram = global_gram(comm, res.partition.block);
  reduce_and_learn(comm, cfg, gram, res, phase);
  res.timings.total = seconds_since(t_start);
  return res;
}

void save_training(Communicator& comm, const TrainResult& res, const TrainConfig& cfg, const RunFiles& files) {
  std::error_code ec;
  std::filesystem::create_directories(files.dir, ec);
  if (ec) throw Error(Errc::io, "cannot create " + files.dir.string() + ": " + ec.message());
  res.params.save(files.transform(comm.rank()));
  if (comm.rank() == 0) {
    res.factors.save(files.factors());
    res.operators.save(files.operators());
    res.outcome.write_log(files.search_log());

    const std::uint64_t n_t = static_cast<std::uint64_t>(res.qhat.cols());
    nlohmann::json j;
    j["data"] = std::filesystem::absolute(cfg.data).string();
    j["ranks"] = comm.size();
    j["n_train"] = n_t;
    j["r_requested"] = res.factors.requested_r;
    j["r"] = res.factors.r;
    j["numerical_rank"] = res.factors.numerical_rank;
    j["truncated"] = res.factors.truncated;
    j["energy_threshold"] = cfg.energy;
    j["retained_energy"] = res.factors.energy(res.factors.r - 1);
    j["form"] = std::string(form_name(cfg.search.form));
    j["dt"] = cfg.search.dt;
    j["transform"] = cfg.transform;
    j["lift"] = cfg.lift.str();
    j["tau"] = res.outcome.tau;
    j["trial_steps"] = res.outcome.trial_steps;
    j["pairs"] = res.outcome.pairs;
    j["beta1_opt"] = res.outcome.beta1_opt;
    j["beta2_opt"] = res.outcome.beta2_opt;
    j["training_error"] = res.outcome.error_opt;
    j["owner_rank"] = res.outcome.owner;
    j["max_admissible_r"] = max_admissible_r(cfg.search.form, n_t);
    std::ofstream out(files.summary());
    if (!out) throw Error(Errc::io, "cannot write " + files.summary().string());
    out << j.dump(2) << '\n';
  }
  comm.barrier();
}

PredictionReport predict_and_compare(Communicator& comm, const TrainConfig& cfg, const TrainResult& res) {
  const Manifest manifest = load_manifest(cfg.data);
  const auto n_cols = static_cast<Eigen::Index>(manifest.header.n_cols);
  const auto train = static_cast<Eigen::Index>(res.qhat.cols());

  PredictionReport rep;
  rep.trajectory = rollout(res.operators, res.qhat.col(0), n_cols - 1, cfg.search.dt);
  Matrix states = Matrix::Constant(res.factors.r, n_cols, std::numeric_limits<double>::quiet_NaN());
  states.leftCols(rep.trajectory.columns()) = rep.trajectory.states;

  const BasisPartition basis = basis_partition(res.partition, res.factors.projection);
  const Matrix recon = reconstruct(basis, states, res.params);
  const Matrix ref = load_partition(manifest, comm.size(), comm.rank(), cfg.transform, cfg.row_limit).block;
  const std::vector<VarCell> map(res.params.var_map.begin(), res.params.var_map.begin() + static_cast<std::ptrdiff_t>(res.params.source_rows));

  rep.training = relative_error(comm, recon.leftCols(train), ref.leftCols(train), map);
  if (n_cols > train) rep.prediction = relative_error(comm, recon.rightCols(n_cols - train), ref.rightCols(n_cols - train), map);
  return rep;
}

}  // namespace dopinf
