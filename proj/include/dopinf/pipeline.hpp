#pragma once

// End-to-end training on one rank: read, transform, reduce, learn. Also the
// on-disk layout of a training run and the prediction/comparison helpers
// shared by the CLI, the benchmarks and the tests.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dopinf/comm.hpp"
#include "dopinf/dimred.hpp"
#include "dopinf/opinf_learn.hpp"
#include "dopinf/postproc.hpp"
#include "dopinf/rom_rollout.hpp"
#include "dopinf/snapshot_store.hpp"
#include "dopinf/transforms.hpp"

namespace dopinf {

struct TrainConfig {
  std::filesystem::path data;  // manifest
  int r = 0;                   // used when energy == 0
  double energy = 0.0;         // retained-energy threshold in (0, 1]
  bool transform = true;       // center and scale (variable-aligned plan)
  LiftSpec lift;
  std::uint64_t train_cols = 0;  // 0 = every column
  std::uint64_t row_limit = 0;   // 0 = every row; otherwise the leading rows only
  std::uint64_t chunk_rows = 0;  // > 0: stream the Gram from disk in row chunks (no transforms, block not kept)
  std::vector<double> beta1{1e-10};
  std::vector<double> beta2{1e-10};
  SearchOptions search;
};

/// Phase wall times on one rank. `compute` and `learn` exclude the time
/// spent inside collectives, which is reported as `comm`.
struct PipelineTimings {
  double io = 0.0;
  double compute = 0.0;
  double learn = 0.0;
  double comm = 0.0;
  double total = 0.0;
};

struct TrainResult {
  SnapshotPartition partition;  // transformed training block
  TransformParams params;
  ReductionFactors factors;
  Matrix qhat;
  RomOperators operators;
  RegSearchOutcome outcome;
  PipelineTimings timings;
};

TrainResult train_rank(Communicator& comm, const TrainConfig& cfg);

/// Reads (the leading rows of) a dataset under the plan the configuration implies.
SnapshotPartition load_partition(const Manifest& manifest, int p, int rank, bool variable_aligned, std::uint64_t row_limit = 0);

struct RunFiles {
  std::filesystem::path dir;

  std::filesystem::path factors() const { return dir / "factors.bin"; }
  std::filesystem::path operators() const { return dir / "operators.bin"; }
  std::filesystem::path search_log() const { return dir / "search_log.csv"; }
  std::filesystem::path summary() const { return dir / "summary.json"; }
  std::filesystem::path transform(int rank) const;
  std::filesystem::path trajectory_csv() const { return dir / "trajectory.csv"; }
  std::filesystem::path trajectory_bin() const { return dir / "trajectory.bin"; }
  std::filesystem::path reconstruction(int rank) const;
  std::filesystem::path probes(int rank) const;
};

/// Rank 0 writes the shared sidecars; every rank writes its transform.
void save_training(Communicator& comm, const TrainResult& res, const TrainConfig& cfg, const RunFiles& files);

struct PredictionReport {
  ReducedTrajectory trajectory;
  ErrorTable training;    // columns [0, train_cols)
  ErrorTable prediction;  // columns [train_cols, n_cols); empty when none
};

/// Rolls the learned model over every dataset column, reconstructs this
/// rank's rows and compares them against the raw dataset.
PredictionReport predict_and_compare(Communicator& comm, const TrainConfig& cfg, const TrainResult& res);

}  // namespace dopinf
