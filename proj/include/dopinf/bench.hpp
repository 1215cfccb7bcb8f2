#pragma once

// Strong and weak scaling harness with a per-phase timing breakdown.

#include <filesystem>
#include <string>
#include <vector>

#include "dopinf/comm.hpp"
#include "dopinf/pipeline.hpp"

namespace dopinf {

/// Timings of one configuration over several repetitions, taken on the rank
/// that owns the winning regularization pair.
struct PhaseTimings {
  int p = 1;
  int reps = 0;
  std::vector<PipelineTimings> runs;

  PipelineTimings mean() const;
  /// Sample standard deviation of the totals (0 for a single run).
  double total_std() const;
};

/// Runs the full pipeline once on `p` ranks and returns the timings of the
/// winner-owning rank.
PipelineTimings phase_timer(const LaunchOptions& launch, const TrainConfig& cfg);

struct BenchRow {
  std::string mode;  // strong | weak
  int p = 1;
  int reps = 0;
  double total_mean = 0.0;
  double total_std = 0.0;
  double io = 0.0;
  double compute = 0.0;
  double learn = 0.0;
  double comm = 0.0;
  double speedup_or_efficiency = 1.0;
  double ideal = 1.0;  // p / p_min for strong scaling, 1 for weak
};

struct BenchOptions {
  std::vector<int> ranks{1, 2, 4};
  int reps = 3;
  Backend backend = Backend::inproc;
  ReduceMode reduce = ReduceMode::tree;
};

/// Fixed problem size; speedup T(p_min) / T(p).
std::vector<BenchRow> run_strong(const TrainConfig& cfg, const BenchOptions& opts);

/// Fixed rows per rank (leading-row truncation of a single-variable dataset)
/// and B = p candidate pairs; efficiency T(p_min) / T(p).
std::vector<BenchRow> run_weak(const TrainConfig& cfg, std::uint64_t rows_per_rank, const BenchOptions& opts);

inline constexpr const char* kBenchHeader = "mode,p,reps,total_mean,total_std,io,compute,learn,comm,speedup_or_efficiency";

std::string report_csv(const std::vector<BenchRow>& rows);
void write_report(const std::filesystem::path& path, const std::vector<BenchRow>& rows);
/// Parses a report and checks its header and field types.
std::vector<BenchRow> parse_report(const std::string& csv);

}  // namespace dopinf
