#pragma once

// Time evolution of the quadratic reduced model, discrete or RK4.

#include <cstdint>
#include <filesystem>
#include <span>

#include "dopinf/binio.hpp"
#include "dopinf/opinf_learn.hpp"

namespace dopinf {

enum class TrajectorySource : std::uint32_t { projected_training = 0, rollout = 1 };

struct ReducedTrajectory {
  Matrix states;  // r x n_p
  Vector times;   // step indices (discrete) or seconds (continuous)
  TrajectorySource source = TrajectorySource::rollout;
  bool diverged = false;
  std::int64_t first_bad = -1;  // column that first went non-finite
  int bad_mode = -1;

  int r() const { return static_cast<int>(states.rows()); }
  std::int64_t columns() const { return states.cols(); }

  /// `t,q1,...,qr` with one row per column.
  void write_csv(const std::filesystem::path& path) const;
  Bytes to_bytes() const;
  static ReducedTrajectory from_bytes(std::span<const std::byte> data);
  void save(const std::filesystem::path& path) const;
  static ReducedTrajectory load(const std::filesystem::path& path);
};

/// Index of the first non-finite entry, or -1.
int first_nonfinite(const Vector& q);

/// A q + Hc w(q) + c.
Vector step_discrete(const RomOperators& ops, const Vector& q);

/// One classical RK4 step of dq/dt = A q + Hc w(q) + c.
Vector step_rk4(const RomOperators& ops, const Vector& q, double dt);

/// Column 0 is q0. Continuous operators use `dt` (or ops.dt when dt <= 0).
/// On divergence returns the finite prefix with the flag set.
ReducedTrajectory rollout(const RomOperators& ops, const Vector& q0, std::int64_t n_steps, double dt = 0.0);

}  // namespace dopinf
