#include "dopinf/rom_rollout.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "dopinf/error.hpp"

namespace dopinf {

namespace {
constexpr char kTrajectoryMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'R', 'T'};
}

int first_nonfinite(const Vector& q) {
  for (Eigen::Index k = 0; k < q.size(); ++k)
    if (!std::isfinite(q(k))) return static_cast<int>(k);
  return -1;
}

Vector step_discrete(const RomOperators& ops, const Vector& q) { return ops.apply(q); }

Vector step_rk4(const RomOperators& ops, const Vector& q, double dt) {
  const Vector k1 = ops.apply(q);
  const Vector k2 = ops.apply(q + 0.5 * dt * k1);
  const Vector k3 = ops.apply(q + 0.5 * dt * k2);
  const Vector k4 = ops.apply(q + dt * k3);
  return q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

ReducedTrajectory rollout(const RomOperators& ops, const Vector& q0, std::int64_t n_steps, double dt) {
  if (q0.size() != ops.r) throw Error(Errc::shape_mismatch, "initial state has length " + std::to_string(q0.size()) + ", operators have r=" + std::to_string(ops.r));
  if (n_steps < 0) throw Error(Errc::invalid_argument, "negative step count");
  const bool continuous = ops.form == ModelForm::continuous;
  if (continuous) {
    if (dt <= 0.0) dt = ops.dt;
    if (!(dt > 0.0)) throw Error(Errc::invalid_argument, "continuous rollout needs a positive time step");
  }

  ReducedTrajectory traj;
  traj.source = TrajectorySource::rollout;
  traj.states.resize(ops.r, n_steps + 1);
  traj.states.col(0) = q0;
  std::int64_t done = 1;
  if (const int bad = first_nonfinite(q0); bad >= 0) {
    traj.diverged = true;
    traj.first_bad = 0;
    traj.bad_mode = bad;
    done = 0;
  }
  Vector q = q0;
  for (std::int64_t k = 1; k <= n_steps && !traj.diverged; ++k) {
    q = continuous ? step_rk4(ops, q, dt) : step_discrete(ops, q);
    if (const int bad = first_nonfinite(q); bad >= 0) {
      traj.diverged = true;
      traj.first_bad = k;
      traj.bad_mode = bad;
      break;
    }
    traj.states.col(k) = q;
    done = k + 1;
  }
  traj.states.conservativeResize(Eigen::NoChange, done);
  traj.times.resize(done);
  for (std::int64_t k = 0; k < done; ++k) traj.times(k) = continuous ? static_cast<double>(k) * dt : static_cast<double>(k);
  return traj;
}

void ReducedTrajectory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  out.precision(17);
  out << 't';
  for (int k = 0; k < r(); ++k) out << ",q" << (k + 1);
  out << '\n';
  for (Eigen::Index j = 0; j < states.cols(); ++j) {
    out << times(j);
    for (Eigen::Index k = 0; k < states.rows(); ++k) out << ',' << states(k, j);
    out << '\n';
  }
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

Bytes ReducedTrajectory::to_bytes() const {
  ByteWriter w;
  w.put_raw(std::string_view(kTrajectoryMagic, sizeof(kTrajectoryMagic)));
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(source));
  w.put_u32(diverged ? 1 : 0);
  w.put(first_bad);
  w.put(static_cast<std::int32_t>(bad_mode));
  w.put_matrix(states);
  w.put_vector(times);
  return std::move(w).take();
}

ReducedTrajectory ReducedTrajectory::from_bytes(std::span<const std::byte> data) {
  ByteReader r(data);
  if (std::memcmp(r.get_raw(8).data(), kTrajectoryMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "not a trajectory sidecar");
  if (r.get_u32() != 1) throw Error(Errc::corrupt_dataset, "unsupported trajectory version");
  ReducedTrajectory t;
  t.source = static_cast<TrajectorySource>(r.get_u32());
  t.diverged = r.get_u32() != 0;
  t.first_bad = r.get<std::int64_t>();
  t.bad_mode = r.get<std::int32_t>();
  t.states = r.get_matrix();
  t.times = r.get_vector();
  if (!r.done() || t.times.size() != t.states.cols()) throw Error(Errc::corrupt_dataset, "inconsistent trajectory sidecar");
  return t;
}

void ReducedTrajectory::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

ReducedTrajectory ReducedTrajectory::load(const std::filesystem::path& path) { return from_bytes(read_file_bytes(path)); }

}  // namespace dopinf
