#include "dopinf/synth_fom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "dopinf/dimred.hpp"
#include "dopinf/error.hpp"
#include "dopinf/rom_rollout.hpp"
#include "dopinf/transforms.hpp"

namespace dopinf {

namespace {

constexpr char kTruthMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'S', 'T'};
constexpr std::uint64_t kChunkRows = 1024;

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

Matrix gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = nd(rng);
  return m;
}

Matrix random_orthogonal(std::mt19937_64& rng, int r) {
  const Matrix g = gaussian(rng, r, r);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(r, r);
  const Matrix rr = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int k = 0; k < r; ++k)
    if (rr(k, k) < 0.0) q.col(k) = -q.col(k);
  return q;
}

/// Discrete operators with spectral radius 0.95: rotation blocks with moduli
/// in [0.85, 0.95] conjugated by a random orthogonal matrix.
RomOperators draw_operators(std::mt19937_64& rng, int r) {
  std::uniform_real_distribution<double> modulus(0.85, 0.95);
  std::uniform_real_distribution<double> angle(0.2, std::numbers::pi - 0.2);
  Matrix m = Matrix::Zero(r, r);
  int k = 0;
  for (; k + 1 < r; k += 2) {
    const double rho = k == 0 ? 0.95 : modulus(rng);
    const double th = angle(rng);
    m(k, k) = rho * std::cos(th);
    m(k, k + 1) = -rho * std::sin(th);
    m(k + 1, k) = rho * std::sin(th);
    m(k + 1, k + 1) = rho * std::cos(th);
  }
  if (k < r) {
    const double rho = k == 0 ? 0.95 : modulus(rng);
    m(k, k) = std::uniform_int_distribution<int>(0, 1)(rng) == 0 ? rho : -rho;
  }
  const Matrix p = random_orthogonal(rng, r);

  RomOperators ops;
  ops.r = r;
  ops.form = ModelForm::discrete;
  ops.A = p * m * p.transpose();
  ops.Hc = 0.02 * gaussian(rng, r, static_cast<Eigen::Index>(quadratic_terms(r)));
  ops.c = 0.01 * gaussian(rng, r, 1);
  return ops;
}

/// a * b accumulated in a fixed order per entry, so any row range of the
/// product is bit-identical to the same rows of the full product.
Matrix rowwise_product(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index j = 0; j < b.cols(); ++j)
    for (Eigen::Index k = 0; k < a.cols(); ++k) out.col(j) += a.col(k) * b(k, j);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embedding

EmbeddingBasis::EmbeddingBasis(std::uint64_t n, int r, std::uint64_t seed) : n_(n), r_(r), seed_(seed) {
  if (r < 1 || static_cast<std::uint64_t>(r) > n) throw Error(Errc::invalid_argument, "embedding needs 1 <= r <= n");
  r_inv_ = Matrix::Identity(r, r);
  for (int pass = 0; pass < 2; ++pass) {
    Matrix g = Matrix::Zero(r, r);
    for (std::uint64_t start = 0; start < n; start += kChunkRows) {
      const Matrix rows = rowwise_product(gaussian_rows(start, std::min(kChunkRows, n - start)), r_inv_);
      g.noalias() += rows.transpose() * rows;
    }
    Eigen::LLT<Matrix> llt(g);
    if (llt.info() != Eigen::Success) throw Error(Errc::divergent_draw, "degenerate Gaussian embedding draw");
    const Matrix u = llt.matrixU();
    r_inv_ = r_inv_ * u.triangularView<Eigen::Upper>().solve(Matrix::Identity(r, r));
  }
}

Matrix EmbeddingBasis::gaussian_rows(std::uint64_t start, std::uint64_t count) const {
  Matrix out(static_cast<Eigen::Index>(count), r_);
  std::uint64_t row = start;
  while (row < start + count) {
    const std::uint64_t chunk = row / kChunkRows;
    const std::uint64_t chunk_start = chunk * kChunkRows;
    const std::uint64_t chunk_rows = std::min(kChunkRows, n_ - chunk_start);
    auto rng = make_rng(seed_, 0xB, chunk);
    const Matrix g = gaussian(rng, static_cast<Eigen::Index>(chunk_rows), r_);
    const std::uint64_t take = std::min(start + count, chunk_start + chunk_rows) - row;
    out.middleRows(static_cast<Eigen::Index>(row - start), static_cast<Eigen::Index>(take)) =
        g.middleRows(static_cast<Eigen::Index>(row - chunk_start), static_cast<Eigen::Index>(take));
    row += take;
  }
  return out;
}

Matrix EmbeddingBasis::rows(std::uint64_t start, std::uint64_t count) const {
  if (start + count > n_) throw Error(Errc::invalid_argument, "embedding row range out of bounds");
  return rowwise_product(gaussian_rows(start, count), r_inv_);
}

// ---------------------------------------------------------------------------
// Exact-subspace quadratic system

SyntheticTruth gen_subspace_quadratic(const std::filesystem::path& manifest_path, const QuadraticGenOptions& opts) {
  if (opts.r_star < 1) throw Error(Errc::invalid_argument, "r* must be at least 1");
  if (static_cast<std::uint64_t>(opts.r_star) > opts.n) throw Error(Errc::invalid_argument, "r* exceeds the state dimension");
  if (opts.n_t < 2 * static_cast<std::uint64_t>(opts.r_star)) throw Error(Errc::invalid_argument, "n_t must be at least 2 r*");
  const int bound = max_admissible_r(ModelForm::discrete, opts.n_t);
  if (opts.r_star > bound)
    throw Error(Errc::underdetermined, "r*=" + std::to_string(opts.r_star) + " exceeds the admissible r=" + std::to_string(bound) +
                                           " for n_t=" + std::to_string(opts.n_t));

  SyntheticTruth truth;
  truth.r_star = opts.r_star;
  truth.seed = opts.seed;
  bool ok = false;
  for (int attempt = 0; attempt < std::max(1, opts.max_attempts) && !ok; ++attempt) {
    truth.used_seed = opts.seed + static_cast<std::uint64_t>(attempt);
    auto rng = make_rng(truth.used_seed, 0xA);
    truth.operators = draw_operators(rng, opts.r_star);
    Vector q0 = gaussian(rng, opts.r_star, 1);
    truth.q0 = q0 / q0.norm();
    const auto traj = rollout(truth.operators, truth.q0, static_cast<std::int64_t>(opts.n_t) - 1);
    ok = !traj.diverged && traj.states.cwiseAbs().maxCoeff() <= 100.0;
    if (ok) truth.trajectory = traj.states;
  }
  if (!ok)
    throw Error(Errc::divergent_draw, "all " + std::to_string(opts.max_attempts) + " operator draws diverged starting from seed " +
                                          std::to_string(opts.seed));

  const EmbeddingBasis basis(opts.n, opts.r_star, truth.used_seed);
  const auto header = DatasetHeader::make(opts.n, opts.n_t, 1);
  write_dataset(header, opts.shards, manifest_path, [&](std::uint64_t start, Matrix& block) {
    block = rowwise_product(basis.rows(start, static_cast<std::uint64_t>(block.rows())), truth.trajectory);
  });
  if (opts.keep_basis) truth.basis = basis.rows(0, opts.n);
  return truth;
}

Bytes SyntheticTruth::to_bytes() const {
  ByteWriter w;
  w.put_raw(std::string_view(kTruthMagic, sizeof(kTruthMagic)));
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(r_star));
  w.put_u64(seed);
  w.put_u64(used_seed);
  w.put_f64(dt);
  const Bytes ops = operators.to_bytes();
  w.put_u64(ops.size());
  w.put_raw(std::string_view(reinterpret_cast<const char*>(ops.data()), ops.size()));
  w.put_matrix(basis);
  w.put_vector(q0);
  w.put_matrix(trajectory);
  return std::move(w).take();
}

SyntheticTruth SyntheticTruth::from_bytes(std::span<const std::byte> data) {
  ByteReader r(data);
  if (std::memcmp(r.get_raw(8).data(), kTruthMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "not a synthetic-truth sidecar");
  if (r.get_u32() != 1) throw Error(Errc::corrupt_dataset, "unsupported synthetic-truth version");
  SyntheticTruth t;
  t.r_star = static_cast<int>(r.get_u32());
  t.seed = r.get_u64();
  t.used_seed = r.get_u64();
  t.dt = r.get_f64();
  const auto n_ops = r.get_u64();
  if (n_ops > r.remaining()) throw Error(Errc::corrupt_dataset, "truncated synthetic-truth sidecar");
  const std::string ops = r.get_raw(static_cast<std::size_t>(n_ops));
  t.operators = RomOperators::from_bytes(std::as_bytes(std::span(ops.data(), ops.size())));
  t.basis = r.get_matrix();
  t.q0 = r.get_vector();
  t.trajectory = r.get_matrix();
  if (!r.done()) throw Error(Errc::corrupt_dataset, "trailing bytes in synthetic-truth sidecar");
  return t;
}

void SyntheticTruth::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

SyntheticTruth SyntheticTruth::load(const std::filesystem::path& path) { return from_bytes(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Burgers

BurgersIc parse_burgers_ic(std::string_view name) {
  if (name == "zero") return BurgersIc::zero;
  if (name == "sine") return BurgersIc::sine;
  if (name == "bump") return BurgersIc::bump;
  throw Error(Errc::invalid_argument, "unknown initial condition '" + std::string(name) + "' (expected zero, sine or bump)");
}

namespace {

Vector burgers_initial(const BurgersOptions& o) {
  const auto n = static_cast<Eigen::Index>(o.n_x);
  const double dx = 1.0 / static_cast<double>(o.n_x);
  Vector u(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) * dx;
    switch (o.ic) {
      case BurgersIc::zero: u(i) = 0.0; break;
      case BurgersIc::sine: u(i) = std::sin(2.0 * std::numbers::pi * x); break;
      case BurgersIc::bump: u(i) = std::exp(-100.0 * (x - 0.5) * (x - 0.5)); break;
    }
  }
  return u;
}

/// Skew-symmetric split of u u_x plus central diffusion on a periodic grid.
void burgers_rhs(const Vector& u, double dx, double nu, Vector& out) {
  const Eigen::Index n = u.size();
  const double a = 1.0 / (6.0 * dx);
  const double d = nu / (dx * dx);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double um = u(i == 0 ? n - 1 : i - 1);
    const double up = u(i == n - 1 ? 0 : i + 1);
    const double ui = u(i);
    out(i) = -a * (ui * (up - um) + (up * up - um * um)) + d * (up - 2.0 * ui + um);
  }
}

}  // namespace

double burgers_max_dt(const BurgersOptions& opts) {
  const double dx = 1.0 / static_cast<double>(opts.n_x);
  double limit = std::numeric_limits<double>::infinity();
  if (opts.viscosity > 0.0) limit = std::min(limit, 0.5 * dx * dx / opts.viscosity);
  const double umax = burgers_initial(opts).cwiseAbs().maxCoeff();
  if (umax > 0.0) limit = std::min(limit, 0.5 * dx / umax);
  return limit;
}

Matrix simulate_burgers(const BurgersOptions& opts) {
  if (opts.n_x < 3) throw Error(Errc::invalid_argument, "Burgers grid needs at least 3 cells");
  if (opts.n_t < 1 || opts.save_stride < 1) throw Error(Errc::invalid_argument, "Burgers run needs n_t >= 1 and save_stride >= 1");
  if (!(opts.viscosity >= 0.0)) throw Error(Errc::invalid_argument, "viscosity must be nonnegative");
  if (!(opts.dt > 0.0)) throw Error(Errc::invalid_argument, "time step must be positive");
  const double limit = burgers_max_dt(opts);
  if (opts.dt > limit)
    throw Error(Errc::cfl_violation, "dt=" + std::to_string(opts.dt) + " violates the stability limit; admissible dt <= " + std::to_string(limit));

  const double dx = 1.0 / static_cast<double>(opts.n_x);
  const double dt = opts.dt;
  const double nu = opts.viscosity;
  Vector u = burgers_initial(opts);
  Matrix snaps(u.size(), static_cast<Eigen::Index>(opts.n_t));
  snaps.col(0) = u;
  Vector k1(u.size()), k2(u.size()), k3(u.size()), k4(u.size()), tmp(u.size());
  for (Eigen::Index s = 1; s < snaps.cols(); ++s) {
    for (std::uint64_t step = 0; step < opts.save_stride; ++step) {
      burgers_rhs(u, dx, nu, k1);
      tmp = u + 0.5 * dt * k1;
      burgers_rhs(tmp, dx, nu, k2);
      tmp = u + 0.5 * dt * k2;
      burgers_rhs(tmp, dx, nu, k3);
      tmp = u + dt * k3;
      burgers_rhs(tmp, dx, nu, k4);
      u += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!u.allFinite()) throw Error(Errc::divergent_draw, "Burgers solution became non-finite at snapshot " + std::to_string(s));
    snaps.col(s) = u;
  }
  return snaps;
}

Manifest gen_burgers(const std::filesystem::path& manifest_path, const BurgersOptions& opts) {
  const Matrix snaps = simulate_burgers(opts);
  return write_dataset(snaps, DatasetHeader::make(opts.n_x, opts.n_t, 1), opts.shards, manifest_path);
}

// ---------------------------------------------------------------------------
// Serial reference

SerialPod oracle_serial_pod(const Matrix& q, int r) {
  if (r < 1 || r > std::min(q.rows(), q.cols())) throw Error(Errc::invalid_argument, "oracle r out of range");
  Eigen::BDCSVD<Matrix> svd(q, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Matrix u = svd.matrixU();
  Matrix w = svd.matrixV();
  for (Eigen::Index k = 0; k < w.cols(); ++k) {
    Eigen::Index arg = 0;
    w.col(k).cwiseAbs().maxCoeff(&arg);
    if (w(arg, k) < 0.0) {
      w.col(k) = -w.col(k);
      u.col(k) = -u.col(k);
    }
  }
  SerialPod pod;
  pod.sigma = svd.singularValues();
  pod.basis = u.leftCols(r);
  pod.qhat = pod.basis.transpose() * q;
  pod.right = w;
  return pod;
}

SerialPod oracle_serial_pod(const Manifest& manifest, bool transform, int r, std::uint64_t train_cols) {
  const auto& h = manifest.header;
  const auto plan = plan_partition(h.n_rows, 1, Alignment::row_balanced, h.rows_per_var);
  SnapshotPartition part = read_partition(manifest, plan, 0);
  if (train_cols > 0 && train_cols < part.n_cols) {
    part.block.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(train_cols));
    part.n_cols = train_cols;
  }
  if (transform) {
    run_ranks({Backend::loopback, 1}, [&](Communicator& comm) { part = center_scale(std::move(part), comm).partition; });
  }
  return oracle_serial_pod(part.block, r);
}

}  // namespace dopinf
