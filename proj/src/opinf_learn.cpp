#include "dopinf/opinf_learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include "dopinf/error.hpp"
#include "dopinf/rom_rollout.hpp"

namespace dopinf {

namespace {
constexpr char kOperatorsMagic[8] = {'D', 'O', 'P', 'I', 'N', 'F', 'O', 'P'};
constexpr double kInf = std::numeric_limits<double>::infinity();
}  // namespace

std::string_view form_name(ModelForm f) noexcept { return f == ModelForm::discrete ? "discrete" : "continuous"; }

ModelForm parse_form(std::string_view name) {
  if (name == "discrete") return ModelForm::discrete;
  if (name == "continuous") return ModelForm::continuous;
  throw Error(Errc::invalid_argument, "unknown model form '" + std::string(name) + "' (expected discrete or continuous)");
}

std::size_t quadratic_terms(int r) { return static_cast<std::size_t>(r) * static_cast<std::size_t>(r + 1) / 2; }

std::size_t data_columns(int r) { return static_cast<std::size_t>(r) + quadratic_terms(r) + 1; }

void quadratic_features(std::span<const double> q, std::span<double> w) {
  const std::size_t r = q.size();
  if (w.size() != r * (r + 1) / 2) throw Error(Errc::shape_mismatch, "quadratic feature buffer has the wrong length");
  std::size_t idx = 0;
  for (std::size_t k = 0; k < r; ++k)
    for (std::size_t l = k; l < r; ++l) w[idx++] = q[k] * q[l];
}

Vector quadratic_features(const Vector& q) {
  Vector w(static_cast<Eigen::Index>(quadratic_terms(static_cast<int>(q.size()))));
  quadratic_features({q.data(), static_cast<std::size_t>(q.size())}, {w.data(), static_cast<std::size_t>(w.size())});
  return w;
}

std::uint64_t regression_rows(ModelForm form, std::uint64_t n_t) {
  if (form == ModelForm::discrete) return n_t == 0 ? 0 : n_t - 1;
  return n_t;
}

int max_admissible_r(ModelForm form, std::uint64_t n_t) {
  const auto rows = regression_rows(form, n_t);
  int r = 0;
  while (data_columns(r + 1) <= rows) ++r;
  return r;
}

int max_admissible_r_full_kronecker(ModelForm form, std::uint64_t n_t) {
  const auto rows = regression_rows(form, n_t);
  int r = 0;
  auto cols = [](std::uint64_t k) { return k + k * k + 1; };
  while (cols(static_cast<std::uint64_t>(r) + 1) <= rows) ++r;
  return r;
}

// ---------------------------------------------------------------------------
// RomOperators

Vector RomOperators::apply(const Vector& q) const {
  Vector out = c;
  out.noalias() += A * q;
  if (Hc.cols() > 0) out.noalias() += Hc * quadratic_features(q);
  return out;
}

Matrix RomOperators::full_quadratic() const {
  Matrix H = Matrix::Zero(r, static_cast<Eigen::Index>(r) * r);
  Eigen::Index idx = 0;
  for (int i = 0; i < r; ++i) {
    for (int j = i; j < r; ++j, ++idx) {
      if (i == j) {
        H.col(i * r + j) = Hc.col(idx);
      } else {
        H.col(i * r + j) = 0.5 * Hc.col(idx);
        H.col(j * r + i) = 0.5 * Hc.col(idx);
      }
    }
  }
  return H;
}

bool RomOperators::finite() const { return c.allFinite() && A.allFinite() && Hc.allFinite(); }

Bytes RomOperators::to_bytes() const {
  ByteWriter w;
  w.put_raw(std::string_view(kOperatorsMagic, sizeof(kOperatorsMagic)));
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(r));
  w.put_u32(static_cast<std::uint32_t>(form));
  w.put_f64(dt);
  w.put_f64(beta1);
  w.put_f64(beta2);
  w.put_vector(c);
  w.put_matrix(A);
  w.put_matrix(Hc);
  return std::move(w).take();
}

RomOperators RomOperators::from_bytes(std::span<const std::byte> data) {
  ByteReader rd(data);
  if (std::memcmp(rd.get_raw(8).data(), kOperatorsMagic, 8) != 0) throw Error(Errc::corrupt_dataset, "not an operator sidecar");
  if (rd.get_u32() != 1) throw Error(Errc::corrupt_dataset, "unsupported operator sidecar version");
  RomOperators o;
  o.r = static_cast<int>(rd.get_u32());
  o.form = static_cast<ModelForm>(rd.get_u32());
  o.dt = rd.get_f64();
  o.beta1 = rd.get_f64();
  o.beta2 = rd.get_f64();
  o.c = rd.get_vector();
  o.A = rd.get_matrix();
  o.Hc = rd.get_matrix();
  const auto s = static_cast<Eigen::Index>(quadratic_terms(o.r));
  if (!rd.done() || o.c.size() != o.r || o.A.rows() != o.r || o.A.cols() != o.r || o.Hc.rows() != o.r || o.Hc.cols() != s)
    throw Error(Errc::corrupt_dataset, "operator sidecar shapes are inconsistent");
  return o;
}

void RomOperators::save(const std::filesystem::path& path) const { write_file_bytes(path, to_bytes()); }

RomOperators RomOperators::load(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) throw Error(Errc::missing_params, "no operator sidecar at " + path.string());
  return from_bytes(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Regression

RegressionData build_data_matrix(const Matrix& qhat, ModelForm form, double dt) {
  const int r = static_cast<int>(qhat.rows());
  const Eigen::Index n_t = qhat.cols();
  if (r < 1) throw Error(Errc::invalid_argument, "reduced trajectory has no modes");
  if (n_t < 2) throw Error(Errc::invalid_argument, "at least two snapshots are required");
  if (form == ModelForm::continuous && !(dt > 0.0)) throw Error(Errc::invalid_argument, "continuous form needs a positive time step");

  const auto rows = static_cast<Eigen::Index>(regression_rows(form, static_cast<std::uint64_t>(n_t)));
  const auto cols = static_cast<Eigen::Index>(data_columns(r));
  if (cols > rows)
    throw Error(Errc::underdetermined, "r=" + std::to_string(r) + " needs " + std::to_string(cols) + " regression rows but only " +
                                           std::to_string(rows) + " are available; maximum admissible r is " +
                                           std::to_string(max_admissible_r(form, static_cast<std::uint64_t>(n_t))));

  RegressionData out;
  out.form = form;
  out.r = r;
  out.dt = form == ModelForm::continuous ? dt : 0.0;
  out.D.resize(rows, cols);
  const auto s = static_cast<std::size_t>(quadratic_terms(r));
  std::vector<double> q(static_cast<std::size_t>(r)), w(s);
  for (Eigen::Index j = 0; j < rows; ++j) {
    for (int k = 0; k < r; ++k) q[static_cast<std::size_t>(k)] = qhat(k, j);
    quadratic_features(q, w);
    for (int k = 0; k < r; ++k) out.D(j, k) = q[static_cast<std::size_t>(k)];
    for (std::size_t k = 0; k < s; ++k) out.D(j, r + static_cast<Eigen::Index>(k)) = w[k];
    out.D(j, cols - 1) = 1.0;
  }

  if (form == ModelForm::discrete) {
    out.rhs = qhat.rightCols(n_t - 1).transpose();
    return out;
  }
  out.rhs.resize(n_t, r);
  const double h2 = 2.0 * dt;
  if (n_t == 2) {
    const Vector d = (qhat.col(1) - qhat.col(0)) / dt;
    out.rhs.row(0) = d.transpose();
    out.rhs.row(1) = d.transpose();
    return out;
  }
  out.rhs.row(0) = ((-3.0 * qhat.col(0) + 4.0 * qhat.col(1) - qhat.col(2)) / h2).transpose();
  for (Eigen::Index j = 1; j + 1 < n_t; ++j) out.rhs.row(j) = ((qhat.col(j + 1) - qhat.col(j - 1)) / h2).transpose();
  out.rhs.row(n_t - 1) = ((3.0 * qhat.col(n_t - 1) - 4.0 * qhat.col(n_t - 2) + qhat.col(n_t - 3)) / h2).transpose();
  return out;
}

namespace {

Vector regularization_diagonal(int r, double beta1, double beta2) {
  if (!(beta1 >= 0.0) || !(beta2 >= 0.0)) throw Error(Errc::invalid_argument, "regularization weights must be nonnegative");
  const auto s = static_cast<Eigen::Index>(quadratic_terms(r));
  Vector g(r + s + 1);
  g.head(r).setConstant(beta1);
  g.segment(r, s).setConstant(beta2);
  g(r + s) = beta1;
  return g;
}

RomOperators unpack(const Matrix& x, int r, ModelForm form, double dt, double beta1, double beta2) {
  const auto s = static_cast<Eigen::Index>(quadratic_terms(r));
  RomOperators o;
  o.r = r;
  o.form = form;
  o.dt = dt;
  o.beta1 = beta1;
  o.beta2 = beta2;
  o.A = x.topRows(r).transpose();
  o.Hc = x.middleRows(r, s).transpose();
  o.c = x.row(r + s).transpose();
  return o;
}

[[noreturn]] void singular(double beta1, double beta2) {
  throw Error(Errc::singular_system, "regularized normal matrix is singular at beta1=" + std::to_string(beta1) +
                                         ", beta2=" + std::to_string(beta2) + "; use beta > 0");
}

}  // namespace

NormalSystem normal_system(const RegressionData& data) {
  NormalSystem sys;
  sys.form = data.form;
  sys.r = data.r;
  sys.dt = data.dt;
  sys.gram = data.D.transpose() * data.D;
  sys.cross = data.D.transpose() * data.rhs;
  return sys;
}

RomOperators solve_normal(const NormalSystem& sys, double beta1, double beta2) {
  Matrix g = sys.gram;
  g.diagonal() += regularization_diagonal(sys.r, beta1, beta2);
  Eigen::LLT<Matrix> llt(g);
  if (llt.info() != Eigen::Success) singular(beta1, beta2);
  const Vector pivots = llt.matrixLLT().diagonal();
  if (!pivots.allFinite() || pivots.minCoeff() <= 0.0) singular(beta1, beta2);
  if (beta1 == 0.0 || beta2 == 0.0) {
    const double floor = static_cast<double>(g.rows()) * std::numeric_limits<double>::epsilon() * g.diagonal().maxCoeff();
    if (pivots.cwiseAbs2().minCoeff() <= floor) singular(beta1, beta2);
  }
  const Matrix x = llt.solve(sys.cross);
  if (!x.allFinite()) singular(beta1, beta2);
  return unpack(x, sys.r, sys.form, sys.dt, beta1, beta2);
}

RomOperators solve_regularized_lsq(const RegressionData& data, double beta1, double beta2, LsqSolver solver) {
  if (solver == LsqSolver::cholesky) return solve_normal(normal_system(data), beta1, beta2);

  const Vector gamma = regularization_diagonal(data.r, beta1, beta2);
  const Eigen::Index rows = data.D.rows(), cols = data.D.cols();
  Matrix stacked = Matrix::Zero(rows + cols, cols);
  Matrix rhs = Matrix::Zero(rows + cols, data.r);
  stacked.topRows(rows) = data.D;
  stacked.bottomRows(cols).diagonal() = gamma.cwiseSqrt();
  rhs.topRows(rows) = data.rhs;
  Eigen::ColPivHouseholderQR<Matrix> qr(stacked);
  if (qr.rank() < cols) singular(beta1, beta2);
  return unpack(qr.solve(rhs), data.r, data.form, data.dt, beta1, beta2);
}

// ---------------------------------------------------------------------------
// Growth constraint

TrainingStats TrainingStats::of(const Matrix& qhat) {
  TrainingStats s;
  s.mean = qhat.rowwise().mean();
  s.max_dev = (qhat.colwise() - s.mean).cwiseAbs().rowwise().maxCoeff();
  return s;
}

bool stability_check(const Matrix& trial, const TrainingStats& stats, double tau) {
  if (trial.rows() != stats.mean.size()) throw Error(Errc::shape_mismatch, "trial trajectory and training statistics disagree on r");
  if (!trial.allFinite()) return false;
  const double largest = stats.max_dev.size() > 0 ? stats.max_dev.maxCoeff() : 0.0;
  for (Eigen::Index k = 0; k < trial.rows(); ++k) {
    const double dev = (trial.row(k).array() - stats.mean(k)).abs().maxCoeff();
    const double d = stats.max_dev(k);
    const double bound = d > 0.0 ? (1.0 + tau) * d : 1e-12 * largest;
    if (dev > bound) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Grid search

std::vector<double> log_grid(double min, double max, int count) {
  if (count < 1) throw Error(Errc::invalid_argument, "grid count must be at least 1");
  if (count == 1) {
    if (!(min >= 0.0)) throw Error(Errc::invalid_argument, "regularization weights must be nonnegative");
    return {min};
  }
  if (!(min > 0.0) || !(max >= min)) throw Error(Errc::invalid_argument, "log grid needs 0 < min <= max");
  std::vector<double> out(static_cast<std::size_t>(count));
  const double lmin = std::log10(min), lmax = std::log10(max);
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = std::pow(10.0, lmin + (lmax - lmin) * i / (count - 1));
  out.front() = min;
  out.back() = max;
  return out;
}

std::pair<std::size_t, std::size_t> pair_block(std::size_t padded_pairs, int p, int rank) {
  const std::size_t per = padded_pairs / static_cast<std::size_t>(p);
  return {per * static_cast<std::size_t>(rank), per * static_cast<std::size_t>(rank + 1)};
}

void RegSearchOutcome::write_log(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
  out << "beta1,beta2,error,feasible,rank\n";
  char buf[160];
  for (const auto& rec : records) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%d,%d\n", rec.beta1, rec.beta2, rec.error, rec.feasible ? 1 : 0, rec.rank);
    out << buf;
  }
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

SearchResult grid_search(Communicator& comm, const Matrix& qhat, const std::vector<double>& beta1,
                         const std::vector<double>& beta2, const SearchOptions& opts) {
  if (beta1.empty() || beta2.empty()) throw Error(Errc::invalid_argument, "regularization grids must be nonempty");
  if (!(opts.tau >= 0.0)) throw Error(Errc::invalid_argument, "tau must be nonnegative");
  const int p = comm.size();
  const int rank = comm.rank();
  const Eigen::Index n_t = qhat.cols();

  RegSearchOutcome outcome;
  outcome.beta1_grid = beta1;
  outcome.beta2_grid = beta2;
  outcome.pairs = beta1.size() * beta2.size();
  outcome.padded_pairs = (outcome.pairs + static_cast<std::size_t>(p) - 1) / static_cast<std::size_t>(p) * static_cast<std::size_t>(p);
  outcome.tau = opts.tau;
  outcome.trial_steps = std::max<int>(opts.trial_steps, static_cast<int>(n_t - 1));

  const RegressionData data = build_data_matrix(qhat, opts.form, opts.dt);
  const NormalSystem sys = opts.solver == LsqSolver::cholesky ? normal_system(data) : NormalSystem{};
  const TrainingStats stats = TrainingStats::of(qhat);
  const Vector q0 = qhat.col(0);

  std::vector<SearchRecord> local;
  ArgminKey best;
  best.owner = rank;
  Bytes best_ops;
  const auto [begin, end] = pair_block(outcome.padded_pairs, p, rank);
  for (std::size_t idx = begin; idx < end; ++idx) {
    const std::size_t pi = std::min(idx, outcome.pairs - 1);
    SearchRecord rec;
    rec.beta1 = beta1[pi / beta2.size()];
    rec.beta2 = beta2[pi % beta2.size()];
    rec.rank = rank;
    rec.raw_error = kInf;

    std::optional<RomOperators> ops;
    if (opts.candidate_override) ops = opts.candidate_override(rec.beta1, rec.beta2);
    if (!ops) {
      try {
        ops = opts.solver == LsqSolver::cholesky ? solve_normal(sys, rec.beta1, rec.beta2)
                                                 : solve_regularized_lsq(data, rec.beta1, rec.beta2, LsqSolver::qr);
      } catch (const Error& e) {
        if (e.code() != Errc::singular_system) throw;
      }
    }
    if (ops && ops->finite()) {
      const auto traj = rollout(*ops, q0, outcome.trial_steps, opts.dt);
      if (traj.columns() >= n_t) rec.raw_error = (traj.states.leftCols(n_t) - qhat).squaredNorm() / static_cast<double>(qhat.size());
      rec.feasible = !traj.diverged && std::isfinite(rec.raw_error) && stability_check(traj.states, stats, opts.tau);
    }
    rec.error = rec.feasible ? rec.raw_error : kInf;

    const ArgminKey key{rec.error, rec.beta1, rec.beta2, rank};
    if (rec.feasible && key < best) {
      best = key;
      best_ops = ops->to_bytes();
    }
    if (idx < outcome.pairs) local.push_back(rec);
  }

  const ArgminKey winner = comm.allreduce_argmin(best);

  ByteWriter w;
  w.put_u64(local.size());
  for (const auto& rec : local) {
    w.put_f64(rec.beta1);
    w.put_f64(rec.beta2);
    w.put_f64(rec.error);
    w.put_f64(rec.raw_error);
    w.put_u32(rec.feasible ? 1 : 0);
    w.put_u32(static_cast<std::uint32_t>(rec.rank));
  }
  for (const auto& part : comm.allgather(std::move(w).take())) {
    ByteReader rd(part);
    const auto n = rd.get_u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      SearchRecord rec;
      rec.beta1 = rd.get_f64();
      rec.beta2 = rd.get_f64();
      rec.error = rd.get_f64();
      rec.raw_error = rd.get_f64();
      rec.feasible = rd.get_u32() != 0;
      rec.rank = static_cast<int>(rd.get_u32());
      outcome.records.push_back(rec);
    }
  }

  if (!std::isfinite(winner.error)) {
    double best_raw = kInf;
    for (const auto& rec : outcome.records) best_raw = std::min(best_raw, rec.raw_error);
    throw Error(Errc::no_feasible_pair, "no feasible regularization pair among " + std::to_string(outcome.pairs) +
                                            " candidates (best infeasible training error " + std::to_string(best_raw) + ")");
  }
  outcome.beta1_opt = winner.beta1;
  outcome.beta2_opt = winner.beta2;
  outcome.error_opt = winner.error;
  outcome.owner = winner.owner;

  const Bytes shared = comm.broadcast(rank == winner.owner ? best_ops : Bytes{}, winner.owner);
  return {RomOperators::from_bytes(shared), std::move(outcome)};
}

}  // namespace dopinf
