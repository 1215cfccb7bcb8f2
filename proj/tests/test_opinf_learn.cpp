#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>

#include "dopinf/error.hpp"
#include "dopinf/opinf_learn.hpp"
#include "dopinf/rom_rollout.hpp"
#include "support.hpp"

using namespace dopinf;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

Matrix stacked_operators(const RomOperators& ops) {
  Matrix o(static_cast<Eigen::Index>(data_columns(ops.r)), ops.r);
  o.topRows(ops.r) = ops.A.transpose();
  o.middleRows(ops.r, ops.Hc.cols()) = ops.Hc.transpose();
  o.bottomRows(1) = ops.c.transpose();
  return o;
}

Vector gamma(int r, double b1, double b2) {
  Vector g(static_cast<Eigen::Index>(data_columns(r)));
  g.setConstant(b2);
  g.head(r).setConstant(b1);
  g(g.size() - 1) = b1;
  return g;
}

RomOperators random_stable(int r, std::uint64_t seed) {
  RomOperators ops;
  ops.r = r;
  ops.A = 0.5 * testing::gaussian(r, r, seed) / std::sqrt(static_cast<double>(r));
  ops.Hc = 0.01 * testing::gaussian(r, static_cast<Eigen::Index>(quadratic_terms(r)), seed + 1);
  ops.c = 0.01 * testing::gaussian(r, 1, seed + 2);
  return ops;
}

Matrix trajectory(const RomOperators& ops, std::int64_t n, std::uint64_t seed) {
  Vector q0 = testing::gaussian(ops.r, 1, seed);
  q0 /= q0.norm();
  return rollout(ops, q0, n - 1).states;
}

SearchResult search(int p, const Matrix& qhat, const std::vector<double>& b1, const std::vector<double>& b2, const SearchOptions& opts,
                    Backend backend = Backend::inproc) {
  std::mutex mu;
  std::vector<SearchResult> out(static_cast<std::size_t>(p));
  run_ranks({backend, p}, [&](Communicator& comm) {
    auto res = grid_search(comm, qhat, b1, b2, opts);
    std::lock_guard lk(mu);
    out[static_cast<std::size_t>(comm.rank())] = std::move(res);
  });
  for (int r = 1; r < p; ++r) CHECK(out[static_cast<std::size_t>(r)].operators.to_bytes() == out[0].operators.to_bytes());
  return out[0];
}

}  // namespace

TEST_CASE("quadratic feature layout") {
  CHECK(quadratic_terms(1) == 1);
  CHECK(quadratic_terms(3) == 6);
  CHECK(data_columns(3) == 10);
  Vector q(3);
  q << 1, 2, 3;
  const Vector w = quadratic_features(q);
  Vector expect(6);
  expect << 1, 2, 3, 4, 6, 9;
  CHECK(w == expect);
}

TEST_CASE("data matrix examples") {
  Matrix q(1, 4);
  q << 2, 1, 0.5, 0.25;
  const auto d = build_data_matrix(q, ModelForm::discrete);
  REQUIRE(d.D.rows() == 3);
  CHECK(d.D(0, 0) == 2.0);
  CHECK(d.D(0, 1) == 4.0);
  CHECK(d.D(0, 2) == 1.0);

  const auto wide = build_data_matrix(testing::gaussian(3, 12, 1), ModelForm::discrete);
  CHECK(wide.D.cols() == 10);
  CHECK(wide.D.rows() == 11);

  Matrix g(1, 3);
  g << 1, 0.5, 0.25;
  try {
    build_data_matrix(g, ModelForm::discrete);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::underdetermined);
    CHECK(std::string(e.what()).find("maximum admissible r is 0") != std::string::npos);
  }
  Matrix g4(1, 5);
  g4 << 1, 0.5, 0.25, 0.125, 0.0625;
  const auto s = build_data_matrix(g4, ModelForm::discrete);
  CHECK(s.D.col(0) == g4.leftCols(4).transpose());
  CHECK(s.rhs.col(0) == g4.rightCols(4).transpose());
}

TEST_CASE("continuous targets are second-order finite differences") {
  const double dt = 0.01;
  Matrix q(2, 40);
  for (int j = 0; j < 40; ++j) {
    const double t = j * dt;
    q(0, j) = t * t;
    q(1, j) = 3.0 * t - 1.0;
  }
  const auto d = build_data_matrix(q, ModelForm::continuous, dt);
  REQUIRE(d.rhs.rows() == 40);
  for (int j = 0; j < 40; ++j) {
    CHECK(d.rhs(j, 0) == doctest::Approx(2.0 * j * dt).epsilon(1e-9));
    CHECK(d.rhs(j, 1) == doctest::Approx(3.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(build_data_matrix(q, ModelForm::continuous, 0.0), Error);
}

TEST_CASE("exact linear data is recovered without regularization") {
  Matrix q(1, 5);
  q << 1, 0.5, 0.25, 0.125, 0.0625;
  for (auto solver : {LsqSolver::cholesky, LsqSolver::qr}) {
    const auto ops = solve_regularized_lsq(build_data_matrix(q, ModelForm::discrete), 0.0, 0.0, solver);
    CHECK(std::abs(ops.A(0, 0) - 0.5) <= 1e-12);
    CHECK(std::abs(ops.c(0)) <= 1e-12);
    CHECK(std::abs(ops.Hc(0, 0)) <= 1e-12);
  }
}

TEST_CASE("scalar Tikhonov closed form a = 2 / (1 + beta)") {
  NormalSystem sys;
  sys.r = 1;
  sys.gram = Matrix::Identity(3, 3);
  sys.cross = Matrix::Zero(3, 1);
  sys.cross(0, 0) = 2.0;
  for (double beta : {0.0, 0.5, 1.0, 3.0, 100.0}) {
    const auto ops = solve_normal(sys, beta, 1.0);
    CHECK(ops.A(0, 0) == doctest::Approx(2.0 / (1.0 + beta)).epsilon(1e-15));
  }
}

TEST_CASE("consistent random systems are solved to a small residual") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const int r = 3;
    const auto truth = random_stable(r, seed);
    const Matrix q = testing::gaussian(r, 60, seed + 10);
    RegressionData data = build_data_matrix(q, ModelForm::discrete);
    data.rhs = data.D * stacked_operators(truth);
    for (auto solver : {LsqSolver::cholesky, LsqSolver::qr}) {
      const auto ops = solve_regularized_lsq(data, 1e-12, 1e-12, solver);
      CHECK((data.D * stacked_operators(ops) - data.rhs).norm() <= 1e-8);
      CHECK((ops.A - truth.A).norm() <= 1e-8);
    }
  }
}

TEST_CASE("solution satisfies the regularized normal equations") {
  const Matrix q = testing::gaussian(4, 50, 3);
  const auto data = build_data_matrix(q, ModelForm::discrete);
  for (double b1 : {1e-6, 1e-2, 1.0})
    for (double b2 : {1e-4, 10.0}) {
      const auto ops = solve_regularized_lsq(data, b1, b2);
      const Matrix o = stacked_operators(ops);
      const Matrix grad = 2.0 * data.D.transpose() * (data.D * o - data.rhs) + 2.0 * gamma(4, b1, b2).asDiagonal() * o;
      const double scale = 2.0 * (data.D.transpose() * data.rhs).norm();
      CHECK(grad.norm() <= 1e-8 * scale);
    }
}

TEST_CASE("cholesky and QR paths agree") {
  const auto data = build_data_matrix(testing::gaussian(3, 40, 5), ModelForm::discrete);
  const auto a = solve_regularized_lsq(data, 1e-3, 1e-2, LsqSolver::cholesky);
  const auto b = solve_regularized_lsq(data, 1e-3, 1e-2, LsqSolver::qr);
  CHECK((stacked_operators(a) - stacked_operators(b)).norm() <= 1e-9 * stacked_operators(a).norm());
}

TEST_CASE("operator norm shrinks monotonically as beta grows") {
  const auto data = build_data_matrix(testing::gaussian(3, 40, 6), ModelForm::discrete);
  double prev = kInf;
  for (double beta : {1e-4, 1e-2, 1.0, 1e2, 1e4}) {
    const double n = stacked_operators(solve_regularized_lsq(data, beta, beta)).norm();
    CHECK(n < prev);
    prev = n;
  }
  CHECK(prev < 1e-2);
}

TEST_CASE("rank-deficient data without regularization is singular") {
  Matrix q = Matrix::Zero(2, 20);
  q.row(0) = testing::gaussian(1, 20, 1);
  q.row(1) = 2.0 * q.row(0);
  for (auto solver : {LsqSolver::cholesky, LsqSolver::qr}) {
    try {
      solve_regularized_lsq(build_data_matrix(q, ModelForm::discrete), 0.0, 0.0, solver);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::singular_system);
    }
  }
  CHECK_NOTHROW(solve_regularized_lsq(build_data_matrix(q, ModelForm::discrete), 1e-8, 1e-8));
}

TEST_CASE("compact quadratic equals the full Kronecker form") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const int r = 1 + static_cast<int>(seed % 5);
    const auto ops = random_stable(r, seed);
    const Matrix h = ops.full_quadratic();
    REQUIRE(h.cols() == r * r);
    const Vector q = testing::gaussian(r, 1, seed + 100);
    Vector kron(r * r);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) kron(i * r + j) = q(i) * q(j);
    CHECK((h * kron - ops.Hc * quadratic_features(q)).norm() <= 1e-14 * std::max(1.0, (ops.Hc * quadratic_features(q)).norm()));
    for (int k = 0; k < r; ++k)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) CHECK(h(k, i * r + j) == h(k, j * r + i));
  }
}

TEST_CASE("operators serialize byte for byte") {
  testing::TempDir dir("ops");
  auto ops = random_stable(4, 2);
  ops.beta1 = 1e-3;
  ops.beta2 = 2e-3;
  ops.save(dir / "o.bin");
  const auto back = RomOperators::load(dir / "o.bin");
  CHECK(back.to_bytes() == ops.to_bytes());
  CHECK(back.A == ops.A);
  CHECK(back.Hc == ops.Hc);
  CHECK(back.c == ops.c);
  CHECK(back.beta2 == 2e-3);
  auto bytes = ops.to_bytes();
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(RomOperators::from_bytes(bytes), Error);
}

TEST_CASE("growth constraint examples") {
  TrainingStats s;
  s.mean = Vector::Zero(1);
  s.max_dev = Vector::Ones(1);
  Matrix t(1, 3);
  t << 0.2, -1.1, 0.5;
  CHECK(stability_check(t, s, 0.2));
  t(0, 1) = 1.3;
  CHECK_FALSE(stability_check(t, s, 0.2));
  t(0, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(stability_check(t, s, 0.2));
  t(0, 1) = kInf;
  CHECK_FALSE(stability_check(t, s, 100.0));
}

TEST_CASE("a mode with zero training deviation must stay put") {
  TrainingStats s;
  s.mean = Vector::Zero(2);
  s.max_dev = Vector(2);
  s.max_dev << 2.0, 0.0;
  Matrix t = Matrix::Zero(2, 4);
  t(1, 2) = 1e-12;
  CHECK(stability_check(t, s, 0.5));
  t(1, 2) = 1e-11;
  CHECK_FALSE(stability_check(t, s, 0.5));
}

TEST_CASE("training statistics") {
  Matrix q(2, 3);
  q << 1, 2, 3, 0, 0, 6;
  const auto s = TrainingStats::of(q);
  CHECK(s.mean(0) == 2.0);
  CHECK(s.mean(1) == 2.0);
  CHECK(s.max_dev(0) == 1.0);
  CHECK(s.max_dev(1) == 4.0);
}

TEST_CASE("log grids hit both endpoints") {
  const auto g = log_grid(1e-8, 1e2, 11);
  REQUIRE(g.size() == 11);
  CHECK(g.front() == 1e-8);
  CHECK(g.back() == 1e2);
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] / g[i - 1] == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(log_grid(3e-4, 1.0, 1) == std::vector<double>{3e-4});
  CHECK_THROWS_AS(log_grid(0.0, 1.0, 3), Error);
  CHECK_THROWS_AS(log_grid(1.0, 1.0, 0), Error);
}

TEST_CASE("admissible r agrees with an integer scan") {
  for (std::uint64_t n_t : {2u, 3u, 4u, 5u, 10u, 11u, 100u, 400u, 2536u, 10000u})
    for (auto form : {ModelForm::discrete, ModelForm::continuous}) {
      const std::uint64_t rows = form == ModelForm::discrete ? n_t - 1 : n_t;
      CHECK(regression_rows(form, n_t) == rows);
      int compact = 0, full = 0;
      for (std::uint64_t r = 1; r < 1000; ++r) {
        if (r + r * (r + 1) / 2 + 1 <= rows) compact = static_cast<int>(r);
        if (r + r * r + 1 <= rows) full = static_cast<int>(r);
      }
      CHECK(max_admissible_r(form, n_t) == compact);
      CHECK(max_admissible_r_full_kronecker(form, n_t) == full);
    }
  CHECK(max_admissible_r(ModelForm::discrete, 2536) == 69);
  CHECK(max_admissible_r(ModelForm::continuous, 2536) == 69);
  CHECK(max_admissible_r_full_kronecker(ModelForm::discrete, 2536) == 49);
}

TEST_CASE("pair blocks are contiguous and cover the padded grid") {
  for (std::size_t padded : {4u, 12u, 64u})
    for (int p : {1, 2, 4}) {
      if (padded % static_cast<std::size_t>(p) != 0) continue;
      std::size_t next = 0;
      for (int r = 0; r < p; ++r) {
        const auto [b, e] = pair_block(padded, p, r);
        CHECK(b == next);
        CHECK(e - b == padded / static_cast<std::size_t>(p));
        next = e;
      }
      CHECK(next == padded);
    }
}

TEST_CASE("single pair search equals a direct solve plus check") {
  const auto truth = random_stable(2, 7);
  const Matrix q = trajectory(truth, 40, 8);
  SearchOptions opts;
  const auto res = search(1, q, {1e-6}, {1e-5}, opts);
  const auto direct = solve_regularized_lsq(build_data_matrix(q, ModelForm::discrete), 1e-6, 1e-5);
  CHECK(res.operators.to_bytes() == direct.to_bytes());
  const Matrix roll = rollout(direct, q.col(0), 39).states;
  const double mse = (roll - q).squaredNorm() / static_cast<double>(q.size());
  REQUIRE(res.outcome.records.size() == 1);
  CHECK(res.outcome.records[0].error == mse);
  CHECK(res.outcome.records[0].feasible == stability_check(roll, TrainingStats::of(q), opts.tau));
}

TEST_CASE("search is identical for every rank count and backend") {
  const auto truth = random_stable(3, 11);
  const Matrix q = trajectory(truth, 80, 12) + 1e-4 * testing::gaussian(3, 80, 13);
  const auto b1 = log_grid(1e-8, 1e1, 6);
  const auto b2 = log_grid(1e-6, 1e2, 5);
  SearchOptions opts;
  opts.tau = 0.3;
  const auto ref = search(1, q, b1, b2, opts, Backend::loopback);
  CHECK(ref.outcome.pairs == 30);
  for (int p : {2, 3, 4})
    for (Backend b : {Backend::loopback, Backend::inproc, Backend::socket}) {
      const auto got = search(p, q, b1, b2, opts, b);
      CHECK(got.operators.to_bytes() == ref.operators.to_bytes());
      CHECK(got.outcome.beta1_opt == ref.outcome.beta1_opt);
      CHECK(got.outcome.beta2_opt == ref.outcome.beta2_opt);
      CHECK(got.outcome.padded_pairs % static_cast<std::size_t>(p) == 0);
      REQUIRE(got.outcome.records.size() == ref.outcome.records.size());
      for (std::size_t i = 0; i < got.outcome.records.size(); ++i) {
        CHECK(got.outcome.records[i].error == ref.outcome.records[i].error);
        CHECK(got.outcome.records[i].beta1 == ref.outcome.records[i].beta1);
      }
    }
}

TEST_CASE("winner is the feasible pair with minimal error") {
  const auto truth = random_stable(2, 21);
  const Matrix q = trajectory(truth, 60, 22) + 1e-3 * testing::gaussian(2, 60, 23);
  const auto res = search(2, q, log_grid(1e-6, 1e2, 5), log_grid(1e-6, 1e2, 4), SearchOptions{});
  double best = kInf;
  for (const auto& rec : res.outcome.records) {
    if (rec.feasible) {
      CHECK(rec.error == rec.raw_error);
      best = std::min(best, rec.error);
    } else {
      CHECK(rec.error == kInf);
    }
  }
  CHECK(res.outcome.error_opt == best);
}

TEST_CASE("an infeasible candidate loses even with the smallest raw error") {
  auto rotation = [](double rho) {
    RomOperators ops;
    ops.r = 2;
    const double a = 0.2;
    ops.A.resize(2, 2);
    ops.A << rho * std::cos(a), -rho * std::sin(a), rho * std::sin(a), rho * std::cos(a);
    ops.Hc = Matrix::Zero(2, 3);
    ops.c = Vector::Zero(2);
    return ops;
  };
  Vector q0(2);
  q0 << 1.0, 0.0;
  const Matrix q = rollout(rotation(0.999), q0, 49).states;
  const RomOperators growing = rotation(1.001);
  RomOperators flat = rotation(0.0);
  flat.c = q.rowwise().mean();

  SearchOptions opts;
  opts.tau = 0.1;
  opts.trial_steps = 2000;
  opts.candidate_override = [&](double b1, double) -> std::optional<RomOperators> { return b1 == 1e-6 ? growing : flat; };
  for (int p : {1, 2, 4}) {
    const auto res = search(p, q, {1e-6, 1e-4, 1e-2, 1.0}, {1e-6}, opts);
    const auto& injected = res.outcome.records[0];
    CHECK(injected.beta1 == 1e-6);
    for (std::size_t i = 1; i < res.outcome.records.size(); ++i) CHECK(injected.raw_error < res.outcome.records[i].raw_error);
    CHECK_FALSE(injected.feasible);
    CHECK(injected.error == kInf);
    CHECK(res.outcome.beta1_opt == 1e-4);
  }
}

TEST_CASE("ties go to the smaller beta1, then beta2") {
  const auto truth = random_stable(2, 41);
  const Matrix q = trajectory(truth, 50, 42);
  const auto fixed = solve_regularized_lsq(build_data_matrix(q, ModelForm::discrete), 1e-9, 1e-9);
  SearchOptions opts;
  opts.candidate_override = [&](double, double) -> std::optional<RomOperators> { return fixed; };
  for (int p : {1, 2, 4}) {
    const auto res = search(p, q, {1e-2, 1e-4, 1e-3}, {1e-1, 1e-5}, opts);
    CHECK(res.outcome.beta1_opt == 1e-4);
    CHECK(res.outcome.beta2_opt == 1e-5);
  }
}

TEST_CASE("no feasible pair is an error naming the best raw error") {
  const auto truth = random_stable(2, 51);
  const Matrix q = trajectory(truth, 40, 52);
  SearchOptions opts;
  opts.trial_steps = 100;
  auto bad = truth;
  bad.A = 1.5 * Matrix::Identity(2, 2);
  opts.candidate_override = [&](double, double) -> std::optional<RomOperators> { return bad; };
  try {
    search(2, q, {1e-3, 1e-2}, {1e-3}, opts);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::no_feasible_pair);
  }
}

TEST_CASE("search log has the documented schema") {
  testing::TempDir dir("log");
  const auto truth = random_stable(2, 61);
  const Matrix q = trajectory(truth, 40, 62);
  const auto res = search(2, q, {1e-6, 1e-3, 1.0}, {1e-4}, SearchOptions{});
  res.outcome.write_log(dir / "log.csv");
  std::ifstream in(dir / "log.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "beta1,beta2,error,feasible,rank");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);
}
