#include <doctest.h>

#include <fstream>
#include <mutex>

#include <json.hpp>

#include "dopinf/error.hpp"
#include "dopinf/pipeline.hpp"
#include "dopinf/synth_fom.hpp"
#include "support.hpp"

using namespace dopinf;

namespace {

struct Dataset {
  testing::TempDir dir{"pipe"};
  std::filesystem::path manifest;
  SyntheticTruth truth;

  Dataset(std::uint64_t n, int r_star, std::uint64_t n_t, std::size_t shards = 2) {
    manifest = dir / "q.manifest";
    QuadraticGenOptions o;
    o.n = n;
    o.r_star = r_star;
    o.n_t = n_t;
    o.seed = 3;
    o.shards = shards;
    truth = gen_subspace_quadratic(manifest, o);
  }
};

std::vector<TrainResult> train(const TrainConfig& cfg, int p, Backend b = Backend::inproc) {
  std::mutex mu;
  std::vector<TrainResult> out(static_cast<std::size_t>(p));
  run_ranks({b, p}, [&](Communicator& comm) {
    auto res = train_rank(comm, cfg);
    std::lock_guard lk(mu);
    out[static_cast<std::size_t>(comm.rank())] = std::move(res);
  });
  return out;
}

}  // namespace

TEST_CASE("training on an exact subspace recovers the dynamics") {
  Dataset ds(800, 4, 120);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 4;
  cfg.train_cols = 60;
  const auto res = train(cfg, 2);
  CHECK(res[0].factors.r == 4);
  CHECK(res[0].qhat.cols() == 60);
  CHECK(res[0].operators.to_bytes() == res[1].operators.to_bytes());
  for (const auto& r : res) {
    CHECK(r.timings.io >= 0.0);
    CHECK(r.timings.compute >= 0.0);
    CHECK(r.timings.learn >= 0.0);
    CHECK(r.timings.comm >= 0.0);
    CHECK(r.timings.io + r.timings.compute + r.timings.learn + r.timings.comm <= 1.05 * r.timings.total + 1e-3);
  }

  std::vector<PredictionReport> reps(2);
  run_ranks({Backend::inproc, 2}, [&](Communicator& comm) {
    reps[static_cast<std::size_t>(comm.rank())] = predict_and_compare(comm, cfg, train_rank(comm, cfg));
  });
  CHECK(reps[0].trajectory.columns() == 120);
  CHECK(reps[0].training.worst_mean() <= 1e-6);
  CHECK(reps[0].prediction.worst_mean() <= 1e-4);
  CHECK(reps[0].prediction.per_time.cols() == 60);
}

TEST_CASE("operators and factors are identical for every p and backend") {
  Dataset ds(333, 3, 50, 3);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 3;
  cfg.beta1 = log_grid(1e-10, 1e-4, 3);
  cfg.beta2 = log_grid(1e-10, 1e-4, 2);
  const auto ref = train(cfg, 1, Backend::loopback)[0];
  for (int p : {2, 4})
    for (Backend b : {Backend::loopback, Backend::inproc, Backend::socket}) {
      const auto got = train(cfg, p, b);
      CHECK(got[0].operators.to_bytes() == ref.operators.to_bytes());
      CHECK(got[0].factors.to_bytes() == ref.factors.to_bytes());
    }
}

TEST_CASE("energy threshold picks r") {
  Dataset ds(200, 3, 40);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.energy = 0.999999;
  const auto res = train(cfg, 1);
  CHECK(res[0].factors.r == 3);
}

TEST_CASE("requests beyond the numerical rank are truncated") {
  Dataset ds(200, 2, 40);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 5;
  const auto res = train(cfg, 1);
  CHECK(res[0].factors.truncated);
  CHECK(res[0].factors.r == 2);
}

TEST_CASE("untransformed training uses identity parameters") {
  Dataset ds(150, 2, 30);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 2;
  cfg.transform = false;
  const auto res = train(cfg, 3);
  CHECK(res[0].params.stages.empty());
  CHECK(res[0].partition.block.rows() == 50);
  cfg.lift = LiftSpec::parse("reciprocal:0");
  CHECK_THROWS_AS(train(cfg, 1), Error);
}

TEST_CASE("leading-row truncation reads only the first rows") {
  Dataset ds(400, 2, 20);
  const auto m = load_manifest(ds.manifest);
  const Matrix full = load_partition(m, 1, 0, false).block;
  const auto part = load_partition(m, 2, 1, false, 100);
  CHECK(part.block == full.middleRows(50, 50));
  CHECK(part.plan.n_rows == 100);
}

TEST_CASE("streamed Gram matches the in-memory path") {
  Dataset ds(1000, 3, 40, 3);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 3;
  cfg.transform = false;
  cfg.train_cols = 30;
  const auto whole = train(cfg, 2);
  for (std::uint64_t chunk : {1ull, 7ull, 64ull, 5000ull}) {
    cfg.chunk_rows = chunk;
    for (int p : {1, 3}) {
      const auto streamed = train(cfg, p);
      CHECK(streamed[0].factors.to_bytes() == whole[0].factors.to_bytes());
      CHECK(streamed[0].operators.to_bytes() == whole[0].operators.to_bytes());
      CHECK(streamed[0].partition.block.size() == 0);
    }
  }
  cfg.row_limit = 600;
  cfg.chunk_rows = 0;
  const auto lead = train(cfg, 2);
  cfg.chunk_rows = 50;
  CHECK(train(cfg, 4)[0].factors.to_bytes() == lead[0].factors.to_bytes());
  cfg.transform = true;
  CHECK_THROWS_AS(train(cfg, 1), Error);
}

TEST_CASE("training columns must be in range") {
  Dataset ds(100, 2, 20);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 2;
  cfg.train_cols = 21;
  CHECK_THROWS_AS(train(cfg, 1), Error);
  cfg.train_cols = 1;
  CHECK_THROWS_AS(train(cfg, 1), Error);
}

TEST_CASE("saved run layout") {
  Dataset ds(300, 3, 40);
  TrainConfig cfg;
  cfg.data = ds.manifest;
  cfg.r = 3;
  const RunFiles files{ds.dir / "run"};
  run_ranks({Backend::inproc, 2}, [&](Communicator& comm) { save_training(comm, train_rank(comm, cfg), cfg, files); });
  CHECK(std::filesystem::exists(files.factors()));
  CHECK(std::filesystem::exists(files.operators()));
  CHECK(std::filesystem::exists(files.search_log()));
  CHECK(std::filesystem::exists(files.transform(0)));
  CHECK(std::filesystem::exists(files.transform(1)));
  CHECK(files.transform(1).filename() == "transform.rank0001.bin");

  std::ifstream in(files.summary());
  const auto j = nlohmann::json::parse(in);
  CHECK(j["r"] == 3);
  CHECK(j["ranks"] == 2);
  CHECK(j["n_train"] == 40);
  CHECK(j["form"] == "discrete");
  CHECK(j["max_admissible_r"] == max_admissible_r(ModelForm::discrete, 40));

  const auto ops = RomOperators::load(files.operators());
  CHECK(ops.r == 3);
}
