#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "dopinf/rom_rollout.hpp"
#include "dopinf/snapshot_store.hpp"
#include "support.hpp"

using namespace dopinf;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args, const testing::TempDir& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string(DOPINF_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

}  // namespace

TEST_CASE("inspect echoes the header and the admissible r") {
  testing::TempDir dir("cli");
  write_dataset(testing::gaussian(10, 4, 1), DatasetHeader::make(10, 4), 1, dir / "d.manifest");
  const auto r = cli("inspect --data " + (dir / "d.manifest").string(), dir);
  CHECK(r.status == 0);
  CHECK(r.out.find("n_rows=10 n_cols=4") != std::string::npos);
  CHECK(r.out.find("discrete: regression_rows=3 max_admissible_r=1") != std::string::npos);

  const auto s = cli("inspect --nt 2536", dir);
  CHECK(s.status == 0);
  CHECK(s.out.find("discrete: regression_rows=2535 max_admissible_r=69 (full Kronecker: 49)") != std::string::npos);
}

TEST_CASE("train on one and four ranks writes identical sidecars") {
  testing::TempDir dir("cli");
  const std::string data = (dir / "q.manifest").string();
  REQUIRE(cli("gen-quadratic --n 600 --r-star 3 --nt 60 --seed 4 --shards 3 --out " + data, dir).status == 0);
  CHECK(std::filesystem::exists(dir / "q.truth.bin"));

  const std::string common = "train --data " + data + " --r 3 --beta1 1e-10:1e-6:3 --beta2 1e-10:1e-8:2 --train-cols 40";
  REQUIRE(cli(common + " --ranks 1 --backend loopback --out " + (dir / "p1").string(), dir).status == 0);
  for (const std::string tag : {"inproc", "socket"}) {
    const auto r = cli(common + " --ranks 4 --backend " + tag + " --out " + (dir / ("p4" + tag)).string(), dir);
    REQUIRE_MESSAGE(r.status == 0, r.out);
    CHECK(testing::same_bytes(dir / "p1" / "operators.bin", dir / ("p4" + tag) / "operators.bin"));
    CHECK(testing::same_bytes(dir / "p1" / "factors.bin", dir / ("p4" + tag) / "factors.bin"));
  }
  CHECK(std::filesystem::exists(dir / "p1" / "search_log.csv"));
  CHECK(std::filesystem::exists(dir / "p1" / "summary.json"));

  SUBCASE("rollout with zero steps keeps only the initial column") {
    REQUIRE(cli("rollout --out " + (dir / "p1").string() + " --steps 0", dir).status == 0);
    const auto t = ReducedTrajectory::load(dir / "p1" / "trajectory.bin");
    CHECK(t.columns() == 1);
    std::ifstream in(dir / "p1" / "trajectory.csv");
    std::string line;
    int lines = 0;
    while (std::getline(in, line))
      if (!line.empty()) ++lines;
    CHECK(lines == 2);
  }

  SUBCASE("reconstruct and probe on the training rank count") {
    REQUIRE(cli("rollout --out " + (dir / "p4socket").string() + " --steps 59", dir).status == 0);
    const auto rc = cli("reconstruct --data " + data + " --ranks 4 --backend socket --compare --out " + (dir / "p4socket").string(), dir);
    CHECK_MESSAGE(rc.status == 0, rc.out);
    for (int r = 0; r < 4; ++r) CHECK(std::filesystem::exists(dir / "p4socket" / ("reconstruction.rank000" + std::to_string(r) + ".bin")));
    const auto pr = cli("probe --data " + data + " --ranks 4 --backend inproc --probes 0:0,0:599 --out " + (dir / "p4socket").string(), dir);
    CHECK_MESSAGE(pr.status == 0, pr.out);
    CHECK(std::filesystem::exists(dir / "p4socket" / "probes.rank0000.csv"));
    CHECK(std::filesystem::exists(dir / "p4socket" / "probes.rank0003.csv"));
    CHECK_FALSE(std::filesystem::exists(dir / "p4socket" / "probes.rank0001.csv"));
    const auto bad = cli("probe --data " + data + " --ranks 4 --probes 0:600 --out " + (dir / "p4socket").string(), dir);
    CHECK(bad.status == 2);
  }
}

TEST_CASE("exit statuses") {
  testing::TempDir dir("cli");
  CHECK(cli("train --bogus", dir).status == 2);
  CHECK(cli("frobnicate", dir).status == 2);
  CHECK(cli("train --data " + (dir / "none.manifest").string() + " --r 2 --out " + (dir / "o").string(), dir).status == 2);

  const std::string data = (dir / "q.manifest").string();
  REQUIRE(cli("gen-quadratic --n 100 --r-star 2 --nt 20 --seed 1 --shards 2 --out " + data, dir).status == 0);
  CHECK(cli("train --data " + data + " --r 2 --energy 0.9 --out " + (dir / "o").string(), dir).status == 2);

  const auto under = cli("train --data " + data + " --r 2 --train-cols 5 --out " + (dir / "o").string(), dir);
  CHECK(under.status == 3);
  CHECK(under.out.find("underdetermined") != std::string::npos);

  std::filesystem::remove(dir / "q.shard0001.bin");
  for (const auto& e : std::filesystem::directory_iterator(dir.path()))
    if (e.path().filename().string().find("shard") != std::string::npos && e.path().filename().string().find("0001") != std::string::npos)
      std::filesystem::remove(e.path());
  const auto io = cli("train --data " + data + " --r 2 --out " + (dir / "o").string(), dir);
  CHECK(io.status == 4);
}

TEST_CASE("Burgers generation rejects unstable steps") {
  testing::TempDir dir("cli");
  const auto r = cli("gen-burgers --nx 256 --nu 0.01 --nt 10 --dt 0.01 --out " + (dir / "b.manifest").string(), dir);
  CHECK(r.status == 3);
  CHECK(r.out.find("cfl-violation") != std::string::npos);
  CHECK(cli("gen-burgers --nx 64 --nt 10 --dt 1e-3 --ic bump --out " + (dir / "b.manifest").string(), dir).status == 0);
}

TEST_CASE("benchmark subcommands write the report") {
  testing::TempDir dir("cli");
  const std::string data = (dir / "q.manifest").string();
  REQUIRE(cli("gen-quadratic --n 2000 --r-star 2 --nt 30 --seed 1 --out " + data, dir).status == 0);
  const auto r = cli("bench-strong --data " + data + " --r 2 --ranks-list 1,2 --reps 1 --out " + (dir / "s.csv").string(), dir);
  CHECK_MESSAGE(r.status == 0, r.out);
  const auto w = cli("bench-weak --data " + data + " --r 2 --beta1 1e-10:1e-6:4 --ranks-list 1,2 --reps 1 --base-rows 800 --out " +
                         (dir / "w.csv").string(),
                     dir);
  CHECK_MESSAGE(w.status == 0, w.out);
  std::ifstream in(dir / "w.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "mode,p,reps,total_mean,total_std,io,compute,learn,comm,speedup_or_efficiency");
}
