#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <random>

#include "dopinf/error.hpp"
#include "dopinf/snapshot_store.hpp"
#include "support.hpp"

using namespace dopinf;

namespace {

Matrix stack(const Manifest& m, const PartitionPlan& plan) {
  Matrix out(static_cast<Eigen::Index>(m.header.n_rows), static_cast<Eigen::Index>(m.header.n_cols));
  for (int rank = 0; rank < plan.ranks; ++rank) {
    const auto part = read_partition(m, plan, rank);
    Eigen::Index local = 0;
    for (const auto& seg : plan.segments(rank))
      for (std::uint64_t i = 0; i < seg.count; ++i) out.row(static_cast<Eigen::Index>(seg.begin + i)) = part.block.row(local++);
  }
  return out;
}

}  // namespace

TEST_CASE("row-balanced plans spread the remainder over the lowest ranks") {
  const auto a = plan_partition(10, 3, Alignment::row_balanced);
  CHECK(a.row_counts == std::vector<std::uint64_t>{4, 3, 3});
  CHECK(a.row_offsets == std::vector<std::uint64_t>{0, 4, 7});

  const auto b = plan_partition(8, 1, Alignment::row_balanced);
  CHECK(b.row_counts == std::vector<std::uint64_t>{8});
  CHECK(b.row_offsets == std::vector<std::uint64_t>{0});
}

TEST_CASE("variable-aligned plan gives every rank all variables of its cells") {
  const auto plan = plan_partition(12, 2, Alignment::variable_aligned, 4);
  REQUIRE(plan.row_counts.size() == 2);
  CHECK(plan.row_counts[0] == 6);
  CHECK(plan.row_counts[1] == 6);
  CHECK(plan.cell_offsets == std::vector<std::uint64_t>{0, 2});
  CHECK(plan.cell_counts == std::vector<std::uint64_t>{2, 2});

  const auto segs = plan.segments(1);
  REQUIRE(segs.size() == 3);
  for (std::uint64_t v = 0; v < 3; ++v) {
    CHECK(segs[v].begin == v * 4 + 2);
    CHECK(segs[v].count == 2);
  }
  const auto map = variable_map(plan, 1);
  REQUIRE(map.size() == 6);
  CHECK(map[0] == VarCell{0, 2});
  CHECK(map[5] == VarCell{2, 3});
}

TEST_CASE("partition plans are exhaustive and disjoint") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t n = 1 + rng() % 500;
    const int p = 1 + static_cast<int>(rng() % std::min<std::uint64_t>(n, 17));
    const auto plan = plan_partition(n, p, Alignment::row_balanced);
    std::vector<int> seen(n, 0);
    std::uint64_t total = 0;
    for (int r = 0; r < p; ++r) {
      total += plan.row_counts[static_cast<std::size_t>(r)];
      if (r > 0) CHECK(plan.row_offsets[static_cast<std::size_t>(r)] > plan.row_offsets[static_cast<std::size_t>(r - 1)]);
      for (const auto& s : plan.segments(r))
        for (std::uint64_t i = s.begin; i < s.begin + s.count; ++i) ++seen[i];
    }
    CHECK(total == n);
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  }
}

TEST_CASE("variable-aligned plans are exhaustive") {
  for (std::uint64_t vars : {1u, 2u, 3u})
    for (std::uint64_t cells : {5u, 9u})
      for (int p = 1; p <= static_cast<int>(cells); ++p) {
        const auto plan = plan_partition(vars * cells, p, Alignment::variable_aligned, cells);
        std::vector<int> seen(vars * cells, 0);
        for (int r = 0; r < p; ++r) {
          const auto map = variable_map(plan, r);
          CHECK(map.size() == plan.row_counts[static_cast<std::size_t>(r)]);
          for (const auto& vc : map) ++seen[vc.var * cells + vc.cell];
        }
        CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
      }
}

TEST_CASE("invalid plans are rejected") {
  auto code = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;
  };
  CHECK(code([] { plan_partition(3, 4, Alignment::row_balanced); }) == Errc::invalid_partition);
  CHECK(code([] { plan_partition(6, 4, Alignment::variable_aligned, 3); }) == Errc::invalid_partition);
  CHECK(code([] { plan_partition(5, 0, Alignment::row_balanced); }) == Errc::invalid_partition);
}

TEST_CASE("shards split rows with the remainder first") {
  testing::TempDir dir("store");
  const Matrix m4 = testing::gaussian(4, 2, 1);
  const auto a = write_dataset(m4, DatasetHeader::make(4, 2), 2, dir / "a.manifest");
  REQUIRE(a.shards.size() == 2);
  CHECK(a.shards[0].row_count == 2);
  CHECK(a.shards[1].row_count == 2);

  const Matrix m5 = testing::gaussian(5, 2, 2);
  const auto b = write_dataset(m5, DatasetHeader::make(5, 2), 2, dir / "b.manifest");
  REQUIRE(b.shards.size() == 2);
  CHECK(b.shards[0].row_count == 3);
  CHECK(b.shards[1].row_count == 2);
  CHECK(b.shards[1].start_row == 3);

  const auto reloaded = load_manifest(dir / "b.manifest");
  CHECK(reloaded.header.n_rows == 5);
  CHECK(reloaded.header.n_cols == 2);
  CHECK(reloaded.shards.size() == 2);
}

TEST_CASE("shard files carry the fixed header and a column-major payload") {
  testing::TempDir dir("store");
  Matrix m(3, 2);
  m << 1, 4, 2, 5, 3, 6;
  const auto man = write_dataset(m, DatasetHeader::make(3, 2), 1, dir / "d.manifest");
  const auto bytes = read_file_bytes(man.shard_path(man.shards[0]));
  REQUIRE(bytes.size() == kShardHeaderBytes + 6 * sizeof(double));
  CHECK(std::memcmp(bytes.data(), kShardMagic, 8) == 0);
  ByteReader r(bytes);
  r.get_raw(8);
  CHECK(r.get_u32() == 1);
  CHECK(r.get_u32() == 1);
  CHECK(r.get_u32() == 1);
  CHECK(r.get_u32() == 1);
  CHECK(r.get_u64() == 3);
  CHECK(r.get_u64() == 2);
  CHECK(r.get_u64() == 3);
  CHECK(r.get_u64() == 0);
  CHECK(r.get_u64() == 3);
  for (double expect : {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}) CHECK(r.get_f64() == expect);

  std::ifstream in(dir / "d.manifest");
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("dopinf-manifest v1 n_rows=3 n_cols=2 n_vars=1", 0) == 0);
}

TEST_CASE("round trip is bit-exact for any shard count and rank count") {
  testing::TempDir dir("store");
  const Matrix m = testing::gaussian(37, 5, 3);
  for (std::size_t shards : {1u, 2u, 5u, 37u}) {
    const auto man = write_dataset(m, DatasetHeader::make(37, 5), shards, dir / ("s" + std::to_string(shards) + ".manifest"));
    for (int p : {1, 2, 3, 8}) {
      const Matrix got = stack(man, plan_partition(37, p, Alignment::row_balanced));
      CHECK(std::memcmp(got.data(), m.data(), sizeof(double) * static_cast<std::size_t>(m.size())) == 0);
    }
  }
}

TEST_CASE("p=2 on a 4-row dataset splits rows 0-1 and 2-3") {
  testing::TempDir dir("store");
  const Matrix m = testing::gaussian(4, 3, 4);
  const auto man = write_dataset(m, DatasetHeader::make(4, 3), 3, dir / "x.manifest");
  const auto plan = plan_partition(4, 2, Alignment::row_balanced);
  const auto r0 = read_partition(man, plan, 0);
  const auto r1 = read_partition(man, plan, 1);
  CHECK(r0.block == m.topRows(2));
  CHECK(r1.block == m.bottomRows(2));
  CHECK(r1.var_map[0] == VarCell{0, 2});
}

TEST_CASE("variable-aligned reads assemble the right rows across shards") {
  testing::TempDir dir("store");
  const Matrix m = testing::gaussian(12, 3, 5);
  const auto man = write_dataset(m, DatasetHeader::make(12, 3, 3), 5, dir / "v.manifest");
  const auto plan = plan_partition(12, 2, Alignment::variable_aligned, 4);
  const auto part = read_partition(man, plan, 1);
  REQUIRE(part.block.rows() == 6);
  for (Eigen::Index i = 0; i < 6; ++i) {
    const auto& vc = part.var_map[static_cast<std::size_t>(i)];
    CHECK(part.block.row(i) == m.row(static_cast<Eigen::Index>(vc.var * 4 + vc.cell)));
  }
}

TEST_CASE("streaming writer matches the matrix writer") {
  testing::TempDir dir("store");
  const Matrix m = testing::gaussian(20, 4, 6);
  write_dataset(m, DatasetHeader::make(20, 4), 3, dir / "a.manifest");
  write_dataset(DatasetHeader::make(20, 4), 3, dir / "b.manifest", [&](std::uint64_t start, Matrix& block) {
    block = m.middleRows(static_cast<Eigen::Index>(start), block.rows());
  });
  const auto ma = load_manifest(dir / "a.manifest");
  const auto mb = load_manifest(dir / "b.manifest");
  for (std::size_t s = 0; s < ma.shards.size(); ++s) CHECK(testing::same_bytes(ma.shard_path(ma.shards[s]), mb.shard_path(mb.shards[s])));
}

TEST_CASE("damaged datasets are reported") {
  testing::TempDir dir("store");
  const Matrix m = testing::gaussian(6, 2, 7);
  const auto man = write_dataset(m, DatasetHeader::make(6, 2), 2, dir / "d.manifest");
  const auto plan = plan_partition(6, 1, Alignment::row_balanced);

  SUBCASE("truncated shard") {
    std::filesystem::resize_file(man.shard_path(man.shards[1]), kShardHeaderBytes + 8);
    CHECK_THROWS_AS(read_partition(load_manifest(dir / "d.manifest"), plan, 0), Error);
    try {
      read_partition(load_manifest(dir / "d.manifest"), plan, 0);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::corrupt_dataset);
    }
  }
  SUBCASE("missing shard") {
    std::filesystem::remove(man.shard_path(man.shards[0]));
    try {
      read_partition(load_manifest(dir / "d.manifest"), plan, 0);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::io);
    }
  }
  SUBCASE("bad magic") {
    std::fstream f(man.shard_path(man.shards[0]), std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXXXXXX", 8);
    f.close();
    try {
      read_partition(load_manifest(dir / "d.manifest"), plan, 0);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::corrupt_dataset);
    }
  }
  SUBCASE("missing manifest") {
    try {
      load_manifest(dir / "nope.manifest");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::io);
    }
  }
}

TEST_CASE("header invariants") {
  auto h = DatasetHeader::make(12, 3, 3);
  CHECK(h.rows_per_var == 4);
  CHECK_NOTHROW(h.validate());
  h.rows_per_var = 5;
  CHECK_THROWS_AS(h.validate(), Error);
  h = DatasetHeader::make(12, 3, 3);
  h.scalar_kind = 2;
  CHECK_THROWS_AS(h.validate(), Error);
  h = DatasetHeader::make(12, 3, 3);
  h.layout = 7;
  CHECK_THROWS_AS(h.validate(), Error);
}

TEST_CASE("matrix and header must agree") {
  testing::TempDir dir("store");
  try {
    write_dataset(testing::gaussian(4, 2, 1), DatasetHeader::make(5, 2), 1, dir / "bad.manifest");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
}
