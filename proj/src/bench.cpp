#include "dopinf/bench.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dopinf/error.hpp"

namespace dopinf {

PipelineTimings PhaseTimings::mean() const {
  PipelineTimings m;
  if (runs.empty()) return m;
  for (const auto& t : runs) {
    m.io += t.io;
    m.compute += t.compute;
    m.learn += t.learn;
    m.comm += t.comm;
    m.total += t.total;
  }
  const double n = static_cast<double>(runs.size());
  m.io /= n;
  m.compute /= n;
  m.learn /= n;
  m.comm /= n;
  m.total /= n;
  return m;
}

double PhaseTimings::total_std() const {
  if (runs.size() < 2) return 0.0;
  const double mu = mean().total;
  double ss = 0.0;
  for (const auto& t : runs) ss += (t.total - mu) * (t.total - mu);
  return std::sqrt(ss / static_cast<double>(runs.size() - 1));
}

PipelineTimings phase_timer(const LaunchOptions& launch, const TrainConfig& cfg) {
  PipelineTimings out;
  run_ranks(launch, [&](Communicator& comm) {
    const TrainResult res = train_rank(comm, cfg);
    ByteWriter w;
    w.put_f64(res.timings.io);
    w.put_f64(res.timings.compute);
    w.put_f64(res.timings.learn);
    w.put_f64(res.timings.comm);
    w.put_f64(res.timings.total);
    const auto all = comm.allgather(std::move(w).take());
    if (comm.rank() == 0) {
      ByteReader r(all[static_cast<std::size_t>(res.outcome.owner)]);
      out.io = r.get_f64();
      out.compute = r.get_f64();
      out.learn = r.get_f64();
      out.comm = r.get_f64();
      out.total = r.get_f64();
    }
  });
  return out;
}

namespace {

void check_options(const BenchOptions& opts) {
  if (opts.ranks.empty()) throw Error(Errc::invalid_argument, "benchmark needs at least one rank count");
  if (opts.reps < 1) throw Error(Errc::invalid_argument, "benchmark needs at least one repetition");
  for (int p : opts.ranks)
    if (p < 1) throw Error(Errc::invalid_argument, "rank counts must be positive");
}

BenchRow summarize(const std::string& mode, const PhaseTimings& t) {
  const auto m = t.mean();
  BenchRow row;
  row.mode = mode;
  row.p = t.p;
  row.reps = static_cast<int>(t.runs.size());
  row.total_mean = m.total;
  row.total_std = t.total_std();
  row.io = m.io;
  row.compute = m.compute;
  row.learn = m.learn;
  row.comm = m.comm;
  return row;
}

std::vector<BenchRow> sweep(const std::string& mode, const BenchOptions& opts, const std::function<TrainConfig(int)>& config_for) {
  check_options(opts);
  std::vector<BenchRow> rows;
  for (int p : opts.ranks) {
    PhaseTimings t;
    t.p = p;
    const TrainConfig cfg = config_for(p);
    for (int rep = 0; rep < opts.reps; ++rep) t.runs.push_back(phase_timer({opts.backend, p, opts.reduce}, cfg));
    rows.push_back(summarize(mode, t));
  }
  const auto base = std::min_element(rows.begin(), rows.end(), [](const BenchRow& a, const BenchRow& b) { return a.p < b.p; });
  const double t_base = base->total_mean;
  const int p_base = base->p;
  for (auto& row : rows) {
    row.speedup_or_efficiency = row.total_mean > 0.0 ? t_base / row.total_mean : 0.0;
    row.ideal = mode == "strong" ? static_cast<double>(row.p) / p_base : 1.0;
  }
  return rows;
}

}  // namespace

std::vector<BenchRow> run_strong(const TrainConfig& cfg, const BenchOptions& opts) {
  const Manifest m = load_manifest(cfg.data);
  for (int p : opts.ranks)
    if (static_cast<std::uint64_t>(p) > m.header.n_rows)
      throw Error(Errc::invalid_partition, "rank count " + std::to_string(p) + " exceeds the dataset's " + std::to_string(m.header.n_rows) + " rows");
  return sweep("strong", opts, [&](int) { return cfg; });
}

std::vector<BenchRow> run_weak(const TrainConfig& cfg, std::uint64_t rows_per_rank, const BenchOptions& opts) {
  if (rows_per_rank == 0) throw Error(Errc::invalid_argument, "rows per rank must be positive");
  const Manifest m = load_manifest(cfg.data);
  if (m.header.n_vars != 1) throw Error(Errc::invalid_argument, "weak scaling truncates rows and needs a single-variable dataset");
  for (int p : opts.ranks)
    if (rows_per_rank * static_cast<std::uint64_t>(p) > m.header.n_rows)
      throw Error(Errc::invalid_partition, "weak scaling at p=" + std::to_string(p) + " needs " + std::to_string(rows_per_rank * p) +
                                               " rows but the dataset has " + std::to_string(m.header.n_rows));
  const double lo = cfg.beta1.front(), hi = cfg.beta1.back();
  return sweep("weak", opts, [&](int p) {
    TrainConfig c = cfg;
    c.row_limit = rows_per_rank * static_cast<std::uint64_t>(p);
    c.beta1 = log_grid(lo, hi, p);
    c.beta2 = {cfg.beta2.front()};
    return c;
  });
}

std::string report_csv(const std::vector<BenchRow>& rows) {
  std::string out = std::string(kBenchHeader) + "\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.mode.c_str(), r.p, r.reps, r.total_mean,
                  r.total_std, r.io, r.compute, r.learn, r.comm, r.speedup_or_efficiency);
    out += buf;
  }
  return out;
}

void write_report(const std::filesystem::path& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out << report_csv(rows);
  if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

std::vector<BenchRow> parse_report(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kBenchHeader) throw Error(Errc::corrupt_dataset, "benchmark report header mismatch");
  std::vector<BenchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw Error(Errc::corrupt_dataset, "benchmark report row has " + std::to_string(f.size()) + " fields");
    BenchRow r;
    try {
      r.mode = f[0];
      r.p = std::stoi(f[1]);
      r.reps = std::stoi(f[2]);
      r.total_mean = std::stod(f[3]);
      r.total_std = std::stod(f[4]);
      r.io = std::stod(f[5]);
      r.compute = std::stod(f[6]);
      r.learn = std::stod(f[7]);
      r.comm = std::stod(f[8]);
      r.speedup_or_efficiency = std::stod(f[9]);
    } catch (const std::exception&) {
      throw Error(Errc::corrupt_dataset, "malformed benchmark report row: " + line);
    }
    if (r.mode != "strong" && r.mode != "weak") throw Error(Errc::corrupt_dataset, "unknown benchmark mode '" + r.mode + "'");
    rows.push_back(r);
  }
  return rows;
}

}  // namespace dopinf
