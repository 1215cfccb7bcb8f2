#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dopinf/bench.hpp"
#include "dopinf/error.hpp"
#include "dopinf/pipeline.hpp"
#include "dopinf/synth_fom.hpp"

namespace fs = std::filesystem;
using namespace dopinf;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;
constexpr int kExitRuntime = 1;

int exit_code(const Error& e) {
  switch (classify(e.code())) {
    case ErrorClass::usage: return kExitUsage;
    case ErrorClass::numerical: return kExitNumerical;
    case ErrorClass::io: return kExitIo;
    case ErrorClass::runtime: return kExitRuntime;
  }
  return kExitRuntime;
}

void report(const Error& e, int rank = -1) {
  std::cerr << "dopinf: error";
  if (rank >= 0) std::cerr << " [rank " << rank << "]";
  std::cerr << ": " << e.what() << '\n';
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_grid(const std::string& spec) {
  const auto parts = split(spec, ':');
  try {
    if (parts.size() == 1) return {std::stod(parts[0])};
    if (parts.size() == 3) return log_grid(std::stod(parts[0]), std::stod(parts[1]), std::stoi(parts[2]));
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
  }
  throw Error(Errc::invalid_argument, "malformed grid '" + spec + "' (expected min:max:count)");
}

std::vector<int> parse_rank_list(const std::string& spec) {
  std::vector<int> out;
  for (const auto& s : split(spec, ',')) {
    try {
      out.push_back(std::stoi(s));
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "malformed rank list '" + spec + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Launching

struct LaunchArgs {
  int ranks = 1;
  std::string backend = "inproc";
  std::string reduce = "rank";
  int rank = -1;
  std::string peers;

  void add(CLI::App* app) {
    app->add_option("--ranks", ranks, "Number of ranks p")->check(CLI::PositiveNumber);
    app->add_option("--backend", backend, "loopback | inproc | socket")->check(CLI::IsMember({"loopback", "inproc", "socket"}));
    app->add_option("--reduce", reduce, "rank | tree")->check(CLI::IsMember({"rank", "tree"}));
    app->add_option("--rank", rank, "Join an existing socket job as this rank");
    app->add_option("--peers", peers, "Comma-separated host:port list of every rank (socket join mode)");
  }

  ReduceMode mode() const { return reduce == "tree" ? ReduceMode::tree : ReduceMode::rank_ordered; }
};

/// Runs `body` on every rank. Returns the process exit status.
int launch(LaunchArgs args, const std::function<void(Communicator&)>& body) {
  if (args.rank < 0) {
    if (const char* env = std::getenv("DOPINF_RANK")) args.rank = std::atoi(env);
  }
  if (args.peers.empty()) {
    if (const char* env = std::getenv("DOPINF_PEERS")) args.peers = env;
  }

  if (args.rank >= 0) {
    const auto peers = split(args.peers, ',');
    if (peers.empty()) throw Error(Errc::invalid_argument, "joining a socket job needs --peers or DOPINF_PEERS");
    auto comm = connect_socket(args.rank, peers);
    comm->set_reduce_mode(args.mode());
    body(*comm);
    return 0;
  }

  const Backend backend = parse_backend(args.backend);
  if (backend != Backend::socket || args.ranks == 1) {
    run_ranks({backend, args.ranks, args.mode()}, body);
    return 0;
  }

  // One process per rank: bind every listener first, then fork.
  std::vector<int> fds;
  std::vector<std::string> peers;
  for (int i = 0; i < args.ranks; ++i) {
    auto [fd, addr] = bind_ephemeral_listener();
    fds.push_back(fd);
    peers.push_back(addr);
  }
  std::cout.flush();
  std::cerr.flush();
  std::vector<pid_t> children;
  int my_rank = 0;
  for (int i = 1; i < args.ranks; ++i) {
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(Errc::transport, "fork failed");
    if (pid == 0) {
      my_rank = i;
      children.clear();
      break;
    }
    children.push_back(pid);
  }
  for (int i = 0; i < args.ranks; ++i)
    if (i != my_rank) ::close(fds[static_cast<std::size_t>(i)]);

  int status = 0;
  try {
    auto comm = connect_socket(my_rank, peers, fds[static_cast<std::size_t>(my_rank)]);
    comm->set_reduce_mode(args.mode());
    body(*comm);
  } catch (const Error& e) {
    report(e, my_rank);
    status = exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "dopinf: error [rank " << my_rank << "]: " << e.what() << '\n';
    status = kExitRuntime;
  }
  if (my_rank != 0) {
    std::cout.flush();
    std::cerr.flush();
    ::_exit(status);
  }
  for (const pid_t pid : children) {
    int ws = 0;
    ::waitpid(pid, &ws, 0);
    const int code = WIFEXITED(ws) ? WEXITSTATUS(ws) : kExitRuntime;
    // A peer's own failure outranks the transport errors it causes elsewhere.
    if (status == 0 || (status == kExitRuntime && code != 0)) status = code;
  }
  return status;
}

// ---------------------------------------------------------------------------
// Training configuration

struct TrainArgs {
  std::string data;
  int r = 0;
  double energy = 0.0;
  std::string beta1 = "1e-10";
  std::string beta2 = "1e-10";
  double tau = 0.5;
  std::string form = "discrete";
  int trial_steps = 0;
  std::uint64_t seed = 0;
  double dt = 0.0;
  std::uint64_t train_cols = 0;
  std::string lift = "identity";
  bool no_transform = false;
  std::string solver = "cholesky";
  std::uint64_t chunk_rows = 0;

  void add(CLI::App* app, bool need_model) {
    app->add_option("--data", data, "Dataset manifest")->required()->check(CLI::ExistingFile);
    if (!need_model) return;
    auto* r_opt = app->add_option("--r", r, "Reduced dimension")->check(CLI::PositiveNumber);
    auto* e_opt = app->add_option("--energy", energy, "Retained-energy threshold in (0, 1]")->check(CLI::Range(0.0, 1.0));
    r_opt->excludes(e_opt);
    app->add_option("--beta1", beta1, "Linear/constant regularization grid min:max:count");
    app->add_option("--beta2", beta2, "Quadratic regularization grid min:max:count");
    app->add_option("--tau", tau, "Growth tolerance of the stability check")->check(CLI::NonNegativeNumber);
    app->add_option("--form", form, "discrete | continuous")->check(CLI::IsMember({"discrete", "continuous"}));
    app->add_option("--trial-steps", trial_steps, "Trial horizon in steps (default: training horizon)")->check(CLI::NonNegativeNumber);
    app->add_option("--seed", seed, "Seed recorded with the run");
    app->add_option("--dt", dt, "Time step of the continuous form");
    app->add_option("--train-cols", train_cols, "Use only the leading columns for training");
    app->add_option("--lift", lift, "identity | reciprocal:<var>");
    app->add_flag("--no-transform", no_transform, "Skip centering and scaling");
    app->add_option("--solver", solver, "cholesky | qr")->check(CLI::IsMember({"cholesky", "qr"}));
  }

  void add_streaming(CLI::App* app) {
    app->add_option("--chunk-rows", chunk_rows, "Stream the Gram from disk in row chunks (needs --no-transform)");
  }

  TrainConfig config() const {
    if (r == 0 && energy == 0.0) throw Error(Errc::invalid_argument, "one of --r or --energy is required");
    TrainConfig cfg;
    cfg.data = data;
    cfg.r = r;
    cfg.energy = energy;
    cfg.transform = !no_transform;
    cfg.lift = LiftSpec::parse(lift);
    cfg.train_cols = train_cols;
    cfg.beta1 = parse_grid(beta1);
    cfg.beta2 = parse_grid(beta2);
    cfg.search.form = parse_form(form);
    cfg.search.dt = dt;
    cfg.search.tau = tau;
    cfg.search.trial_steps = trial_steps;
    cfg.search.solver = solver == "qr" ? LsqSolver::qr : LsqSolver::cholesky;
    cfg.chunk_rows = chunk_rows;
    return cfg;
  }
};

/// Rebuilds this rank's transformed training block from the stored sidecars.
SnapshotPartition transformed_partition(const Manifest& manifest, const RunFiles& files, const ReductionFactors& factors,
                                        int p, int rank, TransformParams& params) {
  params = TransformParams::load(files.transform(rank));
  const bool aligned = std::find(params.stages.begin(), params.stages.end(), TransformStage::center) != params.stages.end();
  SnapshotPartition part = load_partition(manifest, p, rank, aligned);
  const auto n_train = static_cast<Eigen::Index>(factors.gram.rows());
  if (part.block.cols() < n_train) throw Error(Errc::shape_mismatch, "dataset has fewer columns than the training run");
  part.block.conservativeResize(Eigen::NoChange, n_train);
  part.n_cols = static_cast<std::uint64_t>(n_train);
  return apply_transform(std::move(part), params);
}

void print_table(const char* label, const ErrorTable& t) {
  std::printf("%s relative error (time-averaged):", label);
  for (std::size_t v = 0; v < t.vars.size(); ++v) std::printf(" var%u=%.6e", t.vars[v], t.mean(static_cast<Eigen::Index>(v)));
  std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed operator inference toolkit"};
  app.require_subcommand(1);

  // gen-quadratic
  auto* genq = app.add_subcommand("gen-quadratic", "Exact-subspace quadratic dataset with known operators");
  QuadraticGenOptions qopt;
  std::string q_out;
  genq->add_option("--n", qopt.n, "State dimension")->required();
  genq->add_option("--r-star", qopt.r_star, "Intrinsic dimension")->required();
  genq->add_option("--nt", qopt.n_t, "Snapshot count")->required();
  genq->add_option("--seed", qopt.seed, "Random seed");
  genq->add_option("--shards", qopt.shards, "Shard files")->check(CLI::PositiveNumber);
  genq->add_option("--out", q_out, "Manifest path")->required();

  // gen-burgers
  auto* genb = app.add_subcommand("gen-burgers", "Periodic viscous Burgers dataset");
  BurgersOptions bopt;
  std::string b_out, b_ic = "sine";
  genb->add_option("--nx", bopt.n_x, "Grid cells");
  genb->add_option("--nu", bopt.viscosity, "Viscosity");
  genb->add_option("--nt", bopt.n_t, "Saved snapshots (including the initial state)");
  genb->add_option("--dt", bopt.dt, "Solver time step");
  genb->add_option("--stride", bopt.save_stride, "Solver steps per saved snapshot");
  genb->add_option("--ic", b_ic, "zero | sine | bump")->check(CLI::IsMember({"zero", "sine", "bump"}));
  genb->add_option("--shards", bopt.shards, "Shard files")->check(CLI::PositiveNumber);
  genb->add_option("--out", b_out, "Manifest path")->required();

  // train
  auto* train = app.add_subcommand("train", "Dimensionality reduction and operator learning");
  TrainArgs targs;
  LaunchArgs tlaunch;
  std::string t_out;
  targs.add(train, true);
  tlaunch.add(train);
  train->add_option("--out", t_out, "Output directory")->required();

  // rollout
  auto* roll = app.add_subcommand("rollout", "Evolve the learned reduced model");
  std::string r_out;
  std::int64_t r_steps = 0;
  double r_dt = 0.0;
  roll->add_option("--out", r_out, "Training output directory")->required()->check(CLI::ExistingDirectory);
  roll->add_option("--steps", r_steps, "Number of steps")->required()->check(CLI::NonNegativeNumber);
  roll->add_option("--dt", r_dt, "Time step (continuous form; default from the operators)");

  // reconstruct
  auto* recon = app.add_subcommand("reconstruct", "Lift a reduced trajectory back to the full state");
  TrainArgs rargs;
  LaunchArgs rlaunch;
  std::string rc_out;
  bool rc_compare = false;
  rargs.add(recon, false);
  rlaunch.add(recon);
  recon->add_option("--out", rc_out, "Training output directory (holds trajectory.bin)")->required()->check(CLI::ExistingDirectory);
  recon->add_flag("--compare", rc_compare, "Report relative errors against the dataset");

  // probe
  auto* prb = app.add_subcommand("probe", "Extract time series at (variable, cell) probes");
  TrainArgs pargs;
  LaunchArgs plaunch;
  std::string p_out, p_list;
  pargs.add(prb, false);
  plaunch.add(prb);
  prb->add_option("--out", p_out, "Training output directory (holds trajectory.bin)")->required()->check(CLI::ExistingDirectory);
  prb->add_option("--probes", p_list, "var:cell[,var:cell...]")->required();

  // bench-strong / bench-weak
  auto* bs = app.add_subcommand("bench-strong", "Strong scaling: fixed problem size");
  auto* bw = app.add_subcommand("bench-weak", "Weak scaling: fixed rows per rank, B = p");
  TrainArgs bargs;
  std::string bench_ranks = "1,2,4", bench_out, bench_backend = "inproc", bench_reduce = "tree";
  int bench_reps = 3;
  std::uint64_t base_rows = 0;
  for (auto* sub : {bs, bw}) {
    bargs.add(sub, true);
    bargs.add_streaming(sub);
    sub->add_option("--ranks-list", bench_ranks, "Comma-separated rank counts");
    sub->add_option("--reps", bench_reps, "Repetitions per rank count")->check(CLI::PositiveNumber);
    sub->add_option("--backend", bench_backend, "loopback | inproc | socket")->check(CLI::IsMember({"loopback", "inproc", "socket"}));
    sub->add_option("--reduce", bench_reduce, "rank | tree")->check(CLI::IsMember({"rank", "tree"}));
    sub->add_option("--out", bench_out, "Report CSV")->required();
  }
  bw->add_option("--base-rows", base_rows, "Rows per rank")->required();

  // inspect
  auto* insp = app.add_subcommand("inspect", "Print dataset headers and admissible-r bounds");
  std::string i_data;
  std::uint64_t i_nt = 0;
  auto* i_data_opt = insp->add_option("--data", i_data, "Dataset manifest")->check(CLI::ExistingFile);
  insp->add_option("--nt", i_nt, "Snapshot count to bound (instead of a dataset)")->excludes(i_data_opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*genq) {
      const auto truth = gen_subspace_quadratic(q_out, qopt);
      const fs::path truth_path = fs::path(q_out).replace_extension(".truth.bin");
      truth.save(truth_path);
      std::printf("wrote %s (n=%llu, n_t=%llu, r*=%d, seed=%llu) and %s\n", q_out.c_str(), static_cast<unsigned long long>(qopt.n),
                  static_cast<unsigned long long>(qopt.n_t), qopt.r_star, static_cast<unsigned long long>(truth.used_seed),
                  truth_path.c_str());
      return 0;
    }
    if (*genb) {
      bopt.ic = parse_burgers_ic(b_ic);
      gen_burgers(b_out, bopt);
      std::printf("wrote %s (n_x=%llu, n_t=%llu)\n", b_out.c_str(), static_cast<unsigned long long>(bopt.n_x),
                  static_cast<unsigned long long>(bopt.n_t));
      return 0;
    }
    if (*train) {
      const TrainConfig cfg = targs.config();
      const RunFiles files{t_out};
      return launch(tlaunch, [&](Communicator& comm) {
        const TrainResult res = train_rank(comm, cfg);
        save_training(comm, res, cfg, files);
        if (comm.rank() == 0) {
          if (res.factors.truncated)
            std::fprintf(stderr, "dopinf: warning: requested r=%d exceeds the numerical rank %d; using r=%d\n", res.factors.requested_r,
                         res.factors.numerical_rank, res.factors.r);
          std::printf("r=%d (numerical rank %d%s) beta1=%.6g beta2=%.6g training_mse=%.6e owner=%d\n", res.factors.r,
                      res.factors.numerical_rank, res.factors.truncated ? ", truncated" : "", res.outcome.beta1_opt,
                      res.outcome.beta2_opt, res.outcome.error_opt, res.outcome.owner);
          std::printf("wrote %s\n", files.dir.c_str());
        }
      });
    }
    if (*roll) {
      const RunFiles files{r_out};
      const auto factors = ReductionFactors::load(files.factors());
      const auto ops = RomOperators::load(files.operators());
      const Matrix qhat = reduced_trajectory(factors.projection, factors.gram);
      const auto traj = rollout(ops, qhat.col(0), r_steps, r_dt);
      traj.write_csv(files.trajectory_csv());
      traj.save(files.trajectory_bin());
      std::printf("%lld columns%s; wrote %s\n", static_cast<long long>(traj.columns()),
                  traj.diverged ? " (diverged)" : "", files.trajectory_csv().c_str());
      return traj.diverged ? kExitNumerical : 0;
    }
    if (*recon || *prb) {
      const bool is_probe = static_cast<bool>(*prb);
      const TrainArgs& a = is_probe ? pargs : rargs;
      const RunFiles files{is_probe ? p_out : rc_out};
      const auto probes = is_probe ? parse_probes(p_list) : std::vector<Probe>{};
      return launch(is_probe ? plaunch : rlaunch, [&](Communicator& comm) {
        const Manifest manifest = load_manifest(a.data);
        const auto factors = ReductionFactors::load(files.factors());
        const auto traj = ReducedTrajectory::load(files.trajectory_bin());
        TransformParams params;
        const auto part = transformed_partition(manifest, files, factors, comm.size(), comm.rank(), params);
        const auto basis = basis_partition(part, factors.projection);
        const Matrix state = reconstruct(basis, traj.states, params);
        const std::vector<VarCell> map(params.var_map.begin(), params.var_map.begin() + static_cast<std::ptrdiff_t>(params.source_rows));
        if (is_probe) {
          const auto table = probe(state, map, part.plan, probes);
          table.write_csv(files.probes(comm.rank()), traj.times);
          if (!table.empty()) std::printf("rank %d wrote %s\n", comm.rank(), files.probes(comm.rank()).c_str());
          return;
        }
        ByteWriter w;
        w.put_u64(map.size());
        for (const auto& vc : map) {
          w.put_u32(vc.var);
          w.put_u64(vc.cell);
        }
        w.put_matrix(state);
        write_file_bytes(files.reconstruction(comm.rank()), w.bytes());
        if (rc_compare) {
          const auto cols = std::min<Eigen::Index>(state.cols(), static_cast<Eigen::Index>(manifest.header.n_cols));
          const Matrix ref = load_partition(manifest, comm.size(), comm.rank(), params.stages.size() > 0).block;
          const auto table = relative_error(comm, state.leftCols(cols), ref.leftCols(cols), map);
          if (comm.rank() == 0) print_table("reconstruction", table);
        }
        if (comm.rank() == 0) std::printf("wrote %s per rank\n", files.reconstruction(0).c_str());
      });
    }
    if (*bs || *bw) {
      const TrainConfig cfg = bargs.config();
      BenchOptions opts;
      opts.ranks = parse_rank_list(bench_ranks);
      opts.reps = bench_reps;
      opts.backend = parse_backend(bench_backend);
      opts.reduce = bench_reduce == "tree" ? ReduceMode::tree : ReduceMode::rank_ordered;
      const auto rows = *bs ? run_strong(cfg, opts) : run_weak(cfg, base_rows, opts);
      write_report(bench_out, rows);
      std::fputs(report_csv(rows).c_str(), stdout);
      return 0;
    }
    if (*insp) {
      std::uint64_t n_t = i_nt;
      if (!i_data.empty()) {
        const Manifest m = load_manifest(i_data);
        const auto& h = m.header;
        std::printf("n_rows=%llu n_cols=%llu n_vars=%llu rows_per_var=%llu shards=%zu\n", static_cast<unsigned long long>(h.n_rows),
                    static_cast<unsigned long long>(h.n_cols), static_cast<unsigned long long>(h.n_vars),
                    static_cast<unsigned long long>(h.rows_per_var), m.shards.size());
        n_t = h.n_cols;
      }
      if (n_t == 0) throw Error(Errc::invalid_argument, "inspect needs --data or --nt");
      for (auto form : {ModelForm::discrete, ModelForm::continuous})
        std::printf("%s: regression_rows=%llu max_admissible_r=%d (full Kronecker: %d)\n", std::string(form_name(form)).c_str(),
                    static_cast<unsigned long long>(regression_rows(form, n_t)), max_admissible_r(form, n_t),
                    max_admissible_r_full_kronecker(form, n_t));
      return 0;
    }
  } catch (const Error& e) {
    report(e);
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "dopinf: error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
