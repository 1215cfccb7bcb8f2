#pragma once

// Message-passing layer used by every distributed step.
//
// All collectives are built from point-to-point frames tagged with a
// (collective id, sequence number, source rank) triple. Reductions gather
// every contribution and fold them in ascending rank order on every rank, so
// the loopback, in-process and socket backends return bit-identical results.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dopinf/binio.hpp"

namespace dopinf {

enum class Backend { loopback, inproc, socket };

std::string_view backend_name(Backend b) noexcept;
Backend parse_backend(std::string_view name);

/// Rank-ordered folding is the default; `tree` uses a binomial reduce +
/// broadcast (deterministic for a fixed p, but not across p).
enum class ReduceMode { rank_ordered, tree };

enum class CollectiveId : std::uint32_t {
  allgather = 1,
  reduce_tree = 2,
  broadcast = 3,
  barrier = 4,
};

struct Frame {
  std::uint32_t collective = 0;
  std::uint32_t src = 0;
  std::uint64_t seq = 0;
  Bytes payload;
};

/// Candidate key for the distributed argmin. Ordered lexicographically on
/// (error, beta1, beta2, owner); infeasible candidates carry +inf error.
struct ArgminKey {
  double error = std::numeric_limits<double>::infinity();
  double beta1 = 0.0;
  double beta2 = 0.0;
  int owner = 0;

  friend bool operator<(const ArgminKey& a, const ArgminKey& b) noexcept;
  friend bool operator==(const ArgminKey&, const ArgminKey&) = default;
};

class Communicator {
 public:
  Communicator(int rank, int size, Backend backend);
  virtual ~Communicator() = default;
  Communicator(const Communicator&) = delete;
  Communicator& operator=(const Communicator&) = delete;

  int rank() const noexcept { return rank_; }
  int size() const noexcept { return size_; }
  Backend backend() const noexcept { return backend_; }

  void set_reduce_mode(ReduceMode m) noexcept { mode_ = m; }
  ReduceMode reduce_mode() const noexcept { return mode_; }

  /// Element-wise sum of equally-shaped matrices, delivered to every rank.
  Eigen::MatrixXd allreduce_sum_matrix(const Eigen::MatrixXd& local);
  std::vector<double> allreduce_max_vector(std::span<const double> local);
  ArgminKey allreduce_argmin(const ArgminKey& local);
  std::vector<Bytes> allgather(Bytes local);
  Bytes broadcast(Bytes data, int root);
  void barrier();

  /// Wall time spent inside collectives since construction (or last reset).
  double comm_seconds() const noexcept { return comm_seconds_; }
  void reset_comm_seconds() noexcept { comm_seconds_ = 0.0; }
  std::uint64_t collectives_issued() const noexcept { return seq_; }

 protected:
  virtual void send_frame(int dst, Frame frame) = 0;
  virtual Frame recv_frame(int src) = 0;

 private:
  class Scope;
  Frame expect(int src, CollectiveId id);
  void post(int dst, CollectiveId id, Bytes payload);
  Eigen::MatrixXd tree_sum(const Eigen::MatrixXd& local);

  int rank_;
  int size_;
  Backend backend_;
  ReduceMode mode_ = ReduceMode::rank_ordered;
  std::uint64_t seq_ = 0;
  double comm_seconds_ = 0.0;
};

/// Default time a blocking receive waits before declaring the peer lost.
std::chrono::milliseconds default_comm_timeout();

struct LaunchOptions {
  Backend backend = Backend::inproc;
  int ranks = 1;
  ReduceMode mode = ReduceMode::rank_ordered;
  std::chrono::milliseconds timeout = default_comm_timeout();
};

/// Runs `body` once per rank inside this process (threads; loopback
/// serializes them so only one logical rank executes at a time; socket
/// connects the threads over localhost TCP). Rethrows the first rank failure.
void run_ranks(const LaunchOptions& opts, const std::function<void(Communicator&)>& body);

/// Socket endpoint for multi-process runs. `peers[i]` is "host:port" of rank
/// i. When `listen_fd` >= 0 it is an already-bound listening socket for this
/// rank; otherwise the rank binds its own entry in `peers`.
std::unique_ptr<Communicator> connect_socket(int rank, std::vector<std::string> peers, int listen_fd = -1,
                                             std::chrono::milliseconds timeout = default_comm_timeout());

/// Binds a listening socket on 127.0.0.1 with an ephemeral port.
/// Returns (fd, "127.0.0.1:port").
std::pair<int, std::string> bind_ephemeral_listener();

/// Encodes one frame as it travels on a socket: u64 body length, u32
/// collective, u32 source rank, u64 sequence, payload (all little-endian).
Bytes encode_frame(const Frame& f);
Frame decode_frame(std::span<const std::byte> body);

}  // namespace dopinf
