#include "dopinf/comm.hpp"

#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <tuple>

#include "dopinf/error.hpp"

namespace dopinf {

std::string_view backend_name(Backend b) noexcept {
  switch (b) {
    case Backend::loopback: return "loopback";
    case Backend::inproc: return "inproc";
    case Backend::socket: return "socket";
  }
  return "?";
}

Backend parse_backend(std::string_view name) {
  if (name == "loopback") return Backend::loopback;
  if (name == "inproc") return Backend::inproc;
  if (name == "socket") return Backend::socket;
  throw Error(Errc::invalid_argument, "unknown backend '" + std::string(name) + "'");
}

std::chrono::milliseconds default_comm_timeout() {
  if (const char* env = std::getenv("DOPINF_COMM_TIMEOUT_MS")) {
    try {
      return std::chrono::milliseconds(std::stoll(env));
    } catch (const std::exception&) {
    }
  }
  return std::chrono::milliseconds(120000);
}

bool operator<(const ArgminKey& a, const ArgminKey& b) noexcept {
  auto err = [](double e) { return e != e ? std::numeric_limits<double>::infinity() : e; };
  return std::tuple(err(a.error), a.beta1, a.beta2, a.owner) < std::tuple(err(b.error), b.beta1, b.beta2, b.owner);
}

// ---------------------------------------------------------------------------
// Collectives

class Communicator::Scope {
 public:
  explicit Scope(Communicator& c) : c_(c), t0_(std::chrono::steady_clock::now()) { ++c_.seq_; }
  ~Scope() { c_.comm_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  Communicator& c_;
  std::chrono::steady_clock::time_point t0_;
};

Communicator::Communicator(int rank, int size, Backend backend) : rank_(rank), size_(size), backend_(backend) {
  if (size < 1 || rank < 0 || rank >= size) throw Error(Errc::invalid_argument, "rank must satisfy 0 <= rank < size");
}

void Communicator::post(int dst, CollectiveId id, Bytes payload) {
  send_frame(dst, Frame{static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(rank_), seq_, std::move(payload)});
}

Frame Communicator::expect(int src, CollectiveId id) {
  Frame f = recv_frame(src);
  if (f.src != static_cast<std::uint32_t>(src) || f.collective != static_cast<std::uint32_t>(id) || f.seq != seq_) {
    throw Error(Errc::collective_contract,
                "rank " + std::to_string(rank_) + " expected collective " + std::to_string(static_cast<std::uint32_t>(id)) + " #" +
                    std::to_string(seq_) + " from rank " + std::to_string(src) + " but received collective " +
                    std::to_string(f.collective) + " #" + std::to_string(f.seq) + " from rank " + std::to_string(f.src));
  }
  return f;
}

std::vector<Bytes> Communicator::allgather(Bytes local) {
  Scope scope(*this);
  for (int dst = 0; dst < size_; ++dst)
    if (dst != rank_) post(dst, CollectiveId::allgather, local);
  std::vector<Bytes> all(static_cast<std::size_t>(size_));
  for (int src = 0; src < size_; ++src)
    all[static_cast<std::size_t>(src)] = src == rank_ ? std::move(local) : expect(src, CollectiveId::allgather).payload;
  return all;
}

Bytes Communicator::broadcast(Bytes data, int root) {
  if (root < 0 || root >= size_) throw Error(Errc::invalid_argument, "broadcast root out of range");
  Scope scope(*this);
  if (rank_ == root) {
    for (int dst = 0; dst < size_; ++dst)
      if (dst != rank_) post(dst, CollectiveId::broadcast, data);
    return data;
  }
  return expect(root, CollectiveId::broadcast).payload;
}

void Communicator::barrier() {
  Scope scope(*this);
  for (int dst = 0; dst < size_; ++dst)
    if (dst != rank_) post(dst, CollectiveId::barrier, {});
  for (int src = 0; src < size_; ++src)
    if (src != rank_) expect(src, CollectiveId::barrier);
}

namespace {

Bytes pack_matrix(const Eigen::MatrixXd& m) {
  ByteWriter w;
  w.put_u64(static_cast<std::uint64_t>(m.rows()));
  w.put_u64(static_cast<std::uint64_t>(m.cols()));
  w.put_doubles({m.data(), static_cast<std::size_t>(m.size())});
  return std::move(w).take();
}

Eigen::MatrixXd unpack_matrix(const Bytes& b) {
  ByteReader r(b);
  const auto rows = static_cast<Eigen::Index>(r.get_u64());
  const auto cols = static_cast<Eigen::Index>(r.get_u64());
  Eigen::MatrixXd m(rows, cols);
  r.get_doubles({m.data(), static_cast<std::size_t>(m.size())});
  return m;
}

}  // namespace

Eigen::MatrixXd Communicator::allreduce_sum_matrix(const Eigen::MatrixXd& local) {
  if (size_ == 1) {
    Scope scope(*this);
    return local;
  }
  if (mode_ == ReduceMode::tree) return tree_sum(local);

  auto parts = allgather(pack_matrix(local));
  Eigen::MatrixXd sum;
  for (int src = 0; src < size_; ++src) {
    Eigen::MatrixXd m = unpack_matrix(parts[static_cast<std::size_t>(src)]);
    if (m.rows() != local.rows() || m.cols() != local.cols())
      throw Error(Errc::collective_contract, "rank " + std::to_string(src) + " contributed a " + std::to_string(m.rows()) + "x" +
                                                 std::to_string(m.cols()) + " matrix, rank " + std::to_string(rank_) + " a " +
                                                 std::to_string(local.rows()) + "x" + std::to_string(local.cols()) + " one");
    if (src == 0)
      sum = std::move(m);
    else
      sum += m;
  }
  return sum;
}

Eigen::MatrixXd Communicator::tree_sum(const Eigen::MatrixXd& local) {
  Scope scope(*this);
  Eigen::MatrixXd acc = local;
  // Binomial reduction towards rank 0.
  for (int mask = 1; mask < size_; mask <<= 1) {
    if (rank_ & mask) {
      post(rank_ - mask, CollectiveId::reduce_tree, pack_matrix(acc));
      break;
    }
    if (rank_ + mask < size_) {
      Eigen::MatrixXd other = unpack_matrix(expect(rank_ + mask, CollectiveId::reduce_tree).payload);
      if (other.rows() != acc.rows() || other.cols() != acc.cols())
        throw Error(Errc::collective_contract, "tree reduction received a mismatched matrix from rank " + std::to_string(rank_ + mask));
      acc += other;
    }
  }
  // Binomial broadcast from rank 0.
  int mask = 1;
  while (mask < size_) mask <<= 1;
  for (mask >>= 1; mask > 0; mask >>= 1) {
    if (rank_ % (2 * mask) == 0) {
      if (rank_ + mask < size_) post(rank_ + mask, CollectiveId::broadcast, pack_matrix(acc));
    } else if (rank_ % mask == 0) {
      acc = unpack_matrix(expect(rank_ - mask, CollectiveId::broadcast).payload);
    }
  }
  return acc;
}

std::vector<double> Communicator::allreduce_max_vector(std::span<const double> local) {
  ByteWriter w;
  w.put_u64(local.size());
  w.put_doubles(local);
  auto parts = allgather(std::move(w).take());
  std::vector<double> out(local.begin(), local.end());
  std::vector<double> tmp(local.size());
  for (int src = 0; src < size_; ++src) {
    ByteReader r(parts[static_cast<std::size_t>(src)]);
    if (r.get_u64() != local.size())
      throw Error(Errc::collective_contract, "rank " + std::to_string(src) + " contributed a vector of different length");
    r.get_doubles(tmp);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], tmp[i]);
  }
  return out;
}

ArgminKey Communicator::allreduce_argmin(const ArgminKey& local) {
  ByteWriter w;
  w.put_f64(local.error);
  w.put_f64(local.beta1);
  w.put_f64(local.beta2);
  w.put_u32(static_cast<std::uint32_t>(local.owner));
  auto parts = allgather(std::move(w).take());
  std::optional<ArgminKey> best;
  for (const auto& p : parts) {
    ByteReader r(p);
    ArgminKey k;
    k.error = r.get_f64();
    k.beta1 = r.get_f64();
    k.beta2 = r.get_f64();
    k.owner = static_cast<int>(r.get_u32());
    if (!best || k < *best) best = k;
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Wire encoding

Bytes encode_frame(const Frame& f) {
  ByteWriter w;
  w.put_u64(16 + f.payload.size());
  w.put_u32(f.collective);
  w.put_u32(f.src);
  w.put_u64(f.seq);
  Bytes out = std::move(w).take();
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

Frame decode_frame(std::span<const std::byte> body) {
  if (body.size() < 16) throw Error(Errc::transport, "frame shorter than its header");
  ByteReader r(body.first(16));
  Frame f;
  f.collective = r.get_u32();
  f.src = r.get_u32();
  f.seq = r.get_u64();
  f.payload.assign(body.begin() + 16, body.end());
  return f;
}

// ---------------------------------------------------------------------------
// In-process and loopback backends

namespace {

/// Queues indexed [dst][src]. `guard` protects every queue; in loopback mode
/// it doubles as the baton that only the running logical rank holds.
struct Fabric {
  explicit Fabric(int p, std::chrono::milliseconds timeout)
      : ranks(p), queues(static_cast<std::size_t>(p * p)), cvs(static_cast<std::size_t>(p)), timeout(timeout) {}

  std::deque<Frame>& queue(int dst, int src) { return queues[static_cast<std::size_t>(dst * ranks + src)]; }

  int ranks;
  std::mutex guard;
  std::vector<std::deque<Frame>> queues;
  std::vector<std::condition_variable> cvs;
  std::chrono::milliseconds timeout;
  int failed_rank = -1;
};

[[noreturn]] void throw_peer_failure(int self, int peer) {
  throw Error(Errc::transport, "rank " + std::to_string(self) + " abandoned: rank " + std::to_string(peer) + " failed");
}

class InProcComm final : public Communicator {
 public:
  InProcComm(int rank, Fabric& fabric) : Communicator(rank, fabric.ranks, Backend::inproc), fabric_(fabric) {}

 protected:
  void send_frame(int dst, Frame frame) override {
    {
      std::lock_guard lk(fabric_.guard);
      fabric_.queue(dst, rank()).push_back(std::move(frame));
    }
    fabric_.cvs[static_cast<std::size_t>(dst)].notify_all();
  }

  Frame recv_frame(int src) override {
    std::unique_lock lk(fabric_.guard);
    auto& q = fabric_.queue(rank(), src);
    auto ready = [&] { return !q.empty() || fabric_.failed_rank >= 0; };
    if (!fabric_.cvs[static_cast<std::size_t>(rank())].wait_for(lk, fabric_.timeout, ready))
      throw Error(Errc::transport, "rank " + std::to_string(rank()) + " timed out waiting for rank " + std::to_string(src));
    if (q.empty()) throw_peer_failure(rank(), fabric_.failed_rank);
    Frame f = std::move(q.front());
    q.pop_front();
    return f;
  }

 private:
  Fabric& fabric_;
};

class LoopbackComm final : public Communicator {
 public:
  LoopbackComm(int rank, Fabric& fabric, std::unique_lock<std::mutex>& baton)
      : Communicator(rank, fabric.ranks, Backend::loopback), fabric_(fabric), baton_(baton) {}

 protected:
  void send_frame(int dst, Frame frame) override {
    fabric_.queue(dst, rank()).push_back(std::move(frame));
    fabric_.cvs[static_cast<std::size_t>(dst)].notify_all();
  }

  Frame recv_frame(int src) override {
    auto& q = fabric_.queue(rank(), src);
    auto ready = [&] { return !q.empty() || fabric_.failed_rank >= 0; };
    // Waiting hands the baton to whichever logical rank can make progress.
    if (!fabric_.cvs[static_cast<std::size_t>(rank())].wait_for(baton_, fabric_.timeout, ready))
      throw Error(Errc::transport, "logical rank " + std::to_string(rank()) + " timed out waiting for rank " + std::to_string(src));
    if (q.empty()) throw_peer_failure(rank(), fabric_.failed_rank);
    Frame f = std::move(q.front());
    q.pop_front();
    return f;
  }

 private:
  Fabric& fabric_;
  std::unique_lock<std::mutex>& baton_;
};

bool is_abandonment(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const Error& err) {
    return err.code() == Errc::transport && std::string_view(err.what()).find("abandoned") != std::string_view::npos;
  } catch (...) {
    return false;
  }
}

void rethrow_first(const std::vector<std::exception_ptr>& errors) {
  // Prefer the root cause over the peers it took down with it.
  for (const auto& e : errors)
    if (e && !is_abandonment(e)) std::rethrow_exception(e);
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void mark_failed(Fabric& fabric, int rank, bool already_locked) {
  if (!already_locked) {
    std::lock_guard lk(fabric.guard);
    if (fabric.failed_rank < 0) fabric.failed_rank = rank;
  } else if (fabric.failed_rank < 0) {
    fabric.failed_rank = rank;
  }
  for (auto& cv : fabric.cvs) cv.notify_all();
}

}  // namespace

void run_ranks(const LaunchOptions& opts, const std::function<void(Communicator&)>& body) {
  if (opts.ranks < 1) throw Error(Errc::invalid_argument, "rank count must be at least 1");
  const auto p = static_cast<std::size_t>(opts.ranks);
  std::vector<std::exception_ptr> errors(p);

  if (opts.backend == Backend::socket) {
    std::vector<int> fds(p);
    std::vector<std::string> peers(p);
    for (std::size_t i = 0; i < p; ++i) std::tie(fds[i], peers[i]) = bind_ephemeral_listener();
    std::vector<std::unique_ptr<Communicator>> comms(p);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < p; ++i) {
      threads.emplace_back([&, i] {
        try {
          comms[i] = connect_socket(static_cast<int>(i), peers, fds[i], opts.timeout);
          comms[i]->set_reduce_mode(opts.mode);
          body(*comms[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
        // Closing the sockets lets peers blocked on this rank fail fast.
        if (errors[i]) comms[i].reset();
      });
    }
    for (auto& t : threads) t.join();
    comms.clear();
    rethrow_first(errors);
    return;
  }

  Fabric fabric(opts.ranks, opts.timeout);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < p; ++i) {
    threads.emplace_back([&, i] {
      const int rank = static_cast<int>(i);
      if (opts.backend == Backend::loopback) {
        std::unique_lock baton(fabric.guard);
        try {
          LoopbackComm comm(rank, fabric, baton);
          comm.set_reduce_mode(opts.mode);
          body(comm);
        } catch (...) {
          errors[i] = std::current_exception();
          mark_failed(fabric, rank, true);
        }
      } else {
        try {
          InProcComm comm(rank, fabric);
          comm.set_reduce_mode(opts.mode);
          body(comm);
        } catch (...) {
          errors[i] = std::current_exception();
          mark_failed(fabric, rank, false);
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  rethrow_first(errors);
}

}  // namespace dopinf
