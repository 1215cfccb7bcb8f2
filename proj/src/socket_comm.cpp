#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include "dopinf/comm.hpp"
#include "dopinf/error.hpp"

namespace dopinf {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint32_t kHelloMagic = 0x44504946;  // "DPIF"

[[noreturn]] void sys_fail(const std::string& what) {
  throw Error(Errc::transport, what + ": " + std::strerror(errno));
}

std::pair<std::string, std::uint16_t> split_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  if (colon == std::string::npos) throw Error(Errc::invalid_argument, "peer address '" + addr + "' is not host:port");
  const int port = std::stoi(addr.substr(colon + 1));
  if (port <= 0 || port > 65535) throw Error(Errc::invalid_argument, "bad port in '" + addr + "'");
  return {addr.substr(0, colon), static_cast<std::uint16_t>(port)};
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  if (inet_pton(AF_INET, host.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr)
    throw Error(Errc::transport, "cannot resolve host '" + host + "'");
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return sa;
}

void write_all(int fd, const std::byte* data, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      sys_fail("send");
    }
    data += k;
    n -= static_cast<std::size_t>(k);
  }
}

/// Returns false on orderly EOF before any byte was read.
bool read_all(int fd, std::byte* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, data + got, n - got, 0);
    if (k == 0) {
      if (got == 0) return false;
      throw Error(Errc::transport, "connection closed mid-frame");
    }
    if (k < 0) {
      if (errno == EINTR) continue;
      sys_fail("recv");
    }
    got += static_cast<std::size_t>(k);
  }
  return true;
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

int listen_on(const std::string& addr) {
  auto [host, port] = split_address(addr);
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) sys_fail("socket");
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa = resolve(host, port);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    ::close(fd);
    sys_fail("bind " + addr);
  }
  if (::listen(fd, 64) != 0) {
    ::close(fd);
    sys_fail("listen");
  }
  return fd;
}

int connect_with_retry(const std::string& addr, Clock::time_point deadline) {
  auto [host, port] = split_address(addr);
  const sockaddr_in sa = resolve(host, port);
  auto backoff = std::chrono::milliseconds(5);
  while (true) {
    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) sys_fail("socket");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa)) == 0) return fd;
    const int err = errno;
    ::close(fd);
    if (Clock::now() >= deadline) {
      errno = err;
      sys_fail("connect " + addr);
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, std::chrono::milliseconds(200));
  }
}

struct Mailbox {
  std::mutex m;
  std::condition_variable cv;
  std::deque<Frame> frames;
  bool closed = false;
  std::string reason;
};

class SocketComm final : public Communicator {
 public:
  SocketComm(int rank, std::vector<std::string> peers, int listen_fd, std::chrono::milliseconds timeout)
      : Communicator(rank, static_cast<int>(peers.size()), Backend::socket),
        timeout_(timeout),
        fds_(peers.size(), -1),
        boxes_(peers.size()) {
    const auto deadline = Clock::now() + timeout;
    if (listen_fd < 0) listen_fd = listen_on(peers[static_cast<std::size_t>(rank)]);
    try {
      // Lower ranks accept, higher ranks connect: every pair gets one link.
      for (int j = 0; j < rank; ++j) {
        int fd = connect_with_retry(peers[static_cast<std::size_t>(j)], deadline);
        ByteWriter hello;
        hello.put_u32(kHelloMagic);
        hello.put_u32(static_cast<std::uint32_t>(rank));
        write_all(fd, hello.bytes().data(), hello.bytes().size());
        set_nodelay(fd);
        fds_[static_cast<std::size_t>(j)] = fd;
      }
      for (int pending = size() - 1 - rank; pending > 0; --pending) {
        pollfd pfd{listen_fd, POLLIN, 0};
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
        if (left <= 0 || ::poll(&pfd, 1, static_cast<int>(left)) <= 0)
          throw Error(Errc::transport, "rank " + std::to_string(rank) + " timed out waiting for peers to connect");
        int fd = ::accept(listen_fd, nullptr, nullptr);
        if (fd < 0) sys_fail("accept");
        std::byte raw[8];
        if (!read_all(fd, raw, sizeof(raw))) throw Error(Errc::transport, "peer hung up during handshake");
        ByteReader r(raw);
        const auto magic = r.get_u32();
        const auto peer = r.get_u32();
        if (magic != kHelloMagic || peer <= static_cast<std::uint32_t>(rank) || peer >= static_cast<std::uint32_t>(size()) ||
            fds_[peer] >= 0) {
          ::close(fd);
          throw Error(Errc::transport, "unexpected handshake on rank " + std::to_string(rank));
        }
        set_nodelay(fd);
        fds_[peer] = fd;
      }
    } catch (...) {
      ::close(listen_fd);
      close_all();
      throw;
    }
    ::close(listen_fd);
    for (std::size_t j = 0; j < fds_.size(); ++j)
      if (fds_[j] >= 0) readers_.emplace_back([this, j] { read_loop(j); });
  }

  ~SocketComm() override {
    for (int fd : fds_)
      if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
    for (auto& t : readers_) t.join();
    close_all();
  }

 protected:
  void send_frame(int dst, Frame frame) override {
    const auto wire = encode_frame(frame);
    write_all(fds_[static_cast<std::size_t>(dst)], wire.data(), wire.size());
  }

  Frame recv_frame(int src) override {
    auto& box = boxes_[static_cast<std::size_t>(src)];
    std::unique_lock lk(box.m);
    if (!box.cv.wait_for(lk, timeout_, [&] { return !box.frames.empty() || box.closed; }))
      throw Error(Errc::transport, "rank " + std::to_string(rank()) + " timed out waiting for rank " + std::to_string(src));
    if (box.frames.empty())
      throw Error(Errc::transport, "rank " + std::to_string(rank()) + " abandoned: lost rank " + std::to_string(src) + " (" + box.reason + ")");
    Frame f = std::move(box.frames.front());
    box.frames.pop_front();
    return f;
  }

 private:
  void read_loop(std::size_t peer) {
    auto& box = boxes_[peer];
    std::string reason = "connection closed";
    try {
      while (true) {
        std::byte len_raw[8];
        if (!read_all(fds_[peer], len_raw, sizeof(len_raw))) break;
        const auto len = ByteReader(len_raw).get_u64();
        if (len < 16 || len > (std::uint64_t{1} << 36)) throw Error(Errc::transport, "implausible frame length");
        Bytes body(len);
        if (!read_all(fds_[peer], body.data(), body.size())) throw Error(Errc::transport, "connection closed mid-frame");
        Frame f = decode_frame(body);
        {
          std::lock_guard lk(box.m);
          box.frames.push_back(std::move(f));
        }
        box.cv.notify_all();
      }
    } catch (const std::exception& e) {
      reason = e.what();
    }
    {
      std::lock_guard lk(box.m);
      box.closed = true;
      box.reason = reason;
    }
    box.cv.notify_all();
  }

  void close_all() {
    for (int& fd : fds_) {
      if (fd >= 0) ::close(fd);
      fd = -1;
    }
  }

  std::chrono::milliseconds timeout_;
  std::vector<int> fds_;
  std::vector<Mailbox> boxes_;
  std::vector<std::thread> readers_;
};

}  // namespace

std::unique_ptr<Communicator> connect_socket(int rank, std::vector<std::string> peers, int listen_fd,
                                             std::chrono::milliseconds timeout) {
  if (peers.empty() || rank < 0 || rank >= static_cast<int>(peers.size()))
    throw Error(Errc::invalid_argument, "rank outside the peer list");
  return std::make_unique<SocketComm>(rank, std::move(peers), listen_fd, timeout);
}

std::pair<int, std::string> bind_ephemeral_listener() {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) sys_fail("socket");
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = 0;
  sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 || ::listen(fd, 64) != 0) {
    ::close(fd);
    sys_fail("bind ephemeral");
  }
  socklen_t len = sizeof(sa);
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len) != 0) {
    ::close(fd);
    sys_fail("getsockname");
  }
  return {fd, "127.0.0.1:" + std::to_string(ntohs(sa.sin_port))};
}

}  // namespace dopinf
