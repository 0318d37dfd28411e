#pragma once

// Task-blind batch serving. The server owns exactly one artifact, the frozen
// backbone, and runs the same forward path for every request; whatever
// personalization exists arrived inside the envelope as a client-computed
// prefix. There is deliberately no task identifier anywhere on the wire.
//
// Transport: length-prefixed frames (u32 LE length, then payload) over TCP.
// Requests are PrefixEnvelope frames; responses are WireResponse frames.
// Requests accumulate until either `batch_window` of them are pending or
// `batch_timeout_ms` elapsed since the first one, then one inference pass
// answers the whole batch.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lopa/transformer.hpp"
#include "lopa/util.hpp"
#include "lopa/wire.hpp"

namespace lopa {

// ---------------------------------------------------------------------------
// Batch inference, transport-free.
// ---------------------------------------------------------------------------
struct BatchResultItem {
  std::uint64_t request_id = 0;
  std::vector<float> logits;
  RequestReject reject = RequestReject::kNone;
  bool ok() const { return reject == RequestReject::kNone; }
};

struct BatchResult {
  std::vector<BatchResultItem> items;  // one per request, input order
  std::size_t batch_size = 0;
};

/// Runs every envelope through the identical forward path. A bad envelope
/// rejects that single request, never the batch. Duplicate request ids are
/// answered independently (results stay keyed by position).
inline BatchResult server_step(const ToyTransformerT<float>& fm, const std::vector<PrefixEnvelope>& batch) {
  BatchResult result;
  result.batch_size = batch.size();
  result.items.reserve(batch.size());
  for (const auto& env : batch) {
    BatchResultItem item;
    item.request_id = env.request_id;
    if (env.m > 0 && env.d != fm.cfg.d) {
      item.reject = RequestReject::kDimMismatch;
    } else if (env.tokens.empty()) {
      item.reject = RequestReject::kBadTokens;
    } else if (env.tokens.size() + env.m > fm.cfg.n_max) {
      item.reject = RequestReject::kTooLong;
    } else {
      bool ids_ok = true;
      for (std::uint32_t t : env.tokens) ids_ok = ids_ok && t < fm.cfg.vocab;
      if (!ids_ok) {
        item.reject = RequestReject::kBadTokens;
      } else {
        const MatrixF prefix =
            env.m > 0 ? env.prefix_matrix() : MatrixF(fm.cfg.d, 0);
        const MatrixF logits = forward_with_prefix(fm, prefix, env.tokens);
        item.logits = logits.data();
      }
    }
    result.items.push_back(std::move(item));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Framed socket helpers.
// ---------------------------------------------------------------------------
namespace net {

inline constexpr std::uint32_t kMaxFrameBytes = 1u << 26;  // 64 MiB sanity cap

inline void write_all(int fd, const void* data, std::size_t len) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  while (len > 0) {
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n <= 0) throw RemoteError("connection closed while writing");
    p += n;
    len -= static_cast<std::size_t>(n);
  }
}

inline bool read_all(int fd, void* data, std::size_t len) {
  auto* p = static_cast<std::uint8_t*>(data);
  while (len > 0) {
    const ssize_t n = ::recv(fd, p, len, 0);
    if (n == 0) return false;  // clean EOF
    if (n < 0) throw RemoteError("connection error while reading");
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

inline void write_frame(int fd, const std::vector<std::uint8_t>& payload) {
  std::uint8_t header[4];
  const auto len = static_cast<std::uint32_t>(payload.size());
  for (int i = 0; i < 4; ++i) header[i] = static_cast<std::uint8_t>(len >> (8 * i));
  write_all(fd, header, 4);
  if (!payload.empty()) write_all(fd, payload.data(), payload.size());
}

/// nullopt on clean EOF before a frame starts; throws on mid-frame EOF or
/// an oversized declared length.
inline std::optional<std::vector<std::uint8_t>> read_frame(int fd) {
  std::uint8_t header[4];
  if (!read_all(fd, header, 4)) return std::nullopt;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(header[i]) << (8 * i);
  if (len > kMaxFrameBytes) throw RemoteError("frame length " + std::to_string(len) + " exceeds the cap");
  std::vector<std::uint8_t> payload(len);
  if (len > 0 && !read_all(fd, payload.data(), len)) throw RemoteError("connection closed mid-frame");
  return payload;
}

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close_fd();
      fd_ = other.fd_;
      other.fd_ = -1;
    }
    return *this;
  }
  ~Socket() { close_fd(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close_fd() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

inline Socket connect_to(const std::string& host, std::uint16_t port) {
  Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock.valid()) throw RemoteError("cannot create socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
    throw RemoteError("cannot parse host address " + host);
  if (::connect(sock.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
    throw RemoteError("cannot connect to " + host + ":" + std::to_string(port));
  const int one = 1;
  ::setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return sock;
}

}  // namespace net

// ---------------------------------------------------------------------------
// The serving loop.
// ---------------------------------------------------------------------------
struct ServeConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;          // 0: pick an ephemeral port
  std::size_t batch_window = 16;   // flush at this many pending requests
  int batch_timeout_ms = 10;       // or this long after the first one
};

class PrefixServer {
 public:
  PrefixServer(ToyTransformerT<float> fm, ServeConfig cfg) : fm_(std::move(fm)), cfg_(cfg) {}

  ~PrefixServer() { stop(); }

  void start() {
    listen_ = net::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listen_.valid()) throw RemoteError("cannot create listen socket");
    const int one = 1;
    ::setsockopt(listen_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(cfg_.port);
    if (::inet_pton(AF_INET, cfg_.host.c_str(), &addr.sin_addr) != 1)
      throw RemoteError("cannot parse listen address " + cfg_.host);
    if (::bind(listen_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw RemoteError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    if (::listen(listen_.fd(), 64) != 0) throw RemoteError("cannot listen");

    socklen_t len = sizeof(addr);
    ::getsockname(listen_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);

    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    batch_thread_ = std::thread([this] { batch_loop(); });
    log_info("serving on " + cfg_.host + ":" + std::to_string(port_));
  }

  void stop() {
    bool expected = true;
    if (!running_.compare_exchange_strong(expected, false)) return;
    ::shutdown(listen_.fd(), SHUT_RDWR);
    listen_.close_fd();
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (auto& conn : conns_)
        if (conn->sock.valid()) ::shutdown(conn->sock.fd(), SHUT_RDWR);
    }
    queue_cv_.notify_all();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (batch_thread_.joinable()) batch_thread_.join();
    std::vector<std::thread> readers;
    {
      std::lock_guard<std::mutex> lock(mu_);
      readers = std::move(reader_threads_);
      conns_.clear();
    }
    for (auto& t : readers)
      if (t.joinable()) t.join();
  }

  std::uint16_t port() const { return port_; }

  /// Requests answered so far and the largest batch the worker has run;
  /// exposed for throughput reporting.
  std::size_t requests_served() const { return served_.load(); }
  std::size_t max_batch_seen() const { return max_batch_.load(); }

 private:
  struct Connection {
    net::Socket sock;
    std::mutex write_mu;
    std::atomic<bool> open{true};
  };

  struct PendingRequest {
    std::shared_ptr<Connection> conn;
    PrefixEnvelope env;
  };

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_.fd(), nullptr, nullptr);
      if (fd < 0) {
        if (!running_) break;
        continue;
      }
      auto conn = std::make_shared<Connection>();
      conn->sock = net::Socket(fd);
      std::lock_guard<std::mutex> lock(mu_);
      conns_.push_back(conn);
      reader_threads_.emplace_back([this, conn] { reader_loop(conn); });
    }
  }

  void reader_loop(std::shared_ptr<Connection> conn) {
    try {
      while (running_) {
        auto frame = net::read_frame(conn->sock.fd());
        if (!frame) break;
        PrefixEnvelope env = deserialize(*frame);  // malformed frame -> drop this connection only
        {
          std::lock_guard<std::mutex> lock(queue_mu_);
          queue_.push_back(PendingRequest{conn, std::move(env)});
        }
        queue_cv_.notify_one();
      }
    } catch (const std::exception& e) {
      log_debug(std::string("closing connection: ") + e.what());
    }
    conn->open = false;
    conn->sock.close_fd();
  }

  void batch_loop() {
    while (running_) {
      std::vector<PendingRequest> batch;
      {
        std::unique_lock<std::mutex> lock(queue_mu_);
        queue_cv_.wait(lock, [this] { return !queue_.empty() || !running_; });
        if (!running_) break;
        // Size-or-timeout window, measured from the first pending request.
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(cfg_.batch_timeout_ms);
        while (queue_.size() < cfg_.batch_window && running_) {
          if (queue_cv_.wait_until(lock, deadline) == std::cv_status::timeout) break;
        }
        const std::size_t take = std::min(queue_.size(), cfg_.batch_window);
        batch.assign(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.begin() + take));
        queue_.erase(queue_.begin(), queue_.begin() + take);
      }
      if (batch.empty()) continue;

      std::vector<PrefixEnvelope> envelopes;
      envelopes.reserve(batch.size());
      for (auto& p : batch) envelopes.push_back(p.env);
      const BatchResult result = server_step(fm_, envelopes);
      max_batch_.store(std::max(max_batch_.load(), result.batch_size));

      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto& conn = batch[i].conn;
        if (!conn->open) continue;
        const auto& item = result.items[i];
        const auto payload = item.ok() ? encode_response(item.request_id, item.logits)
                                       : encode_reject(item.request_id, item.reject);
        std::lock_guard<std::mutex> lock(conn->write_mu);
        try {
          net::write_frame(conn->sock.fd(), payload);
          served_.fetch_add(1);
        } catch (const std::exception&) {
          conn->open = false;
        }
      }
    }
  }

  ToyTransformerT<float> fm_;
  ServeConfig cfg_;
  net::Socket listen_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::thread batch_thread_;

  std::mutex mu_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::vector<std::thread> reader_threads_;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<PendingRequest> queue_;

  std::atomic<std::size_t> served_{0};
  std::atomic<std::size_t> max_batch_{0};
};

/// One blocking request-response round trip. Throws RemoteError on transport
/// failure or when the server rejected the request.
inline std::vector<float> query(const std::string& host, std::uint16_t port, const PrefixEnvelope& env) {
  net::Socket sock = net::connect_to(host, port);
  net::write_frame(sock.fd(), serialize(env));
  auto frame = net::read_frame(sock.fd());
  if (!frame) throw RemoteError("server closed the connection without answering");
  const DecodedResponse resp = decode_response(*frame);
  if (!resp.ok())
    throw RemoteError("server rejected request " + std::to_string(resp.request_id) + ": reject code " +
                      std::to_string(static_cast<std::uint32_t>(resp.reject)));
  return resp.logits;
}

}  // namespace lopa
