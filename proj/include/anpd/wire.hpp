#pragma once

// Newline-delimited JSON over TCP: a client-side ModelOracle that proxies a
// remote model, and the server that exposes any in-process oracle.
//
//   -> {"op":"extend","tokens":[...]}   <- {"ok":true,"predictions":[...]}
//   -> {"op":"reset"}                   <- {"ok":true}
//   -> {"op":"info"}                    <- {"ok":true,"vocab_size":N,"eos":E}
//   errors                              <- {"ok":false,"error":"..."}
//
// One request in flight per connection. "eos" is -1 when the model has none.

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"

#include "anpd/model_oracle.hpp"
#include "anpd/types.hpp"

namespace anpd {

namespace net {

inline constexpr std::size_t kMaxLineBytes = 64u << 20;

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { close(); }

  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

struct HostPort {
  std::string host;
  std::string port;
};

inline HostPort split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon + 1 == address.size()) {
    throw std::invalid_argument("address '" + address + "' must look like HOST:PORT");
  }
  HostPort hp{address.substr(0, colon), address.substr(colon + 1)};
  if (hp.host.empty()) hp.host = "0.0.0.0";
  return hp;
}

struct AddrInfoDeleter {
  void operator()(addrinfo* ai) const { ::freeaddrinfo(ai); }
};

inline std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const HostPort& hp, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(hp.host.c_str(), hp.port.c_str(), &hints, &res); rc != 0) {
    throw OracleError(OracleError::Kind::connect,
                      "cannot resolve " + hp.host + ":" + hp.port + ": " + ::gai_strerror(rc));
  }
  return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}

/// Buffered line I/O over a connected stream socket.
class LineChannel {
 public:
  LineChannel() = default;
  explicit LineChannel(Fd fd) : fd_(std::move(fd)) {}

  int fd() const { return fd_.get(); }

  void set_timeout(std::chrono::milliseconds timeout) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
    ::setsockopt(fd_.get(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    ::setsockopt(fd_.get(), SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
  }

  void write_line(std::string_view line) {
    std::string buf(line);
    buf += '\n';
    std::size_t sent = 0;
    while (sent < buf.size()) {
      const ssize_t n = ::send(fd_.get(), buf.data() + sent, buf.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw OracleError(OracleError::Kind::timeout, "send timed out");
        throw OracleError(OracleError::Kind::transport, std::string("send failed: ") + std::strerror(errno));
      }
      sent += std::size_t(n);
    }
  }

  /// Next line without its terminator; nullopt on orderly EOF.
  std::optional<std::string> read_line() {
    for (;;) {
      if (auto nl = buf_.find('\n'); nl != std::string::npos) {
        std::string line = buf_.substr(0, nl);
        buf_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      if (buf_.size() > kMaxLineBytes) throw OracleError(OracleError::Kind::protocol, "line exceeds size limit");
      char chunk[4096];
      const ssize_t n = ::recv(fd_.get(), chunk, sizeof chunk, 0);
      if (n == 0) return std::nullopt;
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) throw OracleError(OracleError::Kind::timeout, "receive timed out");
        throw OracleError(OracleError::Kind::transport, std::string("receive failed: ") + std::strerror(errno));
      }
      buf_.append(chunk, std::size_t(n));
    }
  }

  void shutdown() { ::shutdown(fd_.get(), SHUT_RDWR); }

 private:
  Fd fd_;
  std::string buf_;
};

inline LineChannel connect(const std::string& address, std::chrono::milliseconds timeout) {
  const auto hp = split_address(address);
  auto res = resolve(hp, false);
  std::string last_error = "no addresses";
  for (addrinfo* ai = res.get(); ai; ai = ai->ai_next) {
    Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (!fd) continue;
    LineChannel ch(std::move(fd));
    ch.set_timeout(timeout);
    if (::connect(ch.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      int one = 1;
      ::setsockopt(ch.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return ch;
    }
    last_error = std::strerror(errno);
  }
  throw OracleError(OracleError::Kind::connect, "cannot connect to " + address + ": " + last_error);
}

/// Listening socket. Port 0 binds an ephemeral port; see port().
class Listener {
 public:
  explicit Listener(const std::string& address) {
    const auto hp = split_address(address);
    auto res = resolve(hp, true);
    std::string last_error = "no addresses";
    for (addrinfo* ai = res.get(); ai; ai = ai->ai_next) {
      Fd fd(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
      if (!fd) continue;
      int one = 1;
      ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd.get(), ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd.get(), 64) == 0) {
        fd_ = std::move(fd);
        break;
      }
      last_error = std::strerror(errno);
    }
    if (!fd_) throw std::runtime_error("cannot listen on " + address + ": " + last_error);
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    ::getsockname(fd_.get(), reinterpret_cast<sockaddr*>(&ss), &len);
    port_ = ss.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port)
                                     : ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  }

  int port() const { return port_; }

  /// Blocks until a client connects or `stop` flips; nullopt when stopped.
  std::optional<LineChannel> accept(const std::atomic<bool>& stop) {
    while (!stop.load()) {
      pollfd p{fd_.get(), POLLIN, 0};
      const int rc = ::poll(&p, 1, 100);
      if (rc <= 0) continue;
      Fd client(::accept(fd_.get(), nullptr, nullptr));
      if (!client) continue;
      int one = 1;
      ::setsockopt(client.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return LineChannel(std::move(client));
    }
    return std::nullopt;
  }

 private:
  Fd fd_;
  int port_ = 0;
};

}  // namespace net

/// ModelOracle proxied over the wire protocol. The remote side has no cache
/// truncation, so rollbacks fall back to reset + replay.
class ExternalOracle final : public ModelOracle {
 public:
  static std::unique_ptr<ExternalOracle> connect(const std::string& endpoint,
                                                 std::chrono::milliseconds timeout = std::chrono::seconds(10)) {
    auto oracle = std::unique_ptr<ExternalOracle>(new ExternalOracle(endpoint, net::connect(endpoint, timeout)));
    const auto reply = oracle->request({{"op", "info"}});
    if (!reply.contains("vocab_size") || !reply["vocab_size"].is_number_unsigned()) {
      throw OracleError(OracleError::Kind::protocol, "info reply from " + endpoint + " lacks vocab_size");
    }
    oracle->info_.vocab_size = reply["vocab_size"].get<std::size_t>();
    if (reply.contains("eos") && reply["eos"].is_number_integer() && reply["eos"].get<long long>() >= 0) {
      oracle->info_.eos = reply["eos"].get<TokenId>();
    }
    return oracle;
  }

  TokenSequence extend(TokenSpan tokens) override {
    if (tokens.empty()) throw std::invalid_argument("extend needs at least one token");
    const auto reply = request({{"op", "extend"}, {"tokens", tokens}});
    if (!reply.contains("predictions") || !reply["predictions"].is_array()) {
      throw protocol_error("extend reply lacks a predictions array");
    }
    TokenSequence preds;
    preds.reserve(tokens.size());
    for (const auto& p : reply["predictions"]) {
      if (!p.is_number_integer()) throw protocol_error("non-integer prediction");
      preds.push_back(p.get<TokenId>());
    }
    if (preds.size() != tokens.size()) {
      throw protocol_error("extend of " + std::to_string(tokens.size()) + " tokens returned " +
                           std::to_string(preds.size()) + " predictions");
    }
    consumed_ += tokens.size();
    return preds;
  }

  void reset() override {
    request({{"op", "reset"}});
    consumed_ = 0;
  }

  std::size_t consumed_len() const override { return consumed_; }
  OracleInfo info() const override { return info_; }
  const std::string& endpoint() const { return endpoint_; }

 private:
  ExternalOracle(std::string endpoint, net::LineChannel channel)
      : endpoint_(std::move(endpoint)), channel_(std::move(channel)) {}

  OracleError protocol_error(const std::string& what) const {
    return OracleError(OracleError::Kind::protocol, endpoint_ + ": " + what);
  }

  nlohmann::json request(const nlohmann::json& msg) {
    const std::string op = msg["op"].get<std::string>();
    try {
      channel_.write_line(msg.dump());
      auto line = channel_.read_line();
      if (!line) {
        throw OracleError(OracleError::Kind::transport, "server closed the connection during '" + op + "'");
      }
      nlohmann::json reply;
      try {
        reply = nlohmann::json::parse(*line);
      } catch (const nlohmann::json::parse_error&) {
        throw OracleError(OracleError::Kind::protocol, "malformed reply to '" + op + "'");
      }
      if (!reply.is_object() || !reply.contains("ok") || !reply["ok"].is_boolean()) {
        throw OracleError(OracleError::Kind::protocol, "reply to '" + op + "' lacks a boolean \"ok\"");
      }
      if (!reply["ok"].get<bool>()) {
        throw OracleError(OracleError::Kind::remote, "server rejected '" + op + "': " + reply.value("error", std::string("?")));
      }
      return reply;
    } catch (const OracleError& e) {
      throw OracleError(e.kind(), endpoint_ + " (after " + std::to_string(consumed_) + " consumed tokens): " + e.what());
    }
  }

  std::string endpoint_;
  net::LineChannel channel_;
  OracleInfo info_;
  std::size_t consumed_ = 0;
};

/// Serves the wire protocol. Each connection gets a fresh oracle from the
/// factory; connections never share cache state.
class OracleServer {
 public:
  using Factory = std::function<std::unique_ptr<ModelOracle>()>;

  OracleServer(const std::string& address, Factory factory, std::ostream* log = &std::cerr)
      : listener_(address), factory_(std::move(factory)), log_(log) {}

  ~OracleServer() { stop(); }

  int port() const { return listener_.port(); }

  /// Accept loop; returns after stop().
  void serve() {
    std::size_t next_id = 0;
    while (auto channel = listener_.accept(stopping_)) {
      const std::size_t id = ++next_id;
      auto shared = std::make_shared<net::LineChannel>(std::move(*channel));
      std::lock_guard lock(mu_);
      if (stopping_.load()) break;
      connections_.push_back(shared);
      workers_.emplace_back([this, shared, id] { handle(*shared, id); });
    }
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mu_);
      for (auto& weak : connections_) {
        if (auto c = weak.lock()) c->shutdown();
      }
      workers.swap(workers_);
    }
    for (auto& t : workers) {
      if (t.joinable()) t.join();
    }
  }

  /// Applies one request line to `oracle`; exposed for tests.
  static nlohmann::json handle_request(ModelOracle& oracle, const std::string& line) {
    auto error = [](const std::string& msg) { return nlohmann::json{{"ok", false}, {"error", msg}}; };
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      return error(std::string("malformed json: ") + e.what());
    }
    if (!req.is_object() || !req.contains("op") || !req["op"].is_string()) return error("request needs a string \"op\"");
    const auto op = req["op"].get<std::string>();
    try {
      if (op == "extend") {
        if (!req.contains("tokens") || !req["tokens"].is_array() || req["tokens"].empty()) {
          return error("extend needs a non-empty \"tokens\" array");
        }
        TokenSequence tokens;
        for (const auto& t : req["tokens"]) {
          if (!t.is_number_integer() || t.get<long long>() < 0) return error("tokens must be non-negative integers");
          tokens.push_back(t.get<TokenId>());
        }
        return {{"ok", true}, {"predictions", oracle.extend(tokens)}};
      }
      if (op == "reset") {
        oracle.reset();
        return {{"ok", true}};
      }
      if (op == "info") {
        const auto info = oracle.info();
        return {{"ok", true}, {"vocab_size", info.vocab_size}, {"eos", info.eos ? *info.eos : -1}};
      }
    } catch (const std::exception& e) {
      return error(e.what());
    }
    return error("unknown op '" + op + "'");
  }

 private:
  void handle(net::LineChannel& channel, std::size_t id) {
    std::size_t requests = 0;
    std::string status = "closed";
    try {
      auto oracle = factory_();
      while (auto line = channel.read_line()) {
        ++requests;
        channel.write_line(handle_request(*oracle, *line).dump());
      }
    } catch (const std::exception& e) {
      status = std::string("dropped (") + e.what() + ")";
    }
    log("connection " + std::to_string(id) + " " + status + " after " + std::to_string(requests) + " requests");
  }

  void log(const std::string& line) {
    if (!log_) return;
    std::lock_guard lock(log_mu_);
    *log_ << "[serve-oracle] " << line << std::endl;
  }

  net::Listener listener_;
  Factory factory_;
  std::ostream* log_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::mutex log_mu_;
  std::vector<std::weak_ptr<net::LineChannel>> connections_;
  std::vector<std::thread> workers_;
};

}  // namespace anpd
