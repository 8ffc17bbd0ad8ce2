#pragma once

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "stmp/core.hpp"
#include "stmp/denoisers.hpp"

extern char** environ;

namespace stmp {

/// Environment variable that overrides the configured external-denoiser address.
inline constexpr const char* kDenoiserAddressEnv = "STMP_DENOISER_ADDRESS";

namespace detail {

inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

inline void ignore_sigpipe() {
  static const bool once = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

}  // namespace detail

/// Newline-delimited byte channel over a pair of file descriptors.
class LineChannel {
 public:
  LineChannel(int read_fd, int write_fd, std::chrono::milliseconds timeout)
      : read_fd_(read_fd), write_fd_(write_fd), timeout_(timeout) {}
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;
  ~LineChannel() { close(); }

  void close() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    read_fd_ = write_fd_ = -1;
  }

  void send_line(std::string_view line) {
    std::string buf(line);
    buf.push_back('\n');
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t k = ::write(write_fd_, buf.data() + off, buf.size() - off);
      if (k < 0) {
        if (errno == EINTR) continue;
        throw TransportError(detail::errno_text("external denoiser: write failed"));
      }
      off += static_cast<std::size_t>(k);
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
      if (const auto nl = pending_.find('\n'); nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw TransportError("external denoiser: timed out waiting for response");
      pollfd p{read_fd_, POLLIN, 0};
      const int ready = ::poll(&p, 1, static_cast<int>(left.count()));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw TransportError(detail::errno_text("external denoiser: poll failed"));
      }
      if (ready == 0) continue;
      char chunk[65536];
      const ssize_t k = ::read(read_fd_, chunk, sizeof chunk);
      if (k < 0) {
        if (errno == EINTR) continue;
        throw TransportError(detail::errno_text("external denoiser: read failed"));
      }
      if (k == 0)
        throw TransportError(pending_.empty() ? "external denoiser: connection closed"
                                              : "external denoiser: connection closed mid-response");
      pending_.append(chunk, static_cast<std::size_t>(k));
    }
  }

 private:
  int read_fd_;
  int write_fd_;
  std::chrono::milliseconds timeout_;
  std::string pending_;
};

/// Child process driven over its stdin/stdout, started via /bin/sh -c.
class ChildProcess {
 public:
  explicit ChildProcess(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0) throw TransportError(detail::errno_text("pipe"));
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw TransportError(detail::errno_text("pipe"));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    const char* argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
    const int rc = ::posix_spawn(&pid_, "/bin/sh", &actions, nullptr, const_cast<char* const*>(argv), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
      ::close(to_child[1]);
      ::close(from_child[0]);
      errno = rc;
      throw TransportError(detail::errno_text("posix_spawn"));
    }
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }
  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() {
    if (pid_ <= 0) return;
    int status = 0;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) != 0) return;
      ::usleep(10000);
    }
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, &status, 0);
  }

  // Ownership of the descriptors passes to the caller.
  int release_read_fd() { return std::exchange(read_fd_, -1); }
  int release_write_fd() { return std::exchange(write_fd_, -1); }

 private:
  pid_t pid_ = -1;
  int read_fd_ = -1;
  int write_fd_ = -1;
};

inline int connect_tcp(const std::string& host, const std::string& port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
    throw TransportError("external denoiser: cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype | SOCK_CLOEXEC, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw TransportError("external denoiser: cannot connect to " + host + ":" + port);
  return fd;
}

/// Parsed denoiser address: "cmd:<shell command>" or "tcp:<host>:<port>".
struct DenoiserAddress {
  enum class Kind { command, tcp };
  Kind kind;
  std::string target;  // command line, or host
  std::string port;

  static DenoiserAddress parse(const std::string& s) {
    if (s.rfind("cmd:", 0) == 0 && s.size() > 4) return {Kind::command, s.substr(4), {}};
    if (s.rfind("tcp:", 0) == 0) {
      const auto rest = s.substr(4);
      const auto colon = rest.rfind(':');
      if (colon != std::string::npos && colon > 0 && colon + 1 < rest.size())
        return {Kind::tcp, rest.substr(0, colon), rest.substr(colon + 1)};
    }
    throw InvalidArgument("denoiser address must be cmd:<command> or tcp:<host>:<port>, got '" + s + "'");
  }
};

/// Module-B client for the NDJSON denoiser protocol. One request in flight;
/// not safe to share between concurrent runs.
class ExternalDenoiser {
 public:
  ExternalDenoiser(const std::string& address, std::size_t n,
                   std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : n_(n) {
    require(n >= 1, "ExternalDenoiser: dimension must be >= 1");
    detail::ignore_sigpipe();
    const auto addr = DenoiserAddress::parse(address);
    if (addr.kind == DenoiserAddress::Kind::command) {
      child_ = std::make_unique<ChildProcess>(addr.target);
      const int rfd = child_->release_read_fd();
      channel_ = std::make_unique<LineChannel>(rfd, child_->release_write_fd(), timeout);
    } else {
      const int fd = connect_tcp(addr.target, addr.port);
      channel_ = std::make_unique<LineChannel>(fd, fd, timeout);
    }
    channel_->send_line(nlohmann::json{{"hello", {{"n", n_}}}}.dump());
    const auto reply = receive();
    if (!(reply.is_object() && reply.contains("ok") && reply["ok"] == true))
      throw ProtocolError("external denoiser: bad handshake reply: " + reply.dump());
  }

  ~ExternalDenoiser() {
    // Close our ends first so the child sees EOF before ChildProcess reaps it.
    channel_.reset();
  }

  std::size_t dimension() const { return n_; }

  DenoiserOutput operator()(std::span<const double> r, double v) {
    require_same_size(r.size(), n_, "external denoiser request");
    if (!(v > 0.0)) throw InvalidArgument("external denoiser: v must be positive");
    const std::uint64_t id = ++next_id_;
    nlohmann::json req{{"id", id}, {"v", v}, {"r", std::vector<double>(r.begin(), r.end())}};
    channel_->send_line(req.dump());
    const auto resp = receive();
    if (!resp.contains("id") || !resp["id"].is_number_unsigned() || resp["id"].get<std::uint64_t>() != id)
      throw ProtocolError("external denoiser: response id does not match request " + std::to_string(id));
    if (!resp.contains("mean") || !resp["mean"].is_array() || !resp.contains("variance"))
      throw ProtocolError("external denoiser: response lacks mean/variance");
    const auto& mean = resp["mean"];
    require_same_size(mean.size(), n_, "external denoiser response mean");
    DenoiserOutput out{Vector(n_), 0.0};
    for (std::size_t i = 0; i < n_; ++i) out.mean[i] = number_or_nan(mean[i]);
    out.variance = number_or_nan(resp["variance"]);
    if (!all_finite(out.mean) || !std::isfinite(out.variance))
      throw NumericError("external denoiser: non-finite payload");
    if (!(out.variance > 0.0)) throw NumericError("external denoiser: non-positive variance");
    return out;
  }

 private:
  // JSON has no NaN/inf; servers that emit them typically write null.
  static double number_or_nan(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_null()) return std::numeric_limits<double>::quiet_NaN();
    throw ProtocolError("external denoiser: expected a number, got " + j.dump());
  }

  nlohmann::json receive() {
    const std::string line = channel_->read_line();
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ProtocolError(std::string("external denoiser: malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ProtocolError("external denoiser: expected a JSON object");
    if (j.contains("error"))
      throw ProtocolError("external denoiser reported error: " +
                          (j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump()));
    return j;
  }

  std::size_t n_;
  std::uint64_t next_id_ = 0;
  std::unique_ptr<ChildProcess> child_;
  std::unique_ptr<LineChannel> channel_;
};

/// Address from the environment override if set, else `configured`.
inline std::string resolve_denoiser_address(const std::string& configured) {
  if (const char* env = std::getenv(kDenoiserAddressEnv); env && *env) return env;
  return configured;
}

}  // namespace stmp
