#pragma once

// Out-of-process scorer client. Records are newline-delimited JSON over a
// byte stream (child-process stdio or TCP):
//
//   -> {"type":"score_request","clip_id":N,"prompt":"...","frames":[...]}
//   <- {"type":"score_response","clip_id":N,"score":x}
//   -> {"type":"shutdown"}
//   <- {"type":"bye"}
//
// Each frame is {"events":{"key":b,"door":b,"goal":b}} or {"png_b64":"..."}.
// One request is in flight per connection.

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <set>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "replay_engine/errors.hpp"
#include "replay_engine/frame.hpp"
#include "replay_engine/scorers.hpp"

namespace replay_engine {

inline constexpr const char* kDefaultPrompt =
    "Does this clip contain a clear instance of goal satisfaction anywhere in it? "
    "If no visible success occurs, answer No. Do not guess. "
    "Output exactly Answer: Yes or Answer: No.";

namespace wire {

inline nlohmann::json frame_to_json(const FramePayload& f) {
  if (is_event_frame(f)) {
    const EventTag e = decode_event_frame(f);
    return {{"events", {{"key", e.key_picked_up}, {"door", e.door_opened}, {"goal", e.goal_reached}}}};
  }
  if (is_image_frame(f)) {
    return {{"png_b64", base64_encode(std::span(f).subspan(1))}};
  }
  throw MalformedPayload("frame is neither an event nor an image payload");
}

inline std::string score_request(std::int64_t clip_id, const std::string& prompt,
                                 std::span<const FramePayload> frames) {
  nlohmann::json frames_json = nlohmann::json::array();
  for (const auto& f : frames) frames_json.push_back(frame_to_json(f));
  nlohmann::json j = {{"type", "score_request"},
                      {"clip_id", clip_id},
                      {"prompt", prompt},
                      {"frames", std::move(frames_json)}};
  return j.dump();
}

inline std::string shutdown_request() { return R"({"type":"shutdown"})"; }

struct ScoreResponse {
  std::int64_t clip_id = 0;
  double score = 0.0;
};

// Parses and validates one response line (type, clip_id, score range).
inline ScoreResponse parse_score_response(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error&) {
    throw ProtocolViolation("response is not valid JSON");
  }
  if (!j.is_object() || !j.contains("type") || j["type"] != "score_response") {
    throw ProtocolViolation("expected a score_response record");
  }
  if (!j.contains("clip_id") || !j["clip_id"].is_number_integer()) {
    throw ProtocolViolation("score_response without integer clip_id");
  }
  if (!j.contains("score") || !j["score"].is_number()) {
    throw ProtocolViolation("score_response without numeric score");
  }
  ScoreResponse r{j["clip_id"].get<std::int64_t>(), j["score"].get<double>()};
  if (!(r.score >= 0.0 && r.score <= 1.0)) throw ProtocolViolation("score outside [0, 1]");
  return r;
}

}  // namespace wire

// Line-oriented duplex byte stream.
class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void write_line(const std::string& line) = 0;
  // Throws ScorerTimeout if no full line arrives before the deadline and
  // ConnectionLost on EOF or I/O failure.
  virtual std::string read_line(std::chrono::milliseconds timeout) = 0;
};

// Transport over a pair of file descriptors (a socket uses the same fd twice).
class FdTransport : public LineTransport {
 public:
  FdTransport(int read_fd, int write_fd, bool owns = true)
      : read_fd_(read_fd), write_fd_(write_fd), owns_(owns) {}
  ~FdTransport() override { close_fds(); }

  FdTransport(const FdTransport&) = delete;
  FdTransport& operator=(const FdTransport&) = delete;

  void write_line(const std::string& line) override {
    std::string data = line;
    data.push_back('\n');
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = send_or_write(write_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ConnectionLost(std::string("write failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line(std::chrono::milliseconds timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      if (auto pos = pending_.find('\n'); pos != std::string::npos) {
        std::string line = pending_.substr(0, pos);
        pending_.erase(0, pos + 1);
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw ScorerTimeout();
      pollfd pfd{read_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0) {
        if (errno == EINTR) continue;
        throw ConnectionLost(std::string("poll failed: ") + std::strerror(errno));
      }
      if (rc == 0) throw ScorerTimeout();
      char buf[4096];
      const ssize_t n = ::read(read_fd_, buf, sizeof buf);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ConnectionLost(std::string("read failed: ") + std::strerror(errno));
      }
      if (n == 0) throw ConnectionLost("peer closed the stream");
      pending_.append(buf, static_cast<std::size_t>(n));
    }
  }

 protected:
  void close_fds() {
    if (!owns_) return;
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    read_fd_ = write_fd_ = -1;
  }

 private:
  static ssize_t send_or_write(int fd, const char* p, std::size_t n) {
    // MSG_NOSIGNAL keeps a dead peer from raising SIGPIPE on sockets.
    const ssize_t r = ::send(fd, p, n, MSG_NOSIGNAL);
    if (r < 0 && errno == ENOTSOCK) return ::write(fd, p, n);
    return r;
  }

  int read_fd_;
  int write_fd_;
  bool owns_;
  std::string pending_;
};

// Spawns `/bin/sh -c command` and talks to it over its stdin/stdout.
class ChildProcessTransport final : public FdTransport {
 public:
  static std::unique_ptr<ChildProcessTransport> spawn(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw ConnectionLost("pipe() failed");
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ConnectionLost("pipe() failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw ConnectionLost("fork() failed");
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    return std::unique_ptr<ChildProcessTransport>(
        new ChildProcessTransport(from_child[0], to_child[1], pid));
  }

  ~ChildProcessTransport() override {
    close_fds();
    if (pid_ > 0) {
      int status = 0;
      // Give the child a moment to exit on EOF before killing it.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) return;
        ::usleep(10'000);
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
    }
  }

  pid_t pid() const { return pid_; }

 private:
  ChildProcessTransport(int read_fd, int write_fd, pid_t pid)
      : FdTransport(read_fd, write_fd), pid_(pid) {}
  pid_t pid_;
};

inline std::unique_ptr<FdTransport> connect_tcp(const std::string& host, const std::string& port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw ConnectionLost(std::string("resolve failed: ") + ::gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw ConnectionLost("could not connect to " + host + ":" + port);
  return std::make_unique<FdTransport>(fd, fd);
}

// Opens "stdio:<command>" or "tcp:<host>:<port>".
inline std::unique_ptr<LineTransport> open_transport(const std::string& address) {
  if (address.rfind("stdio:", 0) == 0) return ChildProcessTransport::spawn(address.substr(6));
  if (address.rfind("tcp:", 0) == 0) {
    const std::string rest = address.substr(4);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) throw ConnectionLost("tcp address needs host:port");
    return connect_tcp(rest.substr(0, colon), rest.substr(colon + 1));
  }
  throw ConnectionLost("unknown scorer address scheme: " + address);
}

class ExternalScorer final : public Scorer {
 public:
  explicit ExternalScorer(std::unique_ptr<LineTransport> transport,
                          std::string prompt = kDefaultPrompt,
                          std::chrono::milliseconds timeout = std::chrono::seconds(30))
      : transport_(std::move(transport)), prompt_(std::move(prompt)), timeout_(timeout) {}

  ~ExternalScorer() override {
    try {
      shutdown();
    } catch (...) {
    }
  }

  double score(std::int64_t clip_id, std::span<const FramePayload> frames) override {
    if (!transport_) throw ConnectionLost("scorer connection already shut down");
    transport_->write_line(wire::score_request(clip_id, prompt_, frames));
    for (;;) {
      std::string line;
      try {
        line = transport_->read_line(timeout_);
      } catch (const ScorerTimeout&) {
        abandoned_.insert(clip_id);
        throw;
      }
      const auto resp = wire::parse_score_response(line);
      if (resp.clip_id == clip_id) return resp.score;
      // A late answer to a request we already gave up on.
      if (abandoned_.erase(resp.clip_id) > 0) continue;
      throw ProtocolViolation("clip_id echo mismatch (sent " + std::to_string(clip_id) +
                              ", got " + std::to_string(resp.clip_id) + ")");
    }
  }

  // Sends the shutdown record and waits for "bye". Idempotent.
  bool shutdown() {
    if (!transport_) return true;
    auto t = std::move(transport_);
    t->write_line(wire::shutdown_request());
    for (int i = 0; i < 1000; ++i) {
      const auto line = t->read_line(std::chrono::seconds(5));
      const auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_object() && j.value("type", "") == "bye") return true;
    }
    return false;
  }

 private:
  std::unique_ptr<LineTransport> transport_;
  std::string prompt_;
  std::chrono::milliseconds timeout_;
  std::set<std::int64_t> abandoned_;
};

}  // namespace replay_engine
