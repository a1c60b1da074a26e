#include "depsel/transport.hpp"

#include <arpa/inet.h>
#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <mutex>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "depsel/error.hpp"

extern char** environ;

namespace depsel {

namespace {

std::string errno_text() { return std::strerror(errno); }

void close_fd(int fd) {
  if (fd >= 0) ::close(fd);
}

class ChildProcessChannel : public FdChannel {
 public:
  ChildProcessChannel(int read_fd, int write_fd, pid_t pid) : FdChannel(read_fd, write_fd, true, false), pid_(pid) {}

  ~ChildProcessChannel() override {
    close_write();
    int status = 0;
    for (int i = 0; i < 200; ++i) {
      if (::waitpid(pid_, &status, WNOHANG) != 0) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    ::kill(pid_, SIGTERM);
    ::waitpid(pid_, &status, 0);
  }

 private:
  pid_t pid_;
};

}  // namespace

void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] { std::signal(SIGPIPE, SIG_IGN); });
}

FdChannel::FdChannel(int read_fd, int write_fd, bool owns, bool socket)
    : read_fd_(read_fd), write_fd_(write_fd), owns_(owns), socket_(socket) {}

FdChannel::~FdChannel() {
  if (!owns_) return;
  close_fd(read_fd_);
  if (write_fd_ != read_fd_ && !write_closed_) close_fd(write_fd_);
}

void FdChannel::write_line(std::string_view line) {
  if (write_closed_) throw BackendError("write on a closed channel");
  std::string data(line);
  data.push_back('\n');
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = socket_ ? ::send(write_fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                        : ::write(write_fd_, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BackendError("write to backend failed: " + errno_text(), true);
    }
    off += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> FdChannel::read_line() {
  for (;;) {
    auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    if (eof_) {
      if (buffer_.empty()) return std::nullopt;
      std::string line = std::move(buffer_);
      buffer_.clear();
      return line;
    }
    char chunk[65536];
    ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR) continue;
      eof_ = true;  // treat read errors as end of stream
      continue;
    }
    if (n == 0) {
      eof_ = true;
      continue;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

void FdChannel::close_write() {
  if (write_closed_) return;
  write_closed_ = true;
  if (socket_) {
    ::shutdown(write_fd_, SHUT_WR);
  } else if (owns_) {
    close_fd(write_fd_);
  }
}

std::unique_ptr<LineChannel> stdio_channel() {
  return std::make_unique<FdChannel>(STDIN_FILENO, STDOUT_FILENO, false, false);
}

std::unique_ptr<LineChannel> spawn_process(const std::string& command) {
  ignore_sigpipe();
  int to_child[2];
  int from_child[2];
  if (::pipe2(to_child, O_CLOEXEC) != 0) throw BackendError("pipe failed: " + errno_text());
  if (::pipe2(from_child, O_CLOEXEC) != 0) {
    close_fd(to_child[0]);
    close_fd(to_child[1]);
    throw BackendError("pipe failed: " + errno_text());
  }

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);

  const char* argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
  pid_t pid = 0;
  int rc = ::posix_spawn(&pid, "/bin/sh", &actions, nullptr, const_cast<char* const*>(argv), environ);
  posix_spawn_file_actions_destroy(&actions);
  close_fd(to_child[0]);
  close_fd(from_child[1]);
  if (rc != 0) {
    close_fd(to_child[1]);
    close_fd(from_child[0]);
    throw BackendError("cannot start backend '" + command + "': " + std::strerror(rc));
  }
  return std::make_unique<ChildProcessChannel>(from_child[0], to_child[1], pid);
}

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port) {
  ignore_sigpipe();
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  const auto service = std::to_string(port);
  if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &result); rc != 0) {
    throw BackendError("cannot resolve " + host + ": " + ::gai_strerror(rc), true);
  }
  int fd = -1;
  for (addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    close_fd(fd);
    fd = -1;
  }
  ::freeaddrinfo(result);
  if (fd < 0) throw BackendError("cannot connect to " + host + ":" + service, true);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return std::make_unique<FdChannel>(fd, fd, true, true);
}

std::pair<std::unique_ptr<LineChannel>, std::unique_ptr<LineChannel>> channel_pair() {
  ignore_sigpipe();
  int fds[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) {
    throw BackendError("socketpair failed: " + errno_text());
  }
  return {std::make_unique<FdChannel>(fds[0], fds[0], true, true),
          std::make_unique<FdChannel>(fds[1], fds[1], true, true)};
}

TcpListener::TcpListener(std::uint16_t port, const std::string& bind_address) {
  ignore_sigpipe();
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw BackendError("socket failed: " + errno_text());
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, bind_address.c_str(), &addr.sin_addr) != 1) {
    close();
    throw UserError("bad bind address " + bind_address);
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 16) != 0) {
    auto msg = errno_text();
    close();
    throw BackendError("cannot listen on " + bind_address + ":" + std::to_string(port) + ": " + msg);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<LineChannel> TcpListener::accept() {
  for (;;) {
    if (fd_ < 0) return nullptr;
    int client = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (client >= 0) {
      int one = 1;
      ::setsockopt(client, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return std::make_unique<FdChannel>(client, client, true, true);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    return nullptr;
  }
}

}  // namespace depsel
