#pragma once

// Newline-delimited byte streams: child-process stdio, TCP, socket pairs.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <sys/types.h>
#include <utility>

namespace depsel {

class LineChannel {
 public:
  virtual ~LineChannel() = default;
  // Appends '\n'. Throws BackendError when the peer is gone.
  virtual void write_line(std::string_view line) = 0;
  // nullopt at end of stream. A trailing fragment without '\n' is returned
  // as a final line.
  virtual std::optional<std::string> read_line() = 0;
  // Signals end of input to the peer; reading stays possible.
  virtual void close_write() = 0;
};

class FdChannel : public LineChannel {
 public:
  // read_fd may equal write_fd (sockets). Owned descriptors are closed on
  // destruction.
  FdChannel(int read_fd, int write_fd, bool owns, bool socket);
  ~FdChannel() override;
  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;

  void write_line(std::string_view line) override;
  std::optional<std::string> read_line() override;
  void close_write() override;

 private:
  int read_fd_;
  int write_fd_;
  bool owns_;
  bool socket_;
  bool write_closed_ = false;
  bool eof_ = false;
  std::string buffer_;
};

// This process's stdin/stdout.
std::unique_ptr<LineChannel> stdio_channel();

// Runs `command` through /bin/sh -c with its stdin/stdout connected to the
// returned channel; stderr is inherited. The child is reaped on destruction.
std::unique_ptr<LineChannel> spawn_process(const std::string& command);

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port);

// Connected in-process pair, mainly for tests.
std::pair<std::unique_ptr<LineChannel>, std::unique_ptr<LineChannel>> channel_pair();

class TcpListener {
 public:
  // Port 0 picks an ephemeral port; see port().
  explicit TcpListener(std::uint16_t port, const std::string& bind_address = "127.0.0.1");
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  // Blocks until a client connects; nullptr once the listener is closed.
  std::unique_ptr<LineChannel> accept();
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

void ignore_sigpipe();

}  // namespace depsel
