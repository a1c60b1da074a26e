#pragma once

// Scoring-backend contract: a Backend answers protocol requests, either
// in-process (the CopyLM mock) or over a LineChannel to an external
// process. The free functions below are the synchronous scoring operations
// the pipeline stages are built from.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include "depsel/copylm.hpp"
#include "depsel/corpus.hpp"
#include "depsel/error.hpp"
#include "depsel/protocol.hpp"
#include "depsel/transport.hpp"

namespace depsel {

// An in-band error returned by a backend for one request.
class ScoringFailure : public BackendError {
 public:
  ScoringFailure(std::string request_id, std::string code, const std::string& message)
      : BackendError("request " + request_id + " failed [" + code + "]: " + message, code == protocol::codes::internal),
        request_id_(std::move(request_id)),
        code_(std::move(code)) {}
  const std::string& request_id() const noexcept { return request_id_; }
  const std::string& code() const noexcept { return code_; }

 private:
  std::string request_id_;
  std::string code_;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual const protocol::BackendDescriptor& descriptor() const = 0;
  // The response may carry an in-band error; transport failures throw
  // BackendError (possibly from future::get()).
  virtual std::future<protocol::ScoringResponse> submit(protocol::ScoringRequest request) = 0;

  std::uint64_t requests_issued() const { return issued_.load(); }

 protected:
  void count_request() { issued_.fetch_add(1); }

 private:
  std::atomic<std::uint64_t> issued_{0};
};

// CopyLM answered in-process.
class LocalBackend : public Backend {
 public:
  explicit LocalBackend(CopyLMParams params);
  const protocol::BackendDescriptor& descriptor() const override { return descriptor_; }
  std::future<protocol::ScoringResponse> submit(protocol::ScoringRequest request) override;
  const CopyLM& engine() const { return engine_; }

 private:
  CopyLM engine_;
  protocol::BackendDescriptor descriptor_;
};

// Client side of the wire protocol. The first line from the peer must be
// the descriptor handshake. Up to max_in_flight requests are outstanding at
// once; responses may arrive in any order and are matched by request_id.
class RemoteBackend : public Backend {
 public:
  explicit RemoteBackend(std::unique_ptr<LineChannel> channel, std::size_t max_in_flight = 8);
  ~RemoteBackend() override;
  RemoteBackend(const RemoteBackend&) = delete;
  RemoteBackend& operator=(const RemoteBackend&) = delete;

  const protocol::BackendDescriptor& descriptor() const override { return descriptor_; }
  // Blocks while max_in_flight requests are outstanding. An empty
  // request_id is replaced by a generated one.
  std::future<protocol::ScoringResponse> submit(protocol::ScoringRequest request) override;

 private:
  void read_loop();
  void fail_all(const std::string& why);

  std::unique_ptr<LineChannel> channel_;
  protocol::BackendDescriptor descriptor_;
  std::counting_semaphore<> slots_;
  std::mutex mutex_;
  std::mutex write_mutex_;
  std::unordered_map<std::string, std::promise<protocol::ScoringResponse>> pending_;
  bool broken_ = false;
  std::string broken_reason_;
  std::uint64_t next_id_ = 0;
  std::thread reader_;
};

// Endpoint forms:
//   mock:<CopyLM spec>   in-process CopyLM, e.g. mock:V=32,beta=9,window=4
//   exec:<command>       spawn a backend speaking the protocol on stdio
//   tcp:<host>:<port>    connect to a running backend
std::unique_ptr<Backend> open_backend(std::string_view endpoint, std::size_t max_in_flight = 8);

// Request builders shared by the synchronous helpers and the pipeline.
protocol::ScoringRequest tokenize_request(const Sample& sample, std::string request_id = {});
protocol::ScoringRequest full_request(const TruncatedSample& sample, std::string request_id = {});
protocol::ScoringRequest segment_request(const TruncatedSample& sample, std::size_t segment_length,
                                         std::size_t segment_index, std::string request_id = {});
protocol::ScoringRequest attention_request(const TruncatedSample& sample, std::size_t segment_length,
                                           std::string request_id = {});

// Throws ScoringFailure when the response carries an error, BackendError
// when a required field is missing.
void check_response(const protocol::ScoringResponse& response);
double response_nll(const protocol::ScoringResponse& response);

TokenCounts tokenize_info(Backend& backend, const Sample& sample);
double score_full(Backend& backend, const TruncatedSample& sample);
double score_segment(Backend& backend, const TruncatedSample& sample, std::size_t segment_length,
                     std::size_t segment_index);
// Pre-normalization per-segment attention means; one entry per segment.
std::vector<double> attention_profile(Backend& backend, const TruncatedSample& sample, std::size_t segment_length);

// Serves CopyLM over one channel until the peer closes its side.
void serve_mock(const CopyLMParams& params, LineChannel& channel);
// Accepts connections and serves each on its own thread. Returns after
// max_connections have been served, or when the listener is closed.
void serve_mock_tcp(const CopyLMParams& params, TcpListener& listener,
                    std::optional<std::size_t> max_connections = std::nullopt);

}  // namespace depsel
