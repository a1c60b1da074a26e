#include "depsel/gateway.hpp"

#include <charconv>
#include <cmath>
#include <iostream>

#include "depsel/cam.hpp"

namespace depsel {

using protocol::Mode;
using protocol::ScoringRequest;
using protocol::ScoringResponse;

LocalBackend::LocalBackend(CopyLMParams params) : engine_(std::move(params)), descriptor_(engine_.descriptor()) {}

std::future<ScoringResponse> LocalBackend::submit(ScoringRequest request) {
  count_request();
  std::promise<ScoringResponse> promise;
  promise.set_value(engine_.handle(request));
  return promise.get_future();
}

RemoteBackend::RemoteBackend(std::unique_ptr<LineChannel> channel, std::size_t max_in_flight)
    : channel_(std::move(channel)), slots_(static_cast<std::ptrdiff_t>(max_in_flight == 0 ? 1 : max_in_flight)) {
  auto first = channel_->read_line();
  if (!first) throw BackendError("backend closed the connection before the descriptor handshake");
  try {
    descriptor_ = protocol::decode_descriptor(*first);
  } catch (const protocol::ProtocolError& e) {
    throw BackendError(std::string("bad descriptor handshake: ") + e.what());
  }
  if (descriptor_.context_window <= 0) throw BackendError("backend advertised a non-positive context window");
  reader_ = std::thread([this] { read_loop(); });
}

RemoteBackend::~RemoteBackend() {
  try {
    channel_->close_write();
  } catch (...) {
  }
  if (reader_.joinable()) reader_.join();
}

std::future<ScoringResponse> RemoteBackend::submit(ScoringRequest request) {
  slots_.acquire();
  std::future<ScoringResponse> future;
  {
    std::lock_guard lock(mutex_);
    if (broken_) {
      slots_.release();
      throw BackendError("backend " + descriptor_.name + " unavailable: " + broken_reason_, true);
    }
    if (request.request_id.empty()) request.request_id = "r" + std::to_string(next_id_++);
    auto [it, inserted] = pending_.try_emplace(request.request_id);
    if (!inserted) {
      slots_.release();
      throw UserError("request id '" + request.request_id + "' is already in flight");
    }
    future = it->second.get_future();
  }
  count_request();
  try {
    std::lock_guard lock(write_mutex_);
    channel_->write_line(protocol::encode(request));
  } catch (const BackendError& e) {
    fail_all(e.what());
  }
  return future;
}

void RemoteBackend::fail_all(const std::string& why) {
  std::unordered_map<std::string, std::promise<ScoringResponse>> pending;
  {
    std::lock_guard lock(mutex_);
    if (!broken_) {
      broken_ = true;
      broken_reason_ = why;
    }
    pending.swap(pending_);
  }
  for (auto& [id, promise] : pending) {
    promise.set_exception(std::make_exception_ptr(BackendError("request " + id + ": " + why, true)));
    slots_.release();
  }
}

void RemoteBackend::read_loop() {
  while (auto line = channel_->read_line()) {
    if (line->empty()) continue;
    ScoringResponse response;
    try {
      response = protocol::decode_response(*line);
    } catch (const protocol::ProtocolError& e) {
      fail_all(std::string("malformed response from backend: ") + e.what());
      return;
    }
    std::optional<std::promise<ScoringResponse>> promise;
    {
      std::lock_guard lock(mutex_);
      auto it = pending_.find(response.request_id);
      if (it != pending_.end()) {
        promise = std::move(it->second);
        pending_.erase(it);
      }
    }
    if (!promise) {
      std::cerr << "depsel: warning: backend " << descriptor_.name << " answered unknown request '"
                << response.request_id << "'\n";
      continue;
    }
    promise->set_value(std::move(response));
    slots_.release();
  }
  fail_all("backend closed the connection");
}

std::unique_ptr<Backend> open_backend(std::string_view endpoint, std::size_t max_in_flight) {
  auto colon = endpoint.find(':');
  if (colon == std::string_view::npos) {
    throw UserError("backend endpoint '" + std::string(endpoint) + "' must start with mock:, exec: or tcp:");
  }
  auto scheme = endpoint.substr(0, colon);
  auto rest = endpoint.substr(colon + 1);
  if (scheme == "mock") return std::make_unique<LocalBackend>(CopyLMParams::parse(rest));
  if (scheme == "exec") {
    if (rest.empty()) throw UserError("exec: endpoint needs a command");
    return std::make_unique<RemoteBackend>(spawn_process(std::string(rest)), max_in_flight);
  }
  if (scheme == "tcp") {
    auto sep = rest.rfind(':');
    if (sep == std::string_view::npos) throw UserError("tcp endpoint must be tcp:<host>:<port>");
    auto port_text = rest.substr(sep + 1);
    std::uint16_t port = 0;
    auto [ptr, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (ec != std::errc() || ptr != port_text.data() + port_text.size()) {
      throw UserError("bad port in endpoint '" + std::string(endpoint) + "'");
    }
    return std::make_unique<RemoteBackend>(connect_tcp(std::string(rest.substr(0, sep)), port), max_in_flight);
  }
  throw UserError("unknown backend scheme '" + std::string(scheme) + "'");
}

namespace {

ScoringRequest base_request(Mode mode, const Sample& sample, std::string request_id) {
  ScoringRequest r;
  r.request_id = std::move(request_id);
  r.mode = mode;
  r.context = sample.context;
  r.instruction = sample.instruction;
  r.response = sample.response;
  return r;
}

ScoringRequest scoring_base(Mode mode, const TruncatedSample& sample, std::string request_id) {
  if (!sample.scoreable) throw UserError("sample " + sample.sample.id + " is unscoreable: " + sample.reason);
  auto r = base_request(mode, sample.sample, std::move(request_id));
  if (sample.context_skip > 0) r.context_skip_tokens = static_cast<std::int64_t>(sample.context_skip);
  return r;
}

ScoringResponse await(Backend& backend, ScoringRequest request) {
  auto response = backend.submit(std::move(request)).get();
  check_response(response);
  return response;
}

}  // namespace

ScoringRequest tokenize_request(const Sample& sample, std::string request_id) {
  return base_request(Mode::tokenize_info, sample, std::move(request_id));
}

ScoringRequest full_request(const TruncatedSample& sample, std::string request_id) {
  return scoring_base(Mode::full_ppl, sample, std::move(request_id));
}

ScoringRequest segment_request(const TruncatedSample& sample, std::size_t segment_length, std::size_t segment_index,
                               std::string request_id) {
  auto r = scoring_base(Mode::segment_ppl, sample, std::move(request_id));
  r.segment_length = static_cast<std::int64_t>(segment_length);
  r.segment_index = static_cast<std::int64_t>(segment_index);
  return r;
}

ScoringRequest attention_request(const TruncatedSample& sample, std::size_t segment_length, std::string request_id) {
  auto r = scoring_base(Mode::attention_profile, sample, std::move(request_id));
  r.segment_length = static_cast<std::int64_t>(segment_length);
  return r;
}

void check_response(const ScoringResponse& response) {
  if (response.error) throw ScoringFailure(response.request_id, response.error->code, response.error->message);
}

double response_nll(const ScoringResponse& response) {
  check_response(response);
  if (!response.mean_response_nll) {
    throw BackendError("response " + response.request_id + " lacks mean_response_nll");
  }
  const double nll = *response.mean_response_nll;
  if (!std::isfinite(nll) || nll < 0.0) {
    throw BackendError("response " + response.request_id + " carries an invalid mean_response_nll");
  }
  return nll;
}

TokenCounts tokenize_info(Backend& backend, const Sample& sample) {
  auto response = await(backend, tokenize_request(sample, sample.id + "#tokenize"));
  if (!response.token_count_context || !response.token_count_response) {
    throw BackendError("tokenize_info response for " + sample.id + " lacks token counts");
  }
  TokenCounts counts;
  counts.context = static_cast<std::size_t>(*response.token_count_context);
  counts.instruction = static_cast<std::size_t>(response.token_count_instruction.value_or(0));
  counts.response = static_cast<std::size_t>(*response.token_count_response);
  return counts;
}

double score_full(Backend& backend, const TruncatedSample& sample) {
  return response_nll(backend.submit(full_request(sample, sample.sample.id + "#full")).get());
}

double score_segment(Backend& backend, const TruncatedSample& sample, std::size_t segment_length,
                     std::size_t segment_index) {
  if (segment_length == 0) throw UserError("segment length must be positive");
  const auto n = sample.context_tokens == 0 ? 0 : (sample.context_tokens + segment_length - 1) / segment_length;
  if (segment_index >= n) {
    throw ScoringFailure(sample.sample.id + "#seg" + std::to_string(segment_index),
                         std::string(protocol::codes::invalid_segment_index),
                         "segment index " + std::to_string(segment_index) + " outside [0, " + std::to_string(n) + ")");
  }
  auto request = segment_request(sample, segment_length, segment_index,
                                 sample.sample.id + "#seg" + std::to_string(segment_index));
  return response_nll(backend.submit(std::move(request)).get());
}

std::vector<double> attention_profile(Backend& backend, const TruncatedSample& sample, std::size_t segment_length) {
  if (!backend.descriptor().supports_attention) {
    throw ScoringFailure(sample.sample.id + "#attn", std::string(protocol::codes::attention_unsupported),
                         "backend " + backend.descriptor().name + " does not report attention");
  }
  auto response = await(backend, attention_request(sample, segment_length, sample.sample.id + "#attn"));
  if (!response.per_segment_attention) {
    throw BackendError("attention response for " + sample.sample.id + " lacks per_segment_attention");
  }
  auto& values = *response.per_segment_attention;
  const auto expected = segment_plan(sample.context_tokens, segment_length).size();
  if (values.size() != expected) {
    throw BackendError("attention response for " + sample.sample.id + " has " + std::to_string(values.size()) +
                       " segments, expected " + std::to_string(expected));
  }
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) {
      throw BackendError("attention response for " + sample.sample.id + " has a negative or non-finite entry");
    }
  }
  return std::move(values);
}

void serve_mock(const CopyLMParams& params, LineChannel& channel) {
  const CopyLM engine(params);
  channel.write_line(protocol::encode(engine.descriptor()));
  while (auto line = channel.read_line()) {
    if (line->empty()) continue;
    ScoringResponse response;
    try {
      response = engine.handle(protocol::decode_request(*line));
    } catch (const protocol::ProtocolError& e) {
      response = protocol::make_error(e.request_id(), protocol::codes::bad_request, e.what());
    }
    channel.write_line(protocol::encode(response));
  }
}

void serve_mock_tcp(const CopyLMParams& params, TcpListener& listener, std::optional<std::size_t> max_connections) {
  std::vector<std::thread> workers;
  std::size_t served = 0;
  while (!max_connections || served < *max_connections) {
    auto channel = listener.accept();
    if (!channel) break;
    ++served;
    workers.emplace_back([&params, ch = std::move(channel)]() mutable {
      try {
        serve_mock(params, *ch);
      } catch (const std::exception& e) {
        std::cerr << "depsel: connection closed: " << e.what() << '\n';
      }
    });
  }
  for (auto& w : workers) w.join();
}

}  // namespace depsel
