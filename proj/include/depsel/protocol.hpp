#pragma once

// Line-oriented wire protocol spoken between the pipeline and a scoring
// backend. One JSON object per line; field order on encode is fixed so that
// encode(decode(line)) reproduces canonical lines byte for byte.

#include <cstdint>
#include <exception>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace depsel::protocol {

enum class Mode { full_ppl, segment_ppl, attention_profile, tokenize_info };

std::string_view to_string(Mode mode);
std::optional<Mode> parse_mode(std::string_view text);

// Error codes carried in-band in ScoringResponse::error.
namespace codes {
inline constexpr std::string_view bad_request = "bad_request";
inline constexpr std::string_view invalid_segment_index = "invalid_segment_index";
inline constexpr std::string_view attention_unsupported = "attention_unsupported";
inline constexpr std::string_view context_overflow = "context_overflow";
inline constexpr std::string_view internal = "internal";
}  // namespace codes

struct BackendDescriptor {
  std::string name;
  std::int64_t context_window = 0;
  bool supports_attention = false;
  std::string tokenizer_fingerprint;

  bool operator==(const BackendDescriptor&) const = default;
};

// Two backends can be compared through HMP only when they tokenize identically.
bool homologous_comparable(const BackendDescriptor& a, const BackendDescriptor& b);

struct ScoringRequest {
  std::string request_id;
  Mode mode = Mode::full_ppl;
  std::string context;
  std::string instruction;
  std::string response;
  std::optional<std::int64_t> segment_length;
  std::optional<std::int64_t> segment_index;
  // Leading context tokens the backend drops before doing anything else
  // (left-side truncation in the backend's own token space).
  std::optional<std::int64_t> context_skip_tokens;

  bool operator==(const ScoringRequest&) const = default;
};

struct ErrorInfo {
  std::string code;
  std::string message;

  bool operator==(const ErrorInfo&) const = default;
};

struct ScoringResponse {
  std::string request_id;
  // Context count is reported after context_skip_tokens is applied.
  std::optional<std::int64_t> token_count_context;
  std::optional<std::int64_t> token_count_instruction;
  std::optional<std::int64_t> token_count_response;
  std::optional<double> mean_response_nll;
  std::optional<std::vector<double>> per_segment_attention;
  std::optional<ErrorInfo> error;

  bool ok() const { return !error.has_value(); }
  bool operator==(const ScoringResponse&) const = default;
};

using Message = std::variant<BackendDescriptor, ScoringRequest, ScoringResponse>;

// Thrown by the decoders on lines that are not valid messages.
class ProtocolError : public std::exception {
 public:
  ProtocolError(std::string message, std::string request_id)
      : message_(std::move(message)), request_id_(std::move(request_id)) {}
  const char* what() const noexcept override { return message_.c_str(); }
  // Best-effort request id recovered from the offending line; may be empty.
  const std::string& request_id() const noexcept { return request_id_; }

 private:
  std::string message_;
  std::string request_id_;
};

std::string encode(const BackendDescriptor& msg);
std::string encode(const ScoringRequest& msg);
std::string encode(const ScoringResponse& msg);
std::string encode(const Message& msg);

Message decode(std::string_view line);
BackendDescriptor decode_descriptor(std::string_view line);
ScoringRequest decode_request(std::string_view line);
ScoringResponse decode_response(std::string_view line);

// Mode-specific field checks. Returns an explanation when the request is not
// well formed; segment_index bounds need token counts and are checked by the
// backend.
std::optional<std::string> validate(const ScoringRequest& request);

ScoringResponse make_error(std::string request_id, std::string_view code, std::string message);

}  // namespace depsel::protocol
