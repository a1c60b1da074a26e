#include "depsel/protocol.hpp"

#include <cmath>

#include "json.hpp"

namespace depsel::protocol {

using ojson = nlohmann::ordered_json;
using nlohmann::json;

namespace {

std::string dump(const ojson& j) {
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

std::string try_request_id(const json& j) {
  if (j.is_object()) {
    auto it = j.find("request_id");
    if (it != j.end() && it->is_string()) return it->get<std::string>();
  }
  return {};
}

json parse_object(std::string_view line) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ProtocolError("malformed message: not valid JSON", {});
  if (!j.is_object()) throw ProtocolError("malformed message: expected a JSON object", {});
  return j;
}

void check_type(const json& j, std::string_view expected) {
  auto it = j.find("type");
  if (it == j.end()) return;  // type is implied by the decoder being used
  if (!it->is_string() || it->get<std::string>() != expected) {
    throw ProtocolError("unexpected message type, wanted " + std::string(expected), try_request_id(j));
  }
}

template <typename T>
T required(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) {
    throw ProtocolError(std::string("missing field '") + field + "'", try_request_id(j));
  }
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ProtocolError(std::string("wrong type for field '") + field + "'", try_request_id(j));
  }
}

template <typename T>
std::optional<T> optional_field(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return std::nullopt;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ProtocolError(std::string("wrong type for field '") + field + "'", try_request_id(j));
  }
}

std::int64_t integer_field(const json& j, const char* field, const json& value) {
  if (!value.is_number_integer()) {
    throw ProtocolError(std::string("field '") + field + "' must be an integer", try_request_id(j));
  }
  return value.get<std::int64_t>();
}

std::optional<std::int64_t> optional_integer(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return integer_field(j, field, *it);
}

std::int64_t required_integer(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) {
    throw ProtocolError(std::string("missing field '") + field + "'", try_request_id(j));
  }
  return integer_field(j, field, *it);
}

BackendDescriptor descriptor_from(const json& j) {
  check_type(j, "descriptor");
  BackendDescriptor d;
  d.name = required<std::string>(j, "name");
  d.context_window = required_integer(j, "context_window");
  d.supports_attention = required<bool>(j, "supports_attention");
  d.tokenizer_fingerprint = required<std::string>(j, "tokenizer_fingerprint");
  return d;
}

ScoringRequest request_from(const json& j) {
  check_type(j, "request");
  ScoringRequest r;
  r.request_id = required<std::string>(j, "request_id");
  auto mode_text = required<std::string>(j, "mode");
  auto mode = parse_mode(mode_text);
  if (!mode) throw ProtocolError("unknown mode '" + mode_text + "'", r.request_id);
  r.mode = *mode;
  r.context = required<std::string>(j, "context");
  r.instruction = required<std::string>(j, "instruction");
  r.response = required<std::string>(j, "response");
  r.segment_length = optional_integer(j, "segment_length");
  r.segment_index = optional_integer(j, "segment_index");
  r.context_skip_tokens = optional_integer(j, "context_skip_tokens");
  return r;
}

ScoringResponse response_from(const json& j) {
  check_type(j, "response");
  ScoringResponse r;
  r.request_id = required<std::string>(j, "request_id");
  r.token_count_context = optional_integer(j, "token_count_context");
  r.token_count_instruction = optional_integer(j, "token_count_instruction");
  r.token_count_response = optional_integer(j, "token_count_response");
  r.mean_response_nll = optional_field<double>(j, "mean_response_nll");
  r.per_segment_attention = optional_field<std::vector<double>>(j, "per_segment_attention");
  if (auto it = j.find("error"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw ProtocolError("field 'error' must be an object", r.request_id);
    ErrorInfo e;
    e.code = required<std::string>(*it, "code");
    e.message = optional_field<std::string>(*it, "message").value_or("");
    r.error = std::move(e);
  }
  return r;
}

}  // namespace

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::full_ppl: return "full_ppl";
    case Mode::segment_ppl: return "segment_ppl";
    case Mode::attention_profile: return "attention_profile";
    case Mode::tokenize_info: return "tokenize_info";
  }
  return "unknown";
}

std::optional<Mode> parse_mode(std::string_view text) {
  for (Mode m : {Mode::full_ppl, Mode::segment_ppl, Mode::attention_profile, Mode::tokenize_info}) {
    if (to_string(m) == text) return m;
  }
  return std::nullopt;
}

bool homologous_comparable(const BackendDescriptor& a, const BackendDescriptor& b) {
  return !a.tokenizer_fingerprint.empty() && a.tokenizer_fingerprint == b.tokenizer_fingerprint;
}

std::string encode(const BackendDescriptor& msg) {
  ojson j;
  j["type"] = "descriptor";
  j["name"] = msg.name;
  j["context_window"] = msg.context_window;
  j["supports_attention"] = msg.supports_attention;
  j["tokenizer_fingerprint"] = msg.tokenizer_fingerprint;
  return dump(j);
}

std::string encode(const ScoringRequest& msg) {
  ojson j;
  j["type"] = "request";
  j["request_id"] = msg.request_id;
  j["mode"] = to_string(msg.mode);
  j["context"] = msg.context;
  j["instruction"] = msg.instruction;
  j["response"] = msg.response;
  if (msg.segment_length) j["segment_length"] = *msg.segment_length;
  if (msg.segment_index) j["segment_index"] = *msg.segment_index;
  if (msg.context_skip_tokens) j["context_skip_tokens"] = *msg.context_skip_tokens;
  return dump(j);
}

std::string encode(const ScoringResponse& msg) {
  ojson j;
  j["type"] = "response";
  j["request_id"] = msg.request_id;
  if (msg.token_count_context) j["token_count_context"] = *msg.token_count_context;
  if (msg.token_count_instruction) j["token_count_instruction"] = *msg.token_count_instruction;
  if (msg.token_count_response) j["token_count_response"] = *msg.token_count_response;
  if (msg.mean_response_nll) j["mean_response_nll"] = *msg.mean_response_nll;
  if (msg.per_segment_attention) j["per_segment_attention"] = *msg.per_segment_attention;
  if (msg.error) {
    ojson e;
    e["code"] = msg.error->code;
    e["message"] = msg.error->message;
    j["error"] = std::move(e);
  }
  return dump(j);
}

std::string encode(const Message& msg) {
  return std::visit([](const auto& m) { return encode(m); }, msg);
}

Message decode(std::string_view line) {
  json j = parse_object(line);
  auto it = j.find("type");
  if (it == j.end() || !it->is_string()) {
    throw ProtocolError("message has no 'type' field", try_request_id(j));
  }
  const auto type = it->get<std::string>();
  if (type == "descriptor") return descriptor_from(j);
  if (type == "request") return request_from(j);
  if (type == "response") return response_from(j);
  throw ProtocolError("unknown message type '" + type + "'", try_request_id(j));
}

BackendDescriptor decode_descriptor(std::string_view line) { return descriptor_from(parse_object(line)); }
ScoringRequest decode_request(std::string_view line) { return request_from(parse_object(line)); }
ScoringResponse decode_response(std::string_view line) { return response_from(parse_object(line)); }

std::optional<std::string> validate(const ScoringRequest& request) {
  if (request.request_id.empty()) return "request_id must be nonempty";
  if (request.context_skip_tokens && *request.context_skip_tokens < 0) {
    return "context_skip_tokens must be non-negative";
  }
  const bool needs_length =
      request.mode == Mode::segment_ppl || request.mode == Mode::attention_profile;
  if (needs_length) {
    if (!request.segment_length) return "segment_length is required for this mode";
    if (*request.segment_length <= 0) return "segment_length must be positive";
  }
  if (request.mode == Mode::segment_ppl) {
    if (!request.segment_index) return "segment_index is required for segment_ppl";
    if (*request.segment_index < 0) return "segment_index must be non-negative";
  }
  return std::nullopt;
}

ScoringResponse make_error(std::string request_id, std::string_view code, std::string message) {
  ScoringResponse r;
  r.request_id = std::move(request_id);
  r.error = ErrorInfo{std::string(code), std::move(message)};
  return r;
}

}  // namespace depsel::protocol
