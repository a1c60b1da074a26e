#include "depsel/copylm.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "depsel/cam.hpp"
#include "depsel/error.hpp"

namespace depsel {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw UserError("mock backend: bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

void CopyLMParams::validate() const {
  if (vocab_size < 2) throw UserError("mock backend: vocab size must be at least 2");
  if (!(copy_bonus >= 0.0) || !std::isfinite(copy_bonus)) throw UserError("mock backend: beta must be finite and >= 0");
  if (!(attention_bonus >= 0.0) || !std::isfinite(attention_bonus)) {
    throw UserError("mock backend: gamma must be finite and >= 0");
  }
  if (window && *window == 0) throw UserError("mock backend: window must be positive");
  if (context_window <= 0) throw UserError("mock backend: context window must be positive");
}

CopyLMParams CopyLMParams::parse(std::string_view spec) {
  CopyLMParams p;
  std::size_t pos = 0;
  while (pos < spec.size()) {
    auto comma = spec.find(',', pos);
    if (comma == std::string_view::npos) comma = spec.size();
    auto item = spec.substr(pos, comma - pos);
    pos = comma + 1;
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string_view::npos) throw UserError("mock backend: expected key=value, got '" + std::string(item) + "'");
    auto key = item.substr(0, eq);
    auto value = item.substr(eq + 1);
    if (key == "V" || key == "vocab") {
      p.vocab_size = parse_number<std::uint32_t>(key, value);
    } else if (key == "beta") {
      p.copy_bonus = parse_number<double>(key, value);
    } else if (key == "window" || key == "W") {
      if (value == "inf") {
        p.window.reset();
      } else {
        p.window = parse_number<std::uint64_t>(key, value);
      }
    } else if (key == "gamma") {
      p.attention_bonus = parse_number<double>(key, value);
    } else if (key == "shift") {
      p.attention_shift = parse_number<std::uint32_t>(key, value);
    } else if (key == "ctx") {
      p.context_window = parse_number<std::int64_t>(key, value);
    } else if (key == "name") {
      p.name = std::string(value);
    } else {
      throw UserError("mock backend: unknown parameter '" + std::string(key) + "'");
    }
  }
  p.validate();
  return p;
}

std::string CopyLMParams::to_spec() const {
  std::ostringstream out;
  out << "V=" << vocab_size << ",beta=" << format_double(copy_bonus) << ",window="
      << (window ? std::to_string(*window) : std::string("inf")) << ",gamma=" << format_double(attention_bonus)
      << ",shift=" << attention_shift << ",ctx=" << context_window;
  if (!name.empty()) out << ",name=" << name;
  return out.str();
}

std::string CopyLMParams::resolved_name() const {
  if (!name.empty()) return name;
  return "copylm[" + to_spec() + "]";
}

CopyLM::CopyLM(CopyLMParams params) : params_(std::move(params)) { params_.validate(); }

protocol::BackendDescriptor CopyLM::descriptor() const {
  protocol::BackendDescriptor d;
  d.name = params_.resolved_name();
  d.context_window = params_.context_window;
  d.supports_attention = true;
  d.tokenizer_fingerprint = "whitespace-int:V=" + std::to_string(params_.vocab_size);
  return d;
}

std::vector<Token> CopyLM::tokenize(std::string_view text) const {
  std::vector<Token> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i == text.size()) break;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    auto word = text.substr(i, j - i);
    std::uint64_t value = 0;
    auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), value);
    if (ec != std::errc() || ptr != word.data() + word.size()) {
      throw std::invalid_argument("not a token id: '" + std::string(word) + "'");
    }
    if (value >= params_.vocab_size) {
      throw std::invalid_argument("token " + std::string(word) + " outside vocabulary of size " +
                                  std::to_string(params_.vocab_size));
    }
    tokens.push_back(static_cast<Token>(value));
    i = j;
  }
  return tokens;
}

double CopyLM::mean_nll(std::span<const Token> prefix, std::span<const Token> response) const {
  if (response.empty()) throw std::invalid_argument("empty response");
  const double vocab = static_cast<double>(params_.vocab_size);
  const double beta = params_.copy_bonus;

  // seq = prefix ++ response; y_j is predicted from seq[0, P + j).
  std::vector<Token> seq;
  seq.reserve(prefix.size() + response.size());
  seq.insert(seq.end(), prefix.begin(), prefix.end());
  seq.insert(seq.end(), response.begin(), response.end());

  const std::size_t p = prefix.size();
  const std::size_t width = params_.window ? static_cast<std::size_t>(std::min<std::uint64_t>(
                                                 *params_.window, std::numeric_limits<std::size_t>::max()))
                                           : std::numeric_limits<std::size_t>::max();

  std::vector<std::uint32_t> counts(params_.vocab_size, 0);
  std::size_t distinct = 0;
  auto add = [&](Token t) {
    if (counts[t]++ == 0) ++distinct;
  };
  auto remove = [&](Token t) {
    if (--counts[t] == 0) --distinct;
  };

  std::size_t lo = p > width ? p - width : 0;
  for (std::size_t k = lo; k < p; ++k) add(seq[k]);

  double total = 0.0;
  for (std::size_t j = 0; j < response.size(); ++j) {
    const std::size_t end = p + j;  // window is seq[lo, end)
    if (j > 0) {
      add(seq[end - 1]);
      if (end - lo > width) remove(seq[lo++]);
    }
    const Token y = response[j];
    const double numerator = 1.0 + (counts[y] > 0 ? beta : 0.0);
    const double denominator = vocab + beta * static_cast<double>(distinct);
    total += std::log(denominator) - std::log(numerator);
  }
  return total / static_cast<double>(response.size());
}

std::vector<double> CopyLM::context_attention(std::span<const Token> context,
                                              std::span<const Token> response) const {
  std::vector<double> out(context.size(), 0.0);
  if (context.empty() || response.empty()) return out;
  const double gamma = params_.attention_bonus;
  const double n = static_cast<double>(context.size());

  std::vector<std::uint32_t> occurrences(params_.vocab_size, 0);
  for (Token t : context) ++occurrences[t];

  // Per response position the row is (1 + gamma*[hit]) / (n + gamma*hits).
  // Averaged over positions, the weight on context token t depends only on
  // its value: base + gamma * bonus[value].
  double base = 0.0;
  std::vector<double> bonus(params_.vocab_size, 0.0);
  for (Token y : response) {
    const Token target = static_cast<Token>((static_cast<std::uint64_t>(y) + params_.attention_shift) %
                                            params_.vocab_size);
    const double row_sum = n + gamma * static_cast<double>(occurrences[target]);
    base += 1.0 / row_sum;
    bonus[target] += 1.0 / row_sum;
  }
  const double m = static_cast<double>(response.size());
  for (std::size_t t = 0; t < context.size(); ++t) {
    out[t] = (base + gamma * bonus[context[t]]) / m;
  }
  return out;
}

protocol::ScoringResponse CopyLM::handle(const protocol::ScoringRequest& request) const {
  using protocol::Mode;
  namespace codes = protocol::codes;
  if (auto problem = protocol::validate(request)) {
    return protocol::make_error(request.request_id, codes::bad_request, *problem);
  }

  std::vector<Token> context, instruction, response;
  try {
    context = tokenize(request.context);
    instruction = tokenize(request.instruction);
    response = tokenize(request.response);
  } catch (const std::invalid_argument& e) {
    return protocol::make_error(request.request_id, codes::bad_request, e.what());
  }

  const auto skip = static_cast<std::size_t>(request.context_skip_tokens.value_or(0));
  if (skip > context.size()) {
    return protocol::make_error(request.request_id, codes::bad_request,
                                "context_skip_tokens exceeds the context length");
  }
  context.erase(context.begin(), context.begin() + static_cast<std::ptrdiff_t>(skip));

  protocol::ScoringResponse out;
  out.request_id = request.request_id;
  out.token_count_context = static_cast<std::int64_t>(context.size());
  out.token_count_instruction = static_cast<std::int64_t>(instruction.size());
  out.token_count_response = static_cast<std::int64_t>(response.size());

  if (request.mode == Mode::tokenize_info) return out;

  const auto total = context.size() + instruction.size() + response.size();
  if (total > static_cast<std::size_t>(params_.context_window)) {
    return protocol::make_error(request.request_id, codes::context_overflow,
                                "sequence of " + std::to_string(total) + " tokens exceeds context window " +
                                    std::to_string(params_.context_window));
  }
  if (response.empty()) {
    return protocol::make_error(request.request_id, codes::bad_request, "response has no tokens");
  }

  switch (request.mode) {
    case Mode::full_ppl: {
      std::vector<Token> prefix = context;
      prefix.insert(prefix.end(), instruction.begin(), instruction.end());
      out.mean_response_nll = mean_nll(prefix, response);
      return out;
    }
    case Mode::segment_ppl: {
      if (context.empty()) {
        return protocol::make_error(request.request_id, codes::invalid_segment_index,
                                    "context has no tokens, so there are no segments");
      }
      const auto plan = segment_plan(context.size(), static_cast<std::size_t>(*request.segment_length));
      const auto index = static_cast<std::size_t>(*request.segment_index);
      if (index >= plan.size()) {
        return protocol::make_error(request.request_id, codes::invalid_segment_index,
                                    "segment_index " + std::to_string(index) + " outside [0, " +
                                        std::to_string(plan.size()) + ")");
      }
      const auto& range = plan[index];
      std::vector<Token> prefix(context.begin() + static_cast<std::ptrdiff_t>(range.begin),
                                context.begin() + static_cast<std::ptrdiff_t>(range.end));
      prefix.insert(prefix.end(), instruction.begin(), instruction.end());
      out.mean_response_nll = mean_nll(prefix, response);
      return out;
    }
    case Mode::attention_profile: {
      if (context.empty()) {
        return protocol::make_error(request.request_id, codes::bad_request, "attention profile needs a context");
      }
      const auto weights = context_attention(context, response);
      const auto plan = segment_plan(context.size(), static_cast<std::size_t>(*request.segment_length));
      std::vector<double> means;
      means.reserve(plan.size());
      for (const auto& range : plan) {
        double sum = 0.0;
        for (std::size_t t = range.begin; t < range.end; ++t) sum += weights[t];
        means.push_back(sum / static_cast<double>(range.size()));
      }
      out.per_segment_attention = std::move(means);
      return out;
    }
    case Mode::tokenize_info:
      break;
  }
  return out;
}

}  // namespace depsel
