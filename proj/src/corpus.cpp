#include "depsel/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "depsel/error.hpp"
#include "depsel/gateway.hpp"
#include "depsel/ranker.hpp"
#include "json.hpp"

namespace depsel {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

bool is_assistant_role(std::string_view role) {
  return role == "gpt" || role == "assistant" || role == "chatgpt" || role == "bard" || role == "model";
}

std::string text_field(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return {};
  if (!it->is_string()) throw std::invalid_argument(std::string("field '") + field + "' must be a string");
  return it->get<std::string>();
}

std::vector<Turn> parse_turns(const json& conv) {
  if (!conv.is_array()) throw std::invalid_argument("field 'conversations' must be an array");
  std::vector<Turn> turns;
  for (const auto& t : conv) {
    if (!t.is_object()) throw std::invalid_argument("conversation turns must be objects");
    Turn turn;
    if (t.contains("from")) {
      turn.role = text_field(t, "from");
      turn.text = text_field(t, "value");
    } else {
      turn.role = text_field(t, "role");
      turn.text = text_field(t, "content");
    }
    turns.push_back(std::move(turn));
  }
  return turns;
}

}  // namespace

std::string_view to_string(SampleKind kind) { return kind == SampleKind::long_context ? "long" : "short"; }

SampleKind parse_kind(std::string_view text) {
  if (text == "long") return SampleKind::long_context;
  if (text == "short") return SampleKind::short_context;
  throw UserError("unknown sample kind '" + std::string(text) + "' (expected long or short)");
}

std::optional<FlattenedTurns> flatten_conversation(std::span<const Turn> turns) {
  std::optional<std::size_t> last;
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (is_assistant_role(turns[i].role)) last = i;
  }
  if (!last) return std::nullopt;
  FlattenedTurns out;
  for (std::size_t i = 0; i < *last; ++i) {
    if (i > 0) out.instruction += '\n';
    out.instruction += turns[i].role + ": " + turns[i].text;
  }
  out.response = turns[*last].text;
  return out;
}

Sample parse_record(std::string_view line, SampleKind kind) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument("not valid JSON");
  if (!j.is_object()) throw std::invalid_argument("record is not a JSON object");

  Sample s;
  s.kind = kind;
  auto id = j.find("id");
  if (id == j.end()) throw std::invalid_argument("missing id");
  if (id->is_string()) {
    s.id = id->get<std::string>();
  } else if (id->is_number_integer()) {
    s.id = id->dump();
  } else {
    throw std::invalid_argument("id must be a string");
  }
  if (s.id.empty()) throw std::invalid_argument("empty id");

  s.context = text_field(j, "context");
  if (j.contains("conversations") && !j.contains("response")) {
    auto turns = parse_turns(j["conversations"]);
    auto flat = flatten_conversation(turns);
    if (!flat) throw std::invalid_argument("conversation has no assistant turn");
    s.instruction = std::move(flat->instruction);
    s.response = std::move(flat->response);
  } else {
    s.instruction = text_field(j, "instruction");
    s.response = text_field(j, "response");
  }

  if (auto meta = j.find("meta"); meta != j.end() && !meta->is_null()) {
    if (!meta->is_object()) throw std::invalid_argument("meta must be an object");
    for (const auto& [k, v] : meta->items()) {
      s.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  }
  if (kind == SampleKind::long_context && s.context.empty()) {
    throw std::invalid_argument("long sample has an empty context");
  }
  return s;
}

std::string encode_record(const Sample& sample, std::optional<std::string_view> origin) {
  ojson j;
  j["id"] = sample.id;
  j["context"] = sample.context;
  j["instruction"] = sample.instruction;
  j["response"] = sample.response;
  ojson meta = ojson::object();
  for (const auto& [k, v] : sample.meta) meta[k] = v;
  j["meta"] = std::move(meta);
  if (origin) j["origin"] = std::string(*origin);
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

CorpusReader::CorpusReader(const std::filesystem::path& path, SampleKind kind, LoadOptions options)
    : path_(path), kind_(kind), options_(std::move(options)), in_(path, std::ios::binary) {
  if (!in_) throw UserError("cannot read corpus file " + path.string());
}

CorpusReader::~CorpusReader() = default;

void CorpusReader::skip(std::size_t line, std::string reason, bool malformed) {
  if (malformed) {
    ++stats_.malformed;
  } else {
    ++stats_.empty_response;
  }
  if (options_.skip_log) {
    if (!skip_log_) {
      skip_log_ = std::make_unique<std::ofstream>(*options_.skip_log, std::ios::app);
      if (!*skip_log_) throw UserError("cannot write skip log " + options_.skip_log->string());
    }
    *skip_log_ << path_.string() << ":" << line << ": " << reason << '\n';
    skip_log_->flush();
  }
  stats_.skips.push_back({line, std::move(reason)});
}

std::optional<Sample> CorpusReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    ++stats_.lines;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;

    Sample s;
    try {
      s = parse_record(line, kind_);
    } catch (const std::invalid_argument& e) {
      std::string reason = std::string("malformed record: ") + e.what();
      if (options_.strict) {
        throw UserError(path_.string() + ":" + std::to_string(line_no_) + ": " + reason);
      }
      skip(line_no_, std::move(reason), true);
      continue;
    }
    if (blank(s.response)) {
      skip(line_no_, "empty response (id " + s.id + ")", false);
      continue;
    }
    auto [it, inserted] = seen_.emplace(s.id, line_no_);
    if (!inserted) {
      throw UserError(path_.string() + ": duplicate id '" + s.id + "' at lines " + std::to_string(it->second) +
                      " and " + std::to_string(line_no_));
    }
    ++stats_.accepted;
    return s;
  }
  if (in_.bad()) throw UserError("error while reading " + path_.string());
  return std::nullopt;
}

std::vector<Sample> load_corpus(const std::filesystem::path& path, SampleKind kind, const LoadOptions& options,
                                LoadStats* stats) {
  CorpusReader reader(path, kind, options);
  std::vector<Sample> out;
  while (auto s = reader.next()) out.push_back(std::move(*s));
  if (stats) *stats = reader.stats();
  return out;
}

void TruncationPolicy::validate() const {
  if (max_tokens <= 0) throw UserError("truncation max_tokens must be positive");
}

std::string TruncationPolicy::key() const {
  return std::string(side == TruncationSide::left ? "left" : "right") + ":" + std::to_string(max_tokens);
}

TruncatedSample truncate_for_scoring(Sample sample, const TruncationPolicy& policy, const TokenCounts& counts) {
  policy.validate();
  if (policy.side != TruncationSide::left) {
    throw UserError("scoring-time truncation must drop context from the left");
  }
  TruncatedSample out;
  out.sample = std::move(sample);
  out.counts = counts;
  const auto max = static_cast<std::size_t>(policy.max_tokens);
  const std::size_t tail = counts.instruction + counts.response;
  if (tail > max) {
    out.scoreable = false;
    out.context_tokens = 0;
    out.reason = "instruction and response need " + std::to_string(tail) + " tokens, limit is " +
                 std::to_string(max);
    return out;
  }
  if (counts.response == 0) {
    out.scoreable = false;
    out.reason = "response has no tokens";
    return out;
  }
  const std::size_t total = counts.context + tail;
  out.context_skip = total > max ? total - max : 0;
  out.context_tokens = counts.context - out.context_skip;
  return out;
}

TruncatedSample truncate_for_scoring(Sample sample, const TruncationPolicy& policy, Backend& backend) {
  const TokenCounts counts = tokenize_info(backend, sample);
  return truncate_for_scoring(std::move(sample), policy, counts);
}

void MixSpec::validate() const {
  if (long_ratio && !(*long_ratio > 0.0 && *long_ratio <= 1.0)) {
    throw UserError("mix long_ratio must be in (0, 1]");
  }
  if (!(short_fraction >= 0.0 && short_fraction <= 1.0)) {
    throw UserError("mix short_fraction must be in [0, 1]");
  }
}

MixSummary mix_training_set(std::span<const std::string> selected_ids, const std::filesystem::path& long_corpus,
                            const MixSpec& spec, const std::filesystem::path& out, const LoadOptions& options) {
  spec.validate();
  std::unordered_map<std::string, Sample> by_id;
  {
    CorpusReader reader(long_corpus, SampleKind::long_context, options);
    while (auto s = reader.next()) {
      auto id = s->id;
      by_id.emplace(std::move(id), std::move(*s));
    }
  }
  for (const auto& id : selected_ids) {
    if (!by_id.count(id)) throw UserError("manifest id '" + id + "' not found in " + long_corpus.string());
  }

  std::vector<Sample> shorts;
  if (!spec.short_source.empty()) {
    shorts = load_corpus(spec.short_source, SampleKind::short_context, options);
  }
  const auto n_short = static_cast<std::size_t>(
      std::floor(spec.short_fraction * static_cast<double>(shorts.size()) + 1e-9));
  const auto take = std::min(n_short, shorts.size());

  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw UserError("cannot write training set " + out.string());
  MixSummary summary;
  for (const auto& id : selected_ids) {
    os << encode_record(by_id.at(id), "long") << '\n';
    ++summary.long_count;
  }
  for (std::size_t i = 0; i < take; ++i) {
    os << encode_record(shorts[i], "short") << '\n';
    ++summary.short_count;
  }
  os.flush();
  if (!os) throw UserError("error while writing " + out.string());
  return summary;
}

MixSummary mix_training_set(const SelectionManifest& manifest, const std::filesystem::path& long_corpus,
                            const MixSpec& spec, const std::filesystem::path& out, const LoadOptions& options) {
  if (spec.long_ratio && std::abs(*spec.long_ratio - manifest.cut_ratio) > 1e-12) {
    throw UserError("mix long_ratio " + std::to_string(*spec.long_ratio) + " disagrees with the manifest cut ratio " +
                    std::to_string(manifest.cut_ratio));
  }
  return mix_training_set(std::span<const std::string>(manifest.selected), long_corpus, spec, out, options);
}

}  // namespace depsel
