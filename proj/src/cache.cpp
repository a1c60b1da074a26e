#include "depsel/cache.hpp"

#include <iostream>

#include "depsel/error.hpp"
#include "json.hpp"

namespace depsel {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string CacheKey::str() const {
  std::string s;
  s.reserve(sample_id.size() + backend.size() + tokenizer.size() + 48);
  s += sample_id;
  s += '\x1f';
  s += backend;
  s += '\x1f';
  s += tokenizer;
  s += '\x1f';
  s += truncation;
  s += '\x1f';
  s += protocol::to_string(mode);
  s += '\x1f';
  s += std::to_string(segment_length);
  s += '\x1f';
  s += std::to_string(segment_index);
  return s;
}

namespace {

ojson encode_entry(const CacheEntry& e) {
  ojson j;
  j["type"] = "score";
  j["sample_id"] = e.key.sample_id;
  j["backend"] = e.key.backend;
  j["tokenizer"] = e.key.tokenizer;
  j["truncation"] = e.key.truncation;
  j["mode"] = protocol::to_string(e.key.mode);
  if (e.key.segment_length > 0) j["segment_length"] = e.key.segment_length;
  if (e.key.segment_index >= 0) j["segment_index"] = e.key.segment_index;
  if (e.mean_nll) j["mean_nll"] = *e.mean_nll;
  if (e.attention) j["attention"] = *e.attention;
  if (e.counts) {
    j["token_count_context"] = e.counts->context;
    j["token_count_instruction"] = e.counts->instruction;
    j["token_count_response"] = e.counts->response;
  }
  if (e.error) j["error"] = {{"code", e.error->code}, {"message", e.error->message}};
  return j;
}

CacheEntry decode_entry(const json& j) {
  CacheEntry e;
  e.key.sample_id = j.at("sample_id").get<std::string>();
  e.key.backend = j.at("backend").get<std::string>();
  e.key.tokenizer = j.at("tokenizer").get<std::string>();
  e.key.truncation = j.at("truncation").get<std::string>();
  auto mode = protocol::parse_mode(j.at("mode").get<std::string>());
  if (!mode) throw std::invalid_argument("unknown mode");
  e.key.mode = *mode;
  e.key.segment_length = j.value("segment_length", std::int64_t{0});
  e.key.segment_index = j.value("segment_index", std::int64_t{-1});
  if (j.contains("mean_nll")) e.mean_nll = j["mean_nll"].get<double>();
  if (j.contains("attention")) e.attention = j["attention"].get<std::vector<double>>();
  if (j.contains("token_count_context")) {
    e.counts = TokenCounts{j["token_count_context"].get<std::size_t>(), j["token_count_instruction"].get<std::size_t>(),
                           j["token_count_response"].get<std::size_t>()};
  }
  if (j.contains("error")) {
    e.error = protocol::ErrorInfo{j["error"].at("code").get<std::string>(), j["error"].value("message", "")};
  }
  return e;
}

}  // namespace

ScoreCache::ScoreCache(std::filesystem::path path) : path_(std::move(path)) {
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw UserError("cannot read score cache " + path_.string());
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    // Drop a torn trailing record so later appends start on a fresh line.
    const auto last_nl = content.rfind('\n');
    const std::size_t valid = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (valid != content.size()) {
      std::cerr << "depsel: note: discarding incomplete last record of " << path_.string() << '\n';
      std::filesystem::resize_file(path_, valid);
      content.resize(valid);
    }

    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < content.size()) {
      auto nl = content.find('\n', pos);
      std::string_view line(content.data() + pos, nl - pos);
      pos = nl + 1;
      ++line_no;
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      try {
        if (j.is_discarded() || !j.is_object()) throw std::invalid_argument("not a JSON object");
        const auto type = j.value("type", "score");
        if (type == "descriptor") {
          descriptors_[j.at("role").get<std::string>()] = protocol::decode_descriptor(j.at("descriptor").dump());
        } else {
          auto e = decode_entry(j);
          entries_.insert_or_assign(e.key.str(), std::move(e));
        }
      } catch (const std::exception& ex) {
        std::cerr << "depsel: warning: " << path_.string() << ":" << line_no << ": ignoring bad cache record ("
                  << ex.what() << ")\n";
      }
    }
  } else if (path_.has_parent_path()) {
    std::filesystem::create_directories(path_.parent_path());
  }
  out_.open(path_, std::ios::binary | std::ios::app);
  if (!out_) throw UserError("cannot open score cache " + path_.string() + " for writing");
}

const CacheEntry* ScoreCache::find(const CacheKey& key) const {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(key.str());
  return it == entries_.end() ? nullptr : &it->second;
}

void ScoreCache::append_line(const std::string& line) {
  out_ << line << '\n';
  out_.flush();
  if (!out_) throw UserError("error while writing score cache " + path_.string());
}

void ScoreCache::put(CacheEntry entry) {
  const auto line = encode_entry(entry).dump(-1, ' ', false, json::error_handler_t::replace);
  std::lock_guard lock(mutex_);
  append_line(line);
  entries_.insert_or_assign(entry.key.str(), std::move(entry));
}

std::optional<protocol::BackendDescriptor> ScoreCache::descriptor(const std::string& role) const {
  std::lock_guard lock(mutex_);
  auto it = descriptors_.find(role);
  if (it == descriptors_.end()) return std::nullopt;
  return it->second;
}

void ScoreCache::put_descriptor(const std::string& role, const protocol::BackendDescriptor& descriptor) {
  std::lock_guard lock(mutex_);
  auto it = descriptors_.find(role);
  if (it != descriptors_.end() && it->second == descriptor) return;
  ojson j;
  j["type"] = "descriptor";
  j["role"] = role;
  j["descriptor"] = ojson::parse(protocol::encode(descriptor));
  append_line(j.dump());
  descriptors_[role] = descriptor;
}

std::size_t ScoreCache::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

}  // namespace depsel
