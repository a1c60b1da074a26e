#include "depsel/config.hpp"

#include <fstream>
#include <iomanip>
#include <openssl/sha.h>
#include <set>
#include <sstream>

#include "depsel/error.hpp"
#include "json.hpp"

namespace depsel {

using nlohmann::json;

MixSetting parse_setting(std::string_view text) {
  if (text == "real_world") return MixSetting::real_world;
  if (text == "limited_short") return MixSetting::limited_short;
  throw UserError("unknown setting '" + std::string(text) + "' (real_world or limited_short)");
}

std::string_view to_string(MixSetting setting) {
  return setting == MixSetting::real_world ? "real_world" : "limited_short";
}

double RunConfig::resolved_alpha() const {
  if (alpha) return *alpha;
  return setting == MixSetting::real_world ? kAlphaRealWorld : kAlphaLimitedShort;
}

MixSpec RunConfig::mix_spec() const {
  MixSpec m;
  m.short_source = short_source;
  m.long_ratio = long_ratio;
  m.short_fraction = short_fraction.value_or(setting == MixSetting::real_world ? 1.0 : 0.1);
  return m;
}

void RunConfig::validate() const {
  if (backend_b.empty()) throw UserError("backend_b is required");
  if (needs_backend_a(mode) && backend_a.empty()) {
    throw UserError("mode " + std::string(to_string(mode)) + " needs backend_a");
  }
  if (segment_length == 0) throw UserError("segment_length must be positive");
  const double a = resolved_alpha();
  if (!(a >= 0.0 && a <= 1.0)) throw UserError("alpha must lie in [0, 1]");
  if (!(temperature > 0.0)) throw UserError("temperature must be positive");
  if (!(cut_ratio > 0.0 && cut_ratio <= 1.0)) throw UserError("cut_ratio must lie in (0, 1]");
  truncation.validate();
  if (truncation.side != TruncationSide::left) throw UserError("scoring truncation must be left-sided");
  mix_spec().validate();
  if (concurrency == 0) throw UserError("concurrency must be at least 1");
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

}  // namespace

RunConfig config_from_json_text(std::string_view text, const std::filesystem::path& base_dir) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw UserError("config is not a JSON object");

  static const std::set<std::string> known = {
      "corpus", "backend_a", "backend_b", "mode", "segment_length", "setting", "alpha", "temperature", "no_norm",
      "truncation", "cut_ratio", "mix", "cache", "manifest", "output", "profile_dump", "strict",
      "allow_nonhomologous", "concurrency", "retries"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw UserError("unknown config key '" + key + "'");
  }

  RunConfig c;
  try {
    if (j.contains("corpus")) c.corpus = resolve(base_dir, j["corpus"].get<std::string>());
    c.backend_a = j.value("backend_a", "");
    c.backend_b = j.value("backend_b", "");
    if (j.contains("mode")) c.mode = parse_run_mode(j["mode"].get<std::string>());
    c.segment_length = j.value("segment_length", c.segment_length);
    if (j.contains("setting")) c.setting = parse_setting(j["setting"].get<std::string>());
    if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
    c.temperature = j.value("temperature", c.temperature);
    c.no_norm = j.value("no_norm", c.no_norm);
    if (j.contains("truncation")) {
      const auto& t = j["truncation"];
      c.truncation.max_tokens = t.value("max_tokens", c.truncation.max_tokens);
      const auto side = t.value("side", std::string("left"));
      if (side == "left") {
        c.truncation.side = TruncationSide::left;
      } else if (side == "right") {
        c.truncation.side = TruncationSide::right;
      } else {
        throw UserError("truncation side must be left or right");
      }
    }
    c.cut_ratio = j.value("cut_ratio", c.cut_ratio);
    if (j.contains("mix")) {
      const auto& m = j["mix"];
      for (const auto& [key, _] : m.items()) {
        if (key != "long_ratio" && key != "short_source" && key != "short_fraction") {
          throw UserError("unknown mix key '" + key + "'");
        }
      }
      if (m.contains("long_ratio")) c.long_ratio = m["long_ratio"].get<double>();
      if (m.contains("short_source")) c.short_source = resolve(base_dir, m["short_source"].get<std::string>());
      if (m.contains("short_fraction")) c.short_fraction = m["short_fraction"].get<double>();
    }
    if (j.contains("cache")) c.cache = resolve(base_dir, j["cache"].get<std::string>());
    if (j.contains("manifest")) c.manifest = resolve(base_dir, j["manifest"].get<std::string>());
    if (j.contains("output")) c.output = resolve(base_dir, j["output"].get<std::string>());
    if (j.contains("profile_dump")) c.profile_dump = resolve(base_dir, j["profile_dump"].get<std::string>());
    c.strict = j.value("strict", c.strict);
    c.allow_nonhomologous = j.value("allow_nonhomologous", c.allow_nonhomologous);
    c.concurrency = j.value("concurrency", c.concurrency);
    c.retries = j.value("retries", c.retries);
  } catch (const json::exception& e) {
    throw UserError(std::string("bad config value: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return config_from_json_text(buf.str(), path.parent_path());
}

std::string sha256_hex(std::string_view text) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest);
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned char b : digest) out << std::setw(2) << static_cast<int>(b);
  return out.str();
}

}  // namespace depsel
