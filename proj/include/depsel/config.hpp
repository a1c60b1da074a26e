#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "depsel/cam.hpp"
#include "depsel/corpus.hpp"
#include "depsel/ranker.hpp"

namespace depsel {

// Short-data setting; picks the default alpha and short fraction.
enum class MixSetting { real_world, limited_short };

MixSetting parse_setting(std::string_view text);
std::string_view to_string(MixSetting setting);

struct RunConfig {
  std::filesystem::path corpus;
  std::string backend_a;  // endpoint, see open_backend()
  std::string backend_b;
  RunMode mode = RunMode::gateau;
  std::size_t segment_length = kDefaultSegmentLength;
  MixSetting setting = MixSetting::real_world;
  std::optional<double> alpha;  // default follows the setting
  double temperature = 1.0;
  bool no_norm = false;
  TruncationPolicy truncation{};
  double cut_ratio = 0.1;
  std::filesystem::path short_source;
  std::optional<double> short_fraction;  // default follows the setting
  std::optional<double> long_ratio;
  std::filesystem::path cache = "scores.cache.jsonl";
  std::filesystem::path manifest = "manifest.jsonl";
  std::filesystem::path output = "train.jsonl";
  std::optional<std::filesystem::path> profile_dump;
  bool strict = false;
  bool allow_nonhomologous = false;
  std::size_t concurrency = 8;
  std::size_t retries = 2;
  // Stop issuing scoring requests after this many (simulated interruption).
  std::optional<std::uint64_t> request_limit;

  double resolved_alpha() const;
  MixSpec mix_spec() const;
  // Throws UserError on out-of-range or missing mode-required fields.
  void validate() const;
};

// Reads a JSON config file. Unknown keys are rejected so typos surface.
RunConfig load_config(const std::filesystem::path& path);
RunConfig config_from_json_text(std::string_view text, const std::filesystem::path& base_dir = {});

// Hex SHA-256 of the given text.
std::string sha256_hex(std::string_view text);

}  // namespace depsel
