#pragma once

// Instruction-following corpora as newline-delimited JSON records:
//   {"id": ..., "context": ..., "instruction": ..., "response": ..., "meta": {...}}
// Multi-turn short records may instead carry "conversations"; they are
// flattened so every sample is a single (context, instruction; response).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace depsel {

class Backend;
struct SelectionManifest;

enum class SampleKind { long_context, short_context };

std::string_view to_string(SampleKind kind);
SampleKind parse_kind(std::string_view text);

struct Sample {
  std::string id;
  std::string context;
  std::string instruction;
  std::string response;
  SampleKind kind = SampleKind::long_context;
  std::map<std::string, std::string> meta;

  bool operator==(const Sample&) const = default;
};

struct Turn {
  std::string role;
  std::string text;
};

// instruction = every turn before the last assistant turn, one "role: text"
// line per turn; response = that assistant turn. Turns after it are dropped.
// Returns nullopt when there is no assistant turn.
struct FlattenedTurns {
  std::string instruction;
  std::string response;
};
std::optional<FlattenedTurns> flatten_conversation(std::span<const Turn> turns);

struct LoadOptions {
  // Malformed lines abort the load instead of being skipped and counted.
  bool strict = false;
  // Sidecar log receiving one "line N: reason" entry per skipped line.
  std::optional<std::filesystem::path> skip_log;
};

struct SkipEntry {
  std::size_t line = 0;
  std::string reason;
};

struct LoadStats {
  std::size_t lines = 0;
  std::size_t accepted = 0;
  std::size_t empty_response = 0;
  std::size_t malformed = 0;
  std::vector<SkipEntry> skips;
};

// Single-pass streaming reader. Not shareable between consumers.
class CorpusReader {
 public:
  CorpusReader(const std::filesystem::path& path, SampleKind kind, LoadOptions options = {});
  ~CorpusReader();
  CorpusReader(const CorpusReader&) = delete;
  CorpusReader& operator=(const CorpusReader&) = delete;

  std::optional<Sample> next();
  const LoadStats& stats() const { return stats_; }

 private:
  void skip(std::size_t line, std::string reason, bool malformed);

  std::filesystem::path path_;
  SampleKind kind_;
  LoadOptions options_;
  std::ifstream in_;
  std::unique_ptr<std::ofstream> skip_log_;
  std::unordered_map<std::string, std::size_t> seen_;
  std::size_t line_no_ = 0;
  LoadStats stats_;
};

std::vector<Sample> load_corpus(const std::filesystem::path& path, SampleKind kind, const LoadOptions& options = {},
                                LoadStats* stats = nullptr);

// Parses one record line. Throws std::invalid_argument describing why the
// line is malformed.
Sample parse_record(std::string_view line, SampleKind kind);
std::string encode_record(const Sample& sample, std::optional<std::string_view> origin = std::nullopt);

enum class TruncationSide { left, right };

struct TruncationPolicy {
  std::int64_t max_tokens = 65536;
  TruncationSide side = TruncationSide::left;

  void validate() const;
  // Stable text form used in cache keys and fingerprints, e.g. "left:65536".
  std::string key() const;
};

struct TokenCounts {
  std::size_t context = 0;
  std::size_t instruction = 0;
  std::size_t response = 0;
};

// A sample prepared for scoring. Texts are never modified; the leading
// context_skip tokens are dropped backend-side.
struct TruncatedSample {
  Sample sample;
  TokenCounts counts;           // before truncation
  std::size_t context_skip = 0;
  std::size_t context_tokens = 0;  // kept after truncation
  bool scoreable = true;
  std::string reason;  // why the sample is unscoreable
};

TruncatedSample truncate_for_scoring(Sample sample, const TruncationPolicy& policy, const TokenCounts& counts);
// Asks the backend for token counts, then truncates.
TruncatedSample truncate_for_scoring(Sample sample, const TruncationPolicy& policy, Backend& backend);

struct MixSpec {
  // When set, must agree with the manifest's cut ratio.
  std::optional<double> long_ratio;
  std::filesystem::path short_source;  // empty: no short data
  double short_fraction = 1.0;

  void validate() const;
};

struct MixSummary {
  std::size_t long_count = 0;
  std::size_t short_count = 0;
  std::size_t total() const { return long_count + short_count; }
};

// Writes the selected long samples in the given order followed by the first
// floor(short_fraction * |short|) short samples, each tagged with its origin.
MixSummary mix_training_set(std::span<const std::string> selected_ids, const std::filesystem::path& long_corpus,
                            const MixSpec& spec, const std::filesystem::path& out, const LoadOptions& options = {});
MixSummary mix_training_set(const SelectionManifest& manifest, const std::filesystem::path& long_corpus,
                            const MixSpec& spec, const std::filesystem::path& out, const LoadOptions& options = {});

}  // namespace depsel
