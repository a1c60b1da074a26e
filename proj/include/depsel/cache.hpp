#pragma once

// Append-only score cache. Holds raw backend outputs only (mean NLLs,
// attention means, token counts, in-band errors), never normalized values,
// so selection parameters can change without rescoring. A torn final line
// left by an interrupted run is discarded on open.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "depsel/corpus.hpp"
#include "depsel/protocol.hpp"

namespace depsel {

struct CacheKey {
  std::string sample_id;
  std::string backend;
  std::string tokenizer;
  std::string truncation;  // empty for tokenize_info (counts are pre-truncation)
  protocol::Mode mode = protocol::Mode::full_ppl;
  std::int64_t segment_length = 0;
  std::int64_t segment_index = -1;

  std::string str() const;
  bool operator==(const CacheKey&) const = default;
};

struct CacheEntry {
  CacheKey key;
  std::optional<double> mean_nll;
  std::optional<std::vector<double>> attention;
  std::optional<TokenCounts> counts;
  std::optional<protocol::ErrorInfo> error;
};

class ScoreCache {
 public:
  explicit ScoreCache(std::filesystem::path path);

  const CacheEntry* find(const CacheKey& key) const;
  // Appends and flushes one record. Safe to call from several threads.
  void put(CacheEntry entry);

  std::optional<protocol::BackendDescriptor> descriptor(const std::string& role) const;
  void put_descriptor(const std::string& role, const protocol::BackendDescriptor& descriptor);

  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  void append_line(const std::string& line);

  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::unordered_map<std::string, CacheEntry> entries_;
  std::map<std::string, protocol::BackendDescriptor> descriptors_;
  std::ofstream out_;
};

}  // namespace depsel
