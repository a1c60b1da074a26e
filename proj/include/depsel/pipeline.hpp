#pragma once

// Pipeline stages: score (expensive, resumable, fills the cache), select
// (cheap, pure function of cache + config), emit (training-set mixing).

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "depsel/cache.hpp"
#include "depsel/config.hpp"
#include "depsel/gateway.hpp"
#include "depsel/ranker.hpp"

namespace depsel {

// Raised when RunConfig::request_limit stops a scoring run early.
class Interrupted : public BackendError {
 public:
  explicit Interrupted(const std::string& what) : BackendError(what, false) {}
};

struct BackendSet {
  std::unique_ptr<Backend> a;  // null when the mode does not use it
  std::unique_ptr<Backend> b;
};

BackendSet open_backends(const RunConfig& config);

// What one run scores, derived from the config and the backend descriptors.
struct ScoringPlan {
  RunMode requested_mode = RunMode::gateau;
  RunMode mode = RunMode::gateau;  // after degrading for missing attention
  std::optional<protocol::BackendDescriptor> backend_a;
  protocol::BackendDescriptor backend_b;
  TruncationPolicy truncation;  // capped by the backends' context windows
  std::size_t segment_length = kDefaultSegmentLength;
};

ScoringPlan make_plan(const RunConfig& config, const std::optional<protocol::BackendDescriptor>& a,
                      const protocol::BackendDescriptor& b);

enum class BackendRole { a, b };

struct PlannedRequest {
  BackendRole role;
  CacheKey key;
  protocol::ScoringRequest request;
  std::size_t expected_segments = 0;  // attention_profile only
};

CacheKey tokenize_key(const ScoringPlan& plan, const std::string& sample_id);
// Every score the selected mode needs for one truncated, scoreable sample.
std::vector<PlannedRequest> required_requests(const ScoringPlan& plan, const TruncatedSample& sample);

struct ScoreSummary {
  std::size_t samples = 0;
  std::size_t unscoreable = 0;
  std::size_t failed = 0;  // requests answered with an in-band error
  std::size_t cache_hits = 0;
  std::uint64_t requests = 0;
  LoadStats load;
};

ScoreSummary run_score(const RunConfig& config, Backend* backend_a, Backend& backend_b);
ScoreSummary cmd_score(const RunConfig& config);

struct SelectOutcome {
  SelectionManifest manifest;
  std::vector<SegmentProfile> profiles;
  std::vector<StageTiming> timings;
};

// Needs no backend: descriptors and scores come from the cache. Throws
// UserError listing missing keys when the cache is incomplete.
SelectOutcome run_select(const RunConfig& config);
SelectOutcome cmd_select(const RunConfig& config);  // also writes the manifest

MixSummary cmd_emit(const RunConfig& config);

}  // namespace depsel
