#pragma once

// Contextual awareness: split the context into fixed-length segments, score
// how hard the response is given each segment alone (importance) and how
// much attention the response pays to each segment, and compare the two.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace depsel {

class Backend;
struct TruncatedSample;

struct SegmentRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const SegmentRange&) const = default;
};

// ceil(n / L) contiguous ranges covering [0, n); only the last may be short.
// Throws UserError for n == 0 or L == 0.
std::vector<SegmentRange> segment_plan(std::size_t token_count_context, std::size_t segment_length);

inline constexpr std::size_t kDefaultSegmentLength = 128;

// softmax over segments of exp(mean NLL), i.e. of the per-segment
// perplexities. Higher entries mark less useful segments.
std::vector<double> importance_from_nlls(std::span<const double> segment_nlls);
// softmax over segments of the per-segment mean attention.
std::vector<double> attention_from_means(std::span<const double> segment_means);
// Cosine similarity. Throws std::invalid_argument on size mismatch or a
// zero vector.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct SegmentProfile {
  std::string sample_id;
  std::size_t segment_length = kDefaultSegmentLength;
  std::size_t n_segments = 0;
  std::vector<double> importance;
  std::vector<double> attention;
  double cas = 0.0;
};

// Builds the profile from raw backend outputs (one NLL and one attention
// mean per segment).
SegmentProfile make_profile(std::string sample_id, std::size_t segment_length, std::span<const double> segment_nlls,
                            std::span<const double> attention_means);

// Backend-driven variants; both use segment_length-sized segments of the
// truncated context.
std::vector<double> importance_vector(Backend& backend, const TruncatedSample& sample, std::size_t segment_length);
std::vector<double> attention_vector(Backend& backend, const TruncatedSample& sample, std::size_t segment_length);
SegmentProfile contextual_awareness(Backend& backend, const TruncatedSample& sample, std::size_t segment_length);

}  // namespace depsel
