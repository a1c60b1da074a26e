#include "depsel/cam.hpp"

#include <cmath>
#include <stdexcept>

#include "depsel/error.hpp"
#include "depsel/gateway.hpp"
#include "depsel/hmg.hpp"

namespace depsel {

std::vector<SegmentRange> segment_plan(std::size_t token_count_context, std::size_t segment_length) {
  if (segment_length == 0) throw UserError("segment length must be positive");
  if (token_count_context == 0) throw UserError("context has no tokens; contextual awareness is undefined");
  const std::size_t n = (token_count_context + segment_length - 1) / segment_length;
  std::vector<SegmentRange> plan;
  plan.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    plan.push_back({i * segment_length, std::min(token_count_context, (i + 1) * segment_length)});
  }
  return plan;
}

std::vector<double> importance_from_nlls(std::span<const double> segment_nlls) {
  std::vector<double> ppl;
  ppl.reserve(segment_nlls.size());
  for (double nll : segment_nlls) ppl.push_back(std::exp(nll));
  return softmax_normalize(ppl);
}

std::vector<double> attention_from_means(std::span<const double> segment_means) {
  return softmax_normalize(segment_means);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine similarity of vectors with different lengths");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine similarity of a zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

SegmentProfile make_profile(std::string sample_id, std::size_t segment_length, std::span<const double> segment_nlls,
                            std::span<const double> attention_means) {
  if (segment_nlls.empty()) throw UserError("sample " + sample_id + " has no segments");
  if (segment_nlls.size() != attention_means.size()) {
    throw UserError("sample " + sample_id + ": " + std::to_string(segment_nlls.size()) + " segment scores but " +
                    std::to_string(attention_means.size()) + " attention entries");
  }
  SegmentProfile p;
  p.sample_id = std::move(sample_id);
  p.segment_length = segment_length;
  p.n_segments = segment_nlls.size();
  p.importance = importance_from_nlls(segment_nlls);
  p.attention = attention_from_means(attention_means);
  p.cas = cosine_similarity(p.importance, p.attention);
  return p;
}

std::vector<double> importance_vector(Backend& backend, const TruncatedSample& sample, std::size_t segment_length) {
  const auto plan = segment_plan(sample.context_tokens, segment_length);
  std::vector<double> nlls;
  nlls.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) nlls.push_back(score_segment(backend, sample, segment_length, i));
  return importance_from_nlls(nlls);
}

std::vector<double> attention_vector(Backend& backend, const TruncatedSample& sample, std::size_t segment_length) {
  return attention_from_means(attention_profile(backend, sample, segment_length));
}

SegmentProfile contextual_awareness(Backend& backend, const TruncatedSample& sample, std::size_t segment_length) {
  const auto plan = segment_plan(sample.context_tokens, segment_length);
  std::vector<double> nlls;
  nlls.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) nlls.push_back(score_segment(backend, sample, segment_length, i));
  const auto means = attention_profile(backend, sample, segment_length);
  return make_profile(sample.sample.id, segment_length, nlls, means);
}

}  // namespace depsel
