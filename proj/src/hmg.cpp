#include "depsel/hmg.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "depsel/error.hpp"
#include "depsel/gateway.hpp"

namespace depsel {

std::vector<double> softmax_normalize(std::span<const double> values, double temperature) {
  if (values.empty()) throw std::invalid_argument("softmax of an empty sequence");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("softmax temperature must be positive and finite");
  }
  std::vector<double> out(values.size());
  double max = -INFINITY;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::invalid_argument("non-finite value at index " + std::to_string(i));
    }
    out[i] = values[i] / temperature;
    max = std::max(max, out[i]);
  }
  double sum = 0.0;
  for (double& v : out) {
    v = std::exp(v - max);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<HmgRecord> compute_hmg(std::span<const PerplexityPair> pairs, const HmgOptions& options) {
  if (pairs.empty()) return {};
  std::vector<double> a, b;
  a.reserve(pairs.size());
  b.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!std::isfinite(p.ppl_a) || !std::isfinite(p.ppl_b)) {
      throw UserError("sample " + p.sample_id + " has a non-finite perplexity");
    }
    a.push_back(p.ppl_a);
    b.push_back(p.ppl_b);
  }

  std::vector<HmgRecord> out(pairs.size());
  if (options.no_norm) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      out[i] = {pairs[i].sample_id, a[i], b[i], a[i], b[i], a[i] - b[i]};
    }
    return out;
  }
  const auto norm_a = softmax_normalize(a, options.temperature);
  const auto norm_b = softmax_normalize(b, options.temperature);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out[i] = {pairs[i].sample_id, a[i], b[i], norm_a[i], norm_b[i], norm_a[i] - norm_b[i]};
  }
  return out;
}

void check_homologous(const protocol::BackendDescriptor& a, const protocol::BackendDescriptor& b,
                      bool allow_override) {
  std::string problem;
  if (!protocol::homologous_comparable(a, b)) {
    problem = "backends " + a.name + " and " + b.name + " tokenize differently (" + a.tokenizer_fingerprint +
              " vs " + b.tokenizer_fingerprint + "), so their perplexities are not comparable";
  } else if (a.context_window >= b.context_window) {
    problem = "backend A (" + a.name + ", window " + std::to_string(a.context_window) +
              ") must have a shorter context window than backend B (" + b.name + ", window " +
              std::to_string(b.context_window) + ")";
  }
  if (problem.empty()) return;
  if (!allow_override) throw UserError(problem);
  std::cerr << "depsel: warning: " << problem << " (overridden)\n";
}

std::vector<HmgRecord> score_hmg(Backend& backend_a, Backend& backend_b, std::span<const TruncatedSample> samples,
                                 const HmgOptions& options, bool allow_override) {
  check_homologous(backend_a.descriptor(), backend_b.descriptor(), allow_override);
  std::vector<PerplexityPair> pairs;
  for (const auto& s : samples) {
    if (!s.scoreable) continue;
    pairs.push_back({s.sample.id, std::exp(score_full(backend_a, s)), std::exp(score_full(backend_b, s))});
  }
  return compute_hmg(pairs, options);
}

std::vector<PerplexityRank> rank_by_perplexity(std::vector<PerplexityRank> values) {
  std::sort(values.begin(), values.end(), [](const PerplexityRank& x, const PerplexityRank& y) {
    if (x.ppl_b != y.ppl_b) return x.ppl_b > y.ppl_b;
    return x.sample_id < y.sample_id;
  });
  for (std::size_t i = 0; i < values.size(); ++i) values[i].rank = i + 1;
  return values;
}

std::vector<PerplexityRank> compute_ppl_guidance(Backend& backend_b, std::span<const TruncatedSample> samples) {
  std::vector<PerplexityRank> values;
  for (const auto& s : samples) {
    if (!s.scoreable) continue;
    values.push_back({s.sample.id, std::exp(score_full(backend_b, s)), 0});
  }
  return rank_by_perplexity(std::move(values));
}

}  // namespace depsel
