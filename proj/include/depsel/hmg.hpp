#pragma once

// Homologous-model guidance: compare response perplexity under a
// short-window backend (A) and a long-window backend (B) after normalizing
// each over the whole scored corpus.

#include <span>
#include <string>
#include <vector>

#include "depsel/protocol.hpp"

namespace depsel {

class Backend;
struct TruncatedSample;

// Shifted softmax of values / temperature. Throws std::invalid_argument on an
// empty input, a non-positive temperature, or a non-finite value (the message
// carries the offending index).
std::vector<double> softmax_normalize(std::span<const double> values, double temperature = 1.0);

struct PerplexityPair {
  std::string sample_id;
  double ppl_a = 0.0;
  double ppl_b = 0.0;
};

struct HmgRecord {
  std::string sample_id;
  double ppl_a = 0.0;
  double ppl_b = 0.0;
  double norm_a = 0.0;
  double norm_b = 0.0;
  double hmp = 0.0;
};

struct HmgOptions {
  double temperature = 1.0;
  // Ablation: hmp = ppl_a - ppl_b without corpus normalization.
  bool no_norm = false;
};

// Pure normalize-and-diff over the collected corpus. Throws UserError naming
// the sample when a perplexity is non-finite.
std::vector<HmgRecord> compute_hmg(std::span<const PerplexityPair> pairs, const HmgOptions& options = {});

// Throws UserError unless the tokenizers match and A has the strictly
// shorter context window. `allow_override` downgrades both to warnings.
void check_homologous(const protocol::BackendDescriptor& a, const protocol::BackendDescriptor& b,
                      bool allow_override);

// Scores every sample under both backends (full_ppl) and normalizes.
std::vector<HmgRecord> score_hmg(Backend& backend_a, Backend& backend_b, std::span<const TruncatedSample> samples,
                                 const HmgOptions& options = {}, bool allow_override = false);

struct PerplexityRank {
  std::string sample_id;
  double ppl_b = 0.0;
  std::size_t rank = 0;
};

// Baseline guidance: rank by descending perplexity under B alone, ties by
// ascending sample id.
std::vector<PerplexityRank> rank_by_perplexity(std::vector<PerplexityRank> values);

std::vector<PerplexityRank> compute_ppl_guidance(Backend& backend_b, std::span<const TruncatedSample> samples);

}  // namespace depsel
