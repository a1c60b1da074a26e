#pragma once

// CopyLM: a closed-form mock language model used as a deterministic scoring
// backend.
//
// Tokens are whitespace-separated non-negative integers below vocab_size.
// Given a conditioning prefix, the visible window is the last `window` tokens
// of that prefix (all of it when the window is unbounded). With M distinct
// tokens in the window,
//
//   P(v | prefix) = (1 + copy_bonus * [v in window]) / (V + copy_bonus * M).
//
// Attention from response position j to context position t is
// proportional to 1 + attention_bonus * [c_t == (y_j + attention_shift) mod V],
// normalized over the context positions only. A nonzero shift makes the
// model look at tokens other than the ones it copies, which is how tests
// plant misaligned attention.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "depsel/protocol.hpp"

namespace depsel {

using Token = std::uint32_t;

struct CopyLMParams {
  std::uint32_t vocab_size = 32;
  double copy_bonus = 9.0;
  std::optional<std::uint64_t> window;  // nullopt: unbounded
  double attention_bonus = 9.0;
  std::uint32_t attention_shift = 0;
  // Advertised in the descriptor; requests longer than this are rejected.
  std::int64_t context_window = 65536;
  std::string name;  // empty: derived from the other fields

  void validate() const;

  // "V=32,beta=9,window=4,gamma=9,shift=0,ctx=4096,name=short". Missing keys
  // keep their defaults; window=inf means unbounded.
  static CopyLMParams parse(std::string_view spec);
  std::string to_spec() const;
  std::string resolved_name() const;
};

class CopyLM {
 public:
  explicit CopyLM(CopyLMParams params);

  const CopyLMParams& params() const { return params_; }
  protocol::BackendDescriptor descriptor() const;

  // Throws std::invalid_argument on non-integer or out-of-vocabulary tokens.
  std::vector<Token> tokenize(std::string_view text) const;

  // Mean of -ln P(y_j | prefix, y_<j) over the response.
  double mean_nll(std::span<const Token> prefix, std::span<const Token> response) const;

  // Attention weight on each context position, averaged over response
  // positions. Sums to 1 whenever context and response are nonempty.
  std::vector<double> context_attention(std::span<const Token> context,
                                        std::span<const Token> response) const;

  // Answers one protocol request. Never throws; failures come back in-band.
  protocol::ScoringResponse handle(const protocol::ScoringRequest& request) const;

 private:
  CopyLMParams params_;
};

}  // namespace depsel
