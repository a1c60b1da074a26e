#pragma once

// Brute-force reference for the CopyLM closed forms. Shares no code with the
// library: probabilities are normalized by summing over the whole
// vocabulary, attention is built as full per-position rows, and every
// reduction runs in long double.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace oracle {

using Seq = std::vector<unsigned>;

struct Params {
  unsigned vocab = 32;
  long double beta = 9;
  std::optional<std::size_t> window;
  long double gamma = 9;
  unsigned shift = 0;
};

inline std::set<unsigned> visible(const Seq& prefix, const std::optional<std::size_t>& window) {
  std::size_t start = 0;
  if (window && prefix.size() > *window) start = prefix.size() - *window;
  return std::set<unsigned>(prefix.begin() + static_cast<std::ptrdiff_t>(start), prefix.end());
}

// Full next-token distribution over the vocabulary.
inline std::vector<long double> distribution(const Params& p, const Seq& prefix) {
  const auto seen = visible(prefix, p.window);
  std::vector<long double> weight(p.vocab);
  long double z = 0;
  for (unsigned v = 0; v < p.vocab; ++v) {
    weight[v] = 1 + (seen.count(v) ? p.beta : 0);
    z += weight[v];
  }
  for (auto& w : weight) w /= z;
  return weight;
}

inline long double mean_nll(const Params& p, const Seq& prefix, const Seq& response) {
  Seq seq = prefix;
  long double total = 0;
  for (unsigned y : response) {
    total -= std::log(distribution(p, seq)[y]);
    seq.push_back(y);
  }
  return total / static_cast<long double>(response.size());
}

inline Seq concat(const Seq& a, const Seq& b) {
  Seq out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// rows[j][t]: weight from response position j to context position t.
inline std::vector<std::vector<long double>> attention_rows(const Params& p, const Seq& context, const Seq& response) {
  std::vector<std::vector<long double>> rows;
  for (unsigned y : response) {
    const unsigned target = (y + p.shift) % p.vocab;
    std::vector<long double> row(context.size());
    long double z = 0;
    for (std::size_t t = 0; t < context.size(); ++t) {
      row[t] = 1 + (context[t] == target ? p.gamma : 0);
      z += row[t];
    }
    for (auto& w : row) w /= z;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::pair<std::size_t, std::size_t>> segments(std::size_t n, std::size_t length) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += length) out.emplace_back(b, b + length < n ? b + length : n);
  return out;
}

inline std::vector<long double> segment_attention(const Params& p, const Seq& context, const Seq& response,
                                                  std::size_t length) {
  const auto rows = attention_rows(p, context, response);
  std::vector<long double> out;
  for (auto [b, e] : segments(context.size(), length)) {
    long double sum = 0;
    for (std::size_t t = b; t < e; ++t) {
      for (const auto& row : rows) sum += row[t];
    }
    out.push_back(sum / static_cast<long double>(rows.size()) / static_cast<long double>(e - b));
  }
  return out;
}

inline std::vector<long double> segment_nlls(const Params& p, const Seq& context, const Seq& instruction,
                                             const Seq& response, std::size_t length) {
  std::vector<long double> out;
  for (auto [b, e] : segments(context.size(), length)) {
    Seq prefix(context.begin() + static_cast<std::ptrdiff_t>(b), context.begin() + static_cast<std::ptrdiff_t>(e));
    out.push_back(mean_nll(p, concat(prefix, instruction), response));
  }
  return out;
}

// Textbook softmax: exponentiate, sum, divide. No shifting, so callers keep
// inputs small enough for long double.
inline std::vector<long double> softmax(const std::vector<long double>& v, long double tau = 1) {
  std::vector<long double> out;
  long double z = 0;
  for (auto x : v) {
    out.push_back(std::exp(x / tau));
    z += out.back();
  }
  for (auto& x : out) x /= z;
  return out;
}

inline long double cosine(const std::vector<long double>& a, const std::vector<long double>& b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

inline std::string text(const Seq& s) {
  std::ostringstream out;
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
  return out.str();
}

}  // namespace oracle
