#pragma once

// Independent reference implementations used as test oracles. These must not
// share code with the library paths they check.

#include <algorithm>
#include <random>
#include <vector>

#include "editproc/common.hpp"

namespace editproc::testing {

// Plain dynamic-programming Levenshtein distance, no backtrace.
inline int levenshtein_distance(const Tokens& a, const Tokens& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline Tokens random_tokens(std::mt19937_64& rng, int max_len, int vocab, int min_len = 0) {
  std::uniform_int_distribution<int> len_dist(min_len, max_len);
  std::uniform_int_distribution<TokenId> tok_dist(0, vocab - 1);
  Tokens out(len_dist(rng));
  for (auto& t : out) t = tok_dist(rng);
  return out;
}

}  // namespace editproc::testing
