#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "steu/corpus.hpp"

namespace steu::test {

// Recomputes the selection straight from the documents.
inline std::vector<TokenId> brute_force_selection(const LabeledDataset& ds, std::size_t cf, std::size_t k, std::size_t min_freq) {
  std::map<TokenId, std::uint64_t> nf, nall;
  std::uint64_t Nf = 0, Nall = 0;
  for (const auto& d : ds.train) {
    for (TokenId t : d.token_ids) {
      ++nall[t];
      ++Nall;
      if (d.labels[cf]) {
        ++nf[t];
        ++Nf;
      }
    }
  }
  struct Row {
    TokenId id;
    std::uint64_t n_f;
    double score;
  };
  std::vector<Row> rows;
  for (auto [t, n] : nf) {
    if (t == kPadId || t == kUnkId || n < min_freq) continue;
    const double pmi = std::log2(static_cast<double>(n * Nall) / static_cast<double>(nall[t] * Nf));
    rows.push_back({t, n, pmi * std::log1p(static_cast<double>(n))});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.n_f != b.n_f) return a.n_f > b.n_f;
    return a.id < b.id;
  });
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < rows.size() && i < k; ++i) out.push_back(rows[i].id);
  return out;
}

}  // namespace steu::test
