#pragma once

// Forget-class token selection by frequency-weighted PMI:
//
//   score(t) = log2(P(t|forget) / P(t|all)) * log(1 + n_f(t))
//
// with P(t|forget) = n_f(t) / N_f and P(t|all) = n_all(t) / N_all over the
// training split.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "steu/corpus.hpp"

namespace steu {

struct TokenStats {
  std::vector<std::uint64_t> n_forget;
  std::vector<std::uint64_t> n_retain;
  std::uint64_t total_forget = 0;
  std::uint64_t total_all = 0;
  std::size_t forget_documents = 0;

  std::uint64_t n_all(TokenId t) const { return n_forget[t] + n_retain[t]; }
  std::size_t vocab_size() const { return n_forget.size(); }
};

/// A document is forget-class iff it carries label `forget_class` (other
/// labels on it do not matter). Occurrences are counted with multiplicity.
TokenStats count_token_stats(const LabeledDataset& dataset, std::size_t forget_class);

enum class WeightLog { natural, base2 };

struct TokenScore {
  TokenId token_id = 0;
  std::uint64_t n_f = 0;
  std::uint64_t n_all = 0;
  double pmi = 0.0;
  double weight = 0.0;
  double score = 0.0;
};

/// One entry per vocabulary id. Tokens absent from forget documents get
/// pmi = weight = score = 0.
std::vector<TokenScore> score_tokens(const TokenStats& stats, WeightLog weight_log = WeightLog::natural);

struct SelectedSet {
  std::vector<TokenId> token_ids;
  std::size_t k = 0;
  std::size_t min_freq = 0;
  std::size_t forget_class = 0;
};

/// Ranking used for selection and reports: score desc, n_f desc, id asc.
bool ranks_before(const TokenScore& a, const TokenScore& b);

/// Top-k eligible tokens (n_f >= min_freq, not PAD/UNK) in ranking order.
SelectedSet select_tokens(const std::vector<TokenScore>& scores, std::size_t k, std::size_t min_freq,
                          std::size_t forget_class = 0);

/// CSV `token,token_id,n_f,n_all,pmi,weight,score,selected`, every token in
/// ranking order.
void write_selection_csv(const std::filesystem::path& path, const std::vector<TokenScore>& scores,
                         const SelectedSet& selected, const Vocabulary& vocab);

/// Token ids flagged selected, in file order.
std::vector<TokenId> read_selection_csv(const std::filesystem::path& path);

}  // namespace steu
