#include "steu/selector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "steu/csv.hpp"
#include "steu/error.hpp"

namespace steu {

TokenStats count_token_stats(const LabeledDataset& dataset, std::size_t forget_class) {
  if (forget_class >= dataset.num_classes()) {
    throw Error("forget class " + std::to_string(forget_class) + " out of range for " +
                std::to_string(dataset.num_classes()) + " classes");
  }
  const std::size_t vocab = dataset.vocabulary.size();
  TokenStats stats;
  stats.n_forget.assign(vocab, 0);
  stats.n_retain.assign(vocab, 0);
  for (const auto& doc : dataset.train) {
    const bool forget = doc.has_label(forget_class);
    auto& counts = forget ? stats.n_forget : stats.n_retain;
    for (TokenId t : doc.token_ids) {
      if (t >= vocab) throw Error("document '" + doc.id + "' has token id out of range");
      ++counts[t];
    }
    if (forget) {
      ++stats.forget_documents;
      stats.total_forget += doc.token_ids.size();
    }
    stats.total_all += doc.token_ids.size();
  }
  if (stats.forget_documents == 0) throw Error("empty forget class");
  return stats;
}

std::vector<TokenScore> score_tokens(const TokenStats& stats, WeightLog weight_log) {
  if (stats.total_forget == 0 || stats.total_all == 0) {
    throw Error("score_tokens: zero token totals");
  }
  std::vector<TokenScore> scores(stats.vocab_size());
  for (std::size_t t = 0; t < stats.vocab_size(); ++t) {
    TokenScore& s = scores[t];
    s.token_id = static_cast<TokenId>(t);
    s.n_f = stats.n_forget[t];
    s.n_all = stats.n_all(s.token_id);
    if (s.n_f == 0) continue;
    // P(t|forget) / P(t|all) as one ratio of exact integers, so equal ratios
    // give equal scores and the tie-break stays meaningful.
    const double num = static_cast<double>(s.n_f * stats.total_all);
    const double den = static_cast<double>(s.n_all * stats.total_forget);
    s.pmi = std::log2(num / den);
    const double n = static_cast<double>(s.n_f);
    s.weight = weight_log == WeightLog::natural ? std::log1p(n) : std::log2(1.0 + n);
    s.score = s.pmi * s.weight;
  }
  return scores;
}

bool ranks_before(const TokenScore& a, const TokenScore& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.n_f != b.n_f) return a.n_f > b.n_f;
  return a.token_id < b.token_id;
}

SelectedSet select_tokens(const std::vector<TokenScore>& scores, std::size_t k, std::size_t min_freq,
                          std::size_t forget_class) {
  if (k < 1) throw Error("select_tokens: k must be >= 1");
  std::vector<TokenScore> eligible;
  for (const auto& s : scores) {
    if (s.token_id == kPadId || s.token_id == kUnkId) continue;
    if (s.n_f < min_freq) continue;
    eligible.push_back(s);
  }
  if (eligible.empty()) throw Error("selection empty");
  const std::size_t take = std::min(k, eligible.size());
  std::partial_sort(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(take), eligible.end(),
                    ranks_before);
  SelectedSet out;
  out.k = k;
  out.min_freq = min_freq;
  out.forget_class = forget_class;
  for (std::size_t i = 0; i < take; ++i) out.token_ids.push_back(eligible[i].token_id);
  return out;
}

void write_selection_csv(const std::filesystem::path& path, const std::vector<TokenScore>& scores,
                         const SelectedSet& selected, const Vocabulary& vocab) {
  std::vector<TokenScore> ranked = scores;
  std::sort(ranked.begin(), ranked.end(), ranks_before);
  std::vector<bool> chosen(vocab.size(), false);
  for (TokenId t : selected.token_ids) chosen.at(t) = true;

  // Selected rows first in selection order, then everything else by rank;
  // both are the same ordering since selection is a rank prefix of eligibles.
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "token,token_id,n_f,n_all,pmi,weight,score,selected\n";
  for (const auto& s : ranked) {
    out << csv::escape(vocab.token(s.token_id)) << ',' << s.token_id << ',' << s.n_f << ',' << s.n_all
        << ',' << csv::number(s.pmi) << ',' << csv::number(s.weight) << ',' << csv::number(s.score)
        << ',' << (chosen[s.token_id] ? 1 : 0) << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<TokenId> read_selection_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || csv::split(line).size() != 8 || csv::split(line)[1] != "token_id") {
    throw Error(path.string() + ": not a selection CSV");
  }
  std::vector<TokenId> ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto fields = csv::split(line);
    if (fields.size() != 8) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
    }
    try {
      if (fields[7] == "1") ids.push_back(static_cast<TokenId>(std::stoul(fields[1])));
    } catch (const std::exception&) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": bad token_id");
    }
  }
  if (ids.empty()) throw Error(path.string() + ": no selected tokens");
  return ids;
}

}  // namespace steu
