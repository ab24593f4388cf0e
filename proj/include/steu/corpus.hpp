#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace steu {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr std::string_view kPadToken = "[pad]";
inline constexpr std::string_view kUnkToken = "[unk]";

/// Token strings indexed by id. Ids 0 and 1 are always PAD and UNK.
class Vocabulary {
 public:
  Vocabulary();
  /// `tokens` must start with PAD, UNK and contain no duplicates.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct Document {
  std::string id;
  std::vector<TokenId> token_ids;
  std::vector<std::uint8_t> labels;

  bool has_label(std::size_t c) const { return labels.at(c) != 0; }
  friend bool operator==(const Document&, const Document&) = default;
};

struct LabeledDataset {
  Vocabulary vocabulary;
  std::vector<std::string> class_names;
  std::vector<Document> train;
  std::vector<Document> val;

  std::size_t num_classes() const { return class_names.size(); }
  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Throws steu::Error naming the first violated invariant (label width,
/// token range, empty document, split overlap).
void validate_dataset(const LabeledDataset& dataset);

/// Parameters of the synthetic corpus generator. Every class owns a disjoint
/// lexicon; labeled documents draw each token slot from one of their classes'
/// lexicons with probability `lexicon_injection_rate`, else from shared filler.
struct GeneratorSpec {
  std::size_t num_classes = 6;
  std::size_t shared_vocab_size = 800;
  std::size_t lexicon_size_per_class = 200;
  double lexicon_injection_rate = 0.2;
  std::size_t min_doc_length = 20;
  std::size_t max_doc_length = 40;
  std::vector<double> label_prevalence = {0.30, 0.25, 0.25, 0.20, 0.20, 0.15};
  /// Target fraction of documents with two or more labels.
  double multi_label_rate = 0.40;
  std::size_t n_train = 5000;
  std::size_t n_val = 2000;
  std::uint64_t seed = 7;
};

void validate_spec(const GeneratorSpec& spec);

/// Lowercase token strings planted for class `c`, in generator order.
std::vector<std::string> planted_lexicon(const GeneratorSpec& spec, std::size_t c);

/// Probability that a document uses the shared-uniform (comonotone) label
/// draw instead of independent draws; chosen so the expected multi-label
/// rate equals `spec.multi_label_rate` while marginals stay exact.
double label_coupling(const GeneratorSpec& spec);

LabeledDataset generate_corpus(const GeneratorSpec& spec);

/// Lowercased whitespace tokens with count >= min_count, ordered by
/// (count desc, token asc), after the reserved PAD and UNK.
Vocabulary build_vocabulary(const std::vector<std::string>& texts, std::size_t min_count);

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

// ---- files ---------------------------------------------------------------
//
// A corpus directory holds train.jsonl, val.jsonl, vocab.json, classes.json.
// JSONL lines are {"id": str, "labels": [0|1 ...], "tokens": [int ...]}.

std::vector<Document> read_jsonl(const std::filesystem::path& path, std::size_t vocab_size,
                                 std::size_t num_classes);
void write_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs);

Vocabulary read_vocabulary(const std::filesystem::path& path);
void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);

LabeledDataset read_dataset(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& dir, const LabeledDataset& dataset);

}  // namespace steu
