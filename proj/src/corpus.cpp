#include "steu/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "steu/error.hpp"
#include "steu/rng.hpp"

namespace steu {

using nlohmann::json;

// ---- Vocabulary ----------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{std::string(kPadToken), std::string(kUnkToken)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kPadId] != kPadToken || tokens_[kUnkId] != kUnkToken) {
    throw Error("vocabulary must begin with " + std::string(kPadToken) + ", " + std::string(kUnkToken));
  }
  if (tokens_.size() > std::numeric_limits<TokenId>::max()) {
    throw Error("vocabulary overflow: " + std::to_string(tokens_.size()) + " tokens");
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const {
  return find(token).value_or(kUnkId);
}

// ---- validation ----------------------------------------------------------

namespace {

void validate_docs(const std::vector<Document>& docs, const LabeledDataset& ds, const char* split,
                   std::unordered_set<std::string>& seen) {
  for (const auto& doc : docs) {
    if (doc.labels.size() != ds.num_classes()) {
      throw Error(std::string(split) + " document '" + doc.id + "' has " +
                  std::to_string(doc.labels.size()) + " labels, expected " +
                  std::to_string(ds.num_classes()));
    }
    for (auto l : doc.labels) {
      if (l > 1) throw Error(std::string(split) + " document '" + doc.id + "' has a non-binary label");
    }
    if (doc.token_ids.empty()) {
      throw Error(std::string(split) + " document '" + doc.id + "' is empty");
    }
    for (auto t : doc.token_ids) {
      if (t >= ds.vocabulary.size()) {
        throw Error(std::string(split) + " document '" + doc.id + "' has token id " +
                    std::to_string(t) + " >= vocabulary size " + std::to_string(ds.vocabulary.size()));
      }
    }
    if (!seen.insert(doc.id).second) {
      throw Error("document id '" + doc.id + "' appears more than once across splits");
    }
  }
}

}  // namespace

void validate_dataset(const LabeledDataset& dataset) {
  if (dataset.num_classes() < 1) throw Error("dataset has no classes");
  std::unordered_set<std::string> seen;
  validate_docs(dataset.train, dataset, "train", seen);
  validate_docs(dataset.val, dataset, "val", seen);
}

// ---- generator -----------------------------------------------------------

void validate_spec(const GeneratorSpec& spec) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error("invalid generator spec: " + field + " " + why);
  };
  auto probability = [&](const std::string& field, double p) {
    if (!(p >= 0.0 && p <= 1.0)) fail(field, "must be in [0, 1], got " + std::to_string(p));
  };
  if (spec.num_classes < 1) fail("num_classes", "must be >= 1");
  if (spec.shared_vocab_size < 1) fail("shared_vocab_size", "must be >= 1");
  if (spec.lexicon_size_per_class < 1) fail("lexicon_size_per_class", "must be >= 1");
  if (spec.min_doc_length < 1) fail("min_doc_length", "must be >= 1");
  if (spec.min_doc_length > spec.max_doc_length) fail("doc_length", "min exceeds max");
  if (spec.n_train < 1) fail("n_train", "must be >= 1");
  if (spec.n_val < 1) fail("n_val", "must be >= 1");
  probability("lexicon_injection_rate", spec.lexicon_injection_rate);
  probability("multi_label_rate", spec.multi_label_rate);
  if (spec.label_prevalence.size() != spec.num_classes) {
    fail("label_prevalence", "has " + std::to_string(spec.label_prevalence.size()) +
                                 " entries, expected " + std::to_string(spec.num_classes));
  }
  for (double p : spec.label_prevalence) probability("label_prevalence", p);

  const double budget = static_cast<double>(spec.shared_vocab_size) +
                        static_cast<double>(spec.num_classes) *
                            static_cast<double>(spec.lexicon_size_per_class) + 2.0;
  if (budget > static_cast<double>(std::numeric_limits<TokenId>::max())) {
    throw Error("vocabulary overflow: generator needs " + std::to_string(budget) + " token ids");
  }
  label_coupling(spec);
}

std::vector<std::string> planted_lexicon(const GeneratorSpec& spec, std::size_t c) {
  std::vector<std::string> out;
  out.reserve(spec.lexicon_size_per_class);
  for (std::size_t j = 0; j < spec.lexicon_size_per_class; ++j) {
    out.push_back("c" + std::to_string(c) + "t" + std::to_string(j));
  }
  return out;
}

namespace {

std::vector<std::string> shared_filler(const GeneratorSpec& spec) {
  std::vector<std::string> out;
  out.reserve(spec.shared_vocab_size);
  for (std::size_t j = 0; j < spec.shared_vocab_size; ++j) out.push_back("w" + std::to_string(j));
  return out;
}

/// P(at least two labels) when every class is drawn independently.
double independent_multi_rate(const std::vector<double>& prevalence) {
  // dist[j] = P(exactly j labels so far), truncated at 2.
  double zero = 1.0, one = 0.0;
  for (double p : prevalence) {
    one = one * (1.0 - p) + zero * p;
    zero *= (1.0 - p);
  }
  return 1.0 - zero - one;
}

double second_largest(std::vector<double> values) {
  if (values.size() < 2) return 0.0;
  std::sort(values.begin(), values.end(), std::greater<>());
  return values[1];
}

}  // namespace

double label_coupling(const GeneratorSpec& spec) {
  const double independent = independent_multi_rate(spec.label_prevalence);
  // Under a single shared uniform U, class c is on iff U < p_c, so two or more
  // labels occur iff U falls below the second-largest prevalence.
  const double comonotone = second_largest(spec.label_prevalence);
  const double lo = std::min(independent, comonotone);
  const double hi = std::max(independent, comonotone);
  const double target = spec.multi_label_rate;
  constexpr double kSlack = 1e-12;
  if (target < lo - kSlack || target > hi + kSlack) {
    std::ostringstream msg;
    msg << "invalid generator spec: multi_label_rate " << target
        << " is unattainable for label_prevalence (attainable range [" << lo << ", " << hi << "])";
    throw Error(msg.str());
  }
  if (hi - lo < kSlack) return 0.0;
  return std::clamp((target - independent) / (comonotone - independent), 0.0, 1.0);
}

namespace {

std::string render_document(const GeneratorSpec& spec, double coupling, std::uint64_t stream,
                            const std::vector<std::string>& filler,
                            const std::vector<std::vector<std::string>>& lexicons,
                            std::vector<std::uint8_t>& labels) {
  Rng rng(derive_seed(spec.seed, stream));
  labels.assign(spec.num_classes, 0);
  if (rng.bernoulli(coupling)) {
    const double u = rng.uniform();
    for (std::size_t c = 0; c < spec.num_classes; ++c) labels[c] = u < spec.label_prevalence[c];
  } else {
    for (std::size_t c = 0; c < spec.num_classes; ++c) labels[c] = rng.uniform() < spec.label_prevalence[c];
  }
  std::vector<std::size_t> active;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    if (labels[c]) active.push_back(c);
  }

  const std::size_t length =
      spec.min_doc_length + rng.below(spec.max_doc_length - spec.min_doc_length + 1);
  std::string text;
  for (std::size_t slot = 0; slot < length; ++slot) {
    if (slot) text += ' ';
    if (!active.empty() && rng.bernoulli(spec.lexicon_injection_rate)) {
      const auto& lexicon = lexicons[active[rng.below(active.size())]];
      text += lexicon[rng.below(lexicon.size())];
    } else {
      text += filler[rng.below(filler.size())];
    }
  }
  return text;
}

}  // namespace

LabeledDataset generate_corpus(const GeneratorSpec& spec) {
  validate_spec(spec);
  const double coupling = label_coupling(spec);
  const auto filler = shared_filler(spec);
  std::vector<std::vector<std::string>> lexicons;
  for (std::size_t c = 0; c < spec.num_classes; ++c) lexicons.push_back(planted_lexicon(spec, c));

  std::vector<std::string> train_text(spec.n_train), val_text(spec.n_val);
  std::vector<std::vector<std::uint8_t>> train_labels(spec.n_train), val_labels(spec.n_val);
  for (std::size_t i = 0; i < spec.n_train; ++i) {
    train_text[i] = render_document(spec, coupling, i, filler, lexicons, train_labels[i]);
  }
  for (std::size_t i = 0; i < spec.n_val; ++i) {
    val_text[i] = render_document(spec, coupling, spec.n_train + i, filler, lexicons, val_labels[i]);
  }

  LabeledDataset ds;
  ds.vocabulary = build_vocabulary(train_text, 1);
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  auto make_doc = [&](const std::string& prefix, std::size_t i, const std::string& text,
                      std::vector<std::uint8_t>& labels) {
    char id[32];
    std::snprintf(id, sizeof(id), "%s-%06zu", prefix.c_str(), i);
    return Document{id, tokenize(text, ds.vocabulary, spec.max_doc_length), std::move(labels)};
  };
  ds.train.reserve(spec.n_train);
  ds.val.reserve(spec.n_val);
  for (std::size_t i = 0; i < spec.n_train; ++i) ds.train.push_back(make_doc("train", i, train_text[i], train_labels[i]));
  for (std::size_t i = 0; i < spec.n_val; ++i) ds.val.push_back(make_doc("val", i, val_text[i], val_labels[i]));
  return ds;
}

// ---- tokenization --------------------------------------------------------

namespace {

std::vector<std::string> split_lower(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

}  // namespace

Vocabulary build_vocabulary(const std::vector<std::string>& texts, std::size_t min_count) {
  if (texts.empty()) throw Error("build_vocabulary: no texts");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    for (auto& tok : split_lower(text)) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= std::max<std::size_t>(min_count, 1) && tok != kPadToken && tok != kUnkToken) {
      ranked.emplace_back(tok, n);
    }
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kPadToken), std::string(kUnkToken)};
  for (auto& [tok, n] : ranked) tokens.push_back(tok);
  return Vocabulary(std::move(tokens));
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 1) throw Error("tokenize: max_len must be >= 1");
  auto pieces = split_lower(text);
  if (pieces.empty()) throw Error("empty document");
  if (pieces.size() > max_len) pieces.resize(max_len);
  std::vector<TokenId> ids;
  ids.reserve(pieces.size());
  for (const auto& p : pieces) ids.push_back(vocab.id_or_unk(p));
  return ids;
}

// ---- files ---------------------------------------------------------------

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

std::vector<std::string> read_string_array(const std::filesystem::path& path) {
  const json j = read_json_file(path);
  if (!j.is_array()) throw Error(path.string() + ": expected a JSON array of strings");
  std::vector<std::string> out;
  for (const auto& item : j) {
    if (!item.is_string()) throw Error(path.string() + ": expected a JSON array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<Document> read_jsonl(const std::filesystem::path& path, std::size_t vocab_size,
                                 std::size_t num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    Document doc;
    try {
      const json j = json::parse(line);
      doc.id = j.at("id").get<std::string>();
      for (const auto& t : j.at("tokens")) {
        const auto v = t.get<std::int64_t>();
        if (v < 0 || static_cast<std::uint64_t>(v) >= vocab_size) {
          throw Error(where + "unknown token id " + std::to_string(v));
        }
        doc.token_ids.push_back(static_cast<TokenId>(v));
      }
      for (const auto& l : j.at("labels")) {
        const auto v = l.get<std::int64_t>();
        if (v != 0 && v != 1) throw Error(where + "label values must be 0 or 1");
        doc.labels.push_back(static_cast<std::uint8_t>(v));
      }
    } catch (const json::exception& e) {
      throw Error(where + "malformed line (" + e.what() + ")");
    }
    if (doc.labels.size() != num_classes) {
      throw Error(where + "label length " + std::to_string(doc.labels.size()) + " != " +
                  std::to_string(num_classes) + " classes");
    }
    if (doc.token_ids.empty()) throw Error(where + "empty document");
    docs.push_back(std::move(doc));
  }
  if (docs.empty()) throw Error(path.string() + ": no documents");
  return docs;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Document>& docs) {
  auto out = open_out(path);
  for (const auto& doc : docs) {
    json j;
    j["id"] = doc.id;
    j["tokens"] = doc.token_ids;
    j["labels"] = json::array();
    for (auto l : doc.labels) j["labels"].push_back(static_cast<int>(l));
    out << j.dump() << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

Vocabulary read_vocabulary(const std::filesystem::path& path) {
  return Vocabulary(read_string_array(path));
}

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  auto out = open_out(path);
  out << json(vocab.tokens()).dump() << '\n';
}

LabeledDataset read_dataset(const std::filesystem::path& dir) {
  LabeledDataset ds;
  ds.vocabulary = read_vocabulary(dir / "vocab.json");
  ds.class_names = read_string_array(dir / "classes.json");
  if (ds.class_names.empty()) throw Error((dir / "classes.json").string() + ": no classes");
  ds.train = read_jsonl(dir / "train.jsonl", ds.vocabulary.size(), ds.num_classes());
  ds.val = read_jsonl(dir / "val.jsonl", ds.vocabulary.size(), ds.num_classes());
  validate_dataset(ds);
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const LabeledDataset& dataset) {
  validate_dataset(dataset);
  std::filesystem::create_directories(dir);
  write_vocabulary(dir / "vocab.json", dataset.vocabulary);
  {
    auto out = open_out(dir / "classes.json");
    out << json(dataset.class_names).dump() << '\n';
  }
  write_jsonl(dir / "train.jsonl", dataset.train);
  write_jsonl(dir / "val.jsonl", dataset.val);
}

}  // namespace steu
