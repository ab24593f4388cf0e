#pragma once

// Shared fixtures for the unit tests.

#include <string>
#include <vector>

#include "steu/corpus.hpp"
#include "steu/model.hpp"
#include "steu/rng.hpp"
#include "steu/tensor.hpp"

namespace steu::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor t(shape);
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

/// Random corpus over tokens "t0".."t{V-3}"; every class appears in train.
inline LabeledDataset random_dataset(std::uint64_t seed, std::size_t vocab, std::size_t classes,
                                     std::size_t n_train, std::size_t n_val, std::size_t max_len = 12) {
  Rng rng(seed);
  std::vector<std::string> tokens = {std::string(kPadToken), std::string(kUnkToken)};
  for (std::size_t i = 2; i < vocab; ++i) tokens.push_back("t" + std::to_string(i));
  LabeledDataset ds;
  ds.vocabulary = Vocabulary(tokens);
  for (std::size_t c = 0; c < classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  auto make = [&](const std::string& prefix, std::size_t i) {
    Document d;
    d.id = prefix + std::to_string(i);
    d.labels.assign(classes, 0);
    for (std::size_t c = 0; c < classes; ++c) d.labels[c] = rng.bernoulli(0.4) ? 1 : 0;
    if (i < classes) d.labels[i] = 1;
    const std::size_t len = 1 + rng.below(max_len);
    for (std::size_t p = 0; p < len; ++p) d.token_ids.push_back(static_cast<TokenId>(rng.below(vocab)));
    return d;
  };
  for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(make("tr", i));
  for (std::size_t i = 0; i < n_val; ++i) ds.val.push_back(make("va", i));
  return ds;
}

inline ModelConfig small_config(std::size_t vocab, std::size_t classes, std::size_t dim = 8,
                                std::size_t layers = 1, std::size_t heads = 2, std::uint64_t seed = 3) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.num_classes = classes;
  c.dim = dim;
  c.max_len = 16;
  c.n_layers = layers;
  c.n_heads = heads;
  c.ffn_dim = 2 * dim;
  c.seed = seed;
  return c;
}

/// Model with every tensor drawn at a scale large enough that gradients are
/// not dominated by the tiny default init.
inline ModelParams random_params(const ModelConfig& config, std::uint64_t seed, double scale = 0.5) {
  ModelParams p = ModelParams::initialize(config);
  Rng rng(seed);
  for (std::size_t i = 0; i < p.tensor_count(); ++i) {
    for (auto& v : p.tensor(i).values()) v += rng.normal(0.0, scale);
  }
  return p;
}

inline std::vector<const Document*> pointers(const std::vector<Document>& docs) {
  std::vector<const Document*> out;
  for (const auto& d : docs) out.push_back(&d);
  return out;
}

}  // namespace steu::test
