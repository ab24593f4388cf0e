#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "steu/autodiff.hpp"
#include "steu/corpus.hpp"
#include "steu/metrics.hpp"
#include "steu/tensor.hpp"

namespace steu {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t max_len = 64;
  std::size_t n_layers = 1;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Architecture equality; the seed is not part of the architecture.
  bool same_shape(const ModelConfig& other) const;
};

// Stable tensor names.
inline constexpr std::string_view kWordEmbedding = "embed.word";
inline constexpr std::string_view kPositionEmbedding = "embed.position";
inline constexpr std::string_view kHeadWeight = "head.weight";
inline constexpr std::string_view kHeadBias = "head.bias";
std::string block_prefix(std::size_t layer);

struct TensorSpec {
  std::string name;
  Shape shape;
};

/// Every tensor of the architecture, in checkpoint order.
std::vector<TensorSpec> tensor_layout(const ModelConfig& config);

/// Closed-form parameter count:
///   V*d + L*d + n_layers*(4d^2 + 2*d*f + f + d + 4d) + d*C + C
std::size_t closed_form_parameter_count(const ModelConfig& config);

/// Named tensors of the classifier. Value type; copying yields an
/// independent parameter set.
class ModelParams {
 public:
  ModelParams() = default;
  /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
  static ModelParams initialize(const ModelConfig& config);
  /// All-zero weights with unit layer-norm gains.
  static ModelParams zeros(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t tensor_count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t total_parameters() const;

  /// Same architecture, names and values; the init seed is ignored.
  friend bool operator==(const ModelParams& a, const ModelParams& b);

 private:
  static ModelParams with_layout(const ModelConfig& config);
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

/// Rows of token ids padded to a common width; only the first lengths[r]
/// entries of each row are read.
struct TokenBatch {
  std::size_t width = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;

  std::size_t rows() const { return lengths.size(); }
};

TokenBatch make_batch(std::span<const Document* const> docs);
TokenBatch make_batch(const std::vector<Document>& docs);
Tensor label_matrix(std::span<const Document* const> docs);

/// Logits plus the tape that produced them.
struct BatchOutput {
  std::unique_ptr<ad::Tape> tape;
  ad::Var logits;

  const Tensor& values() const { return logits.value(); }
};

/// Decides which named tensors enter the tape as trainable leaves; an empty
/// predicate means all of them.
using TrainablePredicate = std::function<bool(std::string_view)>;

BatchOutput forward(const ModelParams& params, const TokenBatch& batch,
                    const TrainablePredicate& trainable = {});

/// Forward pass without gradient bookkeeping.
Tensor infer_logits(const ModelParams& params, const TokenBatch& batch);
Tensor infer_logits(const ModelParams& params, const std::vector<Document>& docs,
                    std::size_t batch_size = 64);

/// Mean over batch and classes of BCE-with-logits.
ad::Var multilabel_loss(ad::Var logits, const Tensor& labels);

/// Label c is predicted iff sigmoid(logit_c) >= threshold.
LabelMatrix threshold_logits(const Tensor& logits, double threshold);
LabelMatrix predict(const ModelParams& params, const std::vector<Document>& docs,
                    double threshold = 0.5);

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a named parameter set. Only tensors present in the gradient
/// mapping are touched; state is created lazily per tensor.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}
  void step(ModelParams& params, const ad::Gradients& grads);
  std::size_t steps() const { return step_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamConfig config_;
  std::size_t step_ = 0;
  std::vector<std::pair<std::string, Moments>> state_;
};

// ---- baseline training -----------------------------------------------------

struct TrainHyper {
  double lr = 1e-3;
  std::size_t epochs = 4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_macro_f1 = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochMetrics> epochs;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

TrainResult train_baseline(const LabeledDataset& dataset, const ModelConfig& config,
                           const TrainHyper& hyper, const EpochCallback& on_epoch = {});

// ---- checkpoints -----------------------------------------------------------
//
// "STEU", u32 version, u32 x7 config (V, d, L_max, n_layers, n_heads, ffn_dim,
// C), then per tensor: u32 name length, name bytes, u32 rank, u32 dims, f64
// values. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// Also checks every tensor against `expected`; errors name the first mismatch.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace steu
