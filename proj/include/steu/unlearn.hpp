#pragma once

// Class-level unlearning on a trained classifier. STEU edits only the
// selected token-embedding rows (plus, optionally, the head); the baselines
// edit the last encoder block and the head.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "steu/autodiff.hpp"
#include "steu/corpus.hpp"
#include "steu/model.hpp"
#include "steu/selector.hpp"

namespace steu {

enum class Method { steu, steu_emb_only, grad_ascent, direct_suppression, influence_weighted };

std::string_view method_name(Method m);
/// Throws UsageError listing the accepted names.
Method parse_method(std::string_view name);
bool is_steu_family(Method m);

/// Which logit columns the forget loss covers.
enum class ForgetScope { full, target };

std::string_view scope_name(ForgetScope s);
ForgetScope parse_scope(std::string_view name);

struct UnlearnConfig {
  Method method = Method::steu;
  std::size_t forget_class = 0;
  std::size_t k = 64;
  std::size_t min_freq = 5;
  double lambda_u = 1.0;
  double lambda_k = 1.0;
  double lr = 3e-2;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::uint64_t seed = 7;
  /// STEU only; steu_emb_only never trains the head.
  bool update_head = true;
  /// Baselines only: add lambda_k * utility loss on the retain batch.
  bool retain_anchor = true;
  ForgetScope forget_scope = ForgetScope::full;
  /// Global gradient-norm cap for grad_ascent.
  double clip_norm = 1.0;
  double threshold = 0.5;

  void validate(std::size_t num_classes) const;
  bool head_trainable() const;
};

struct GradientMask {
  std::vector<bool> embedding_rows;
  bool head_trainable = false;
  std::set<std::string> encoder_trainable_tensors;

  std::size_t trainable_rows() const;
  /// Whether any entry of the named tensor may change.
  bool touches(std::string_view name) const;
  /// Number of scalar parameters inside the update surface.
  std::size_t capacity(const ModelConfig& config) const;

  friend bool operator==(const GradientMask&, const GradientMask&) = default;
};

GradientMask build_mask(const SelectedSet& selected, const UnlearnConfig& config,
                        const ModelConfig& model_config);

/// Zeroes every gradient entry outside the mask. `grads` must name every
/// tensor the mask refers to, and the embedding gradient must have one row
/// per mask entry.
ad::Gradients mask_gradients(const ad::Gradients& grads, const GradientMask& mask);

void write_mask(const std::filesystem::path& path, const GradientMask& mask);
GradientMask read_mask(const std::filesystem::path& path);

// ---- objectives ------------------------------------------------------------

/// Mean BCE-with-logits against the labels with column `forget_class` set to
/// 0. Every row must carry the forget label. With ForgetScope::target only
/// that column enters the mean.
ad::Var forget_loss(ad::Var logits, const Tensor& labels, std::size_t forget_class,
                    ForgetScope scope = ForgetScope::full,
                    const std::vector<double>* row_weights = nullptr);

/// Soft-target BCE between sigmoid(logits) and sigmoid(base_logits),
/// averaged over the batch and over every class except `forget_class`.
ad::Var utility_loss(ad::Var logits, const Tensor& base_logits, std::size_t forget_class);

// ---- optimization ----------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double forget_loss = 0.0;
  double utility_loss = 0.0;
  double total_loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t last_step = 0;
  double forget_f1 = 0.0;
  double retain_avg_f1 = 0.0;
};

struct TrainingHistory {
  std::size_t steps_per_epoch = 0;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// `step,epoch,forget_loss,utility_loss,total_loss,forget_f1,retain_avg_f1`;
/// the F1 columns are filled on the last step of each epoch only.
void write_history_csv(const std::filesystem::path& path, const TrainingHistory& history);

struct UnlearnResult {
  ModelParams params;
  TrainingHistory history;
  GradientMask mask;
};

/// Called with the masked gradients right before each optimizer step.
using StepObserver = std::function<void(std::size_t step, const ad::Gradients& masked)>;

UnlearnResult run_unlearning(const ModelParams& theta0, const LabeledDataset& dataset,
                             const SelectedSet& selected, const UnlearnConfig& config,
                             const StepObserver& observer = {});

}  // namespace steu
