#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "steu/metrics.hpp"
#include "steu/model.hpp"
#include "steu/unlearn.hpp"

namespace steu {

struct ForgetRetain {
  double forget_f1 = 0.0;
  /// Unweighted mean F1 over the classes other than the forget class.
  double retain_avg_f1 = 0.0;
  /// Macro F1 over every class, forget class included.
  double macro_f1 = 0.0;
};

ForgetRetain forget_retain(const std::vector<ClassMetrics>& metrics, std::size_t forget_class);
ForgetRetain forget_retain_f1(const ModelParams& params, const std::vector<Document>& val,
                              std::size_t forget_class, double threshold = 0.5);

// ---- parameter audit -------------------------------------------------------

struct TensorAudit {
  std::string name;
  std::size_t entries = 0;
  /// Entries whose bit pattern differs from the reference.
  std::size_t changed = 0;
  /// Changed entries outside the mask's trainable region.
  std::size_t violations = 0;
  double max_abs_diff = 0.0;
};

struct ParamAudit {
  std::vector<TensorAudit> tensors;
  std::size_t total_changed = 0;
  std::size_t total_violations = 0;
  std::vector<std::string> changed_tensors;
  std::vector<std::string> violating_tensors;
  /// Scalar parameters inside the mask.
  std::size_t capacity = 0;

  bool passed() const { return total_violations == 0; }
};

/// Bitwise comparison of every tensor; no tolerance.
ParamAudit param_audit(const ModelParams& theta0, const ModelParams& theta1, const GradientMask& mask);

void write_audit_json(const std::filesystem::path& path, const ParamAudit& audit);

// ---- budgets ---------------------------------------------------------------

struct ParamBudget {
  std::size_t updated = 0;
  /// Fraction of the whole model, in [0, 1].
  double fraction = 0.0;
};

ParamBudget param_budget(std::size_t k, std::size_t d, std::size_t num_classes, bool include_head,
                         std::size_t total_params);

/// Two-decimal percentage of a fraction, e.g. 0.001858 -> "0.19%".
std::string format_percent(double fraction);

// ---- reports ---------------------------------------------------------------

struct UnlearnReport {
  std::string method;
  std::size_t forget_class = 0;
  std::size_t k = 0;
  bool update_head = false;
  double forget_base = 0.0;
  double forget_final = 0.0;
  double retain_base = 0.0;
  double retain_final = 0.0;
  double delta_utility = 0.0;
  /// Entries changed according to the audit.
  std::size_t params_updated = 0;
  /// Size of the update surface.
  std::size_t params_trainable = 0;
  std::size_t total_params = 0;
  double percent_model = 0.0;
  bool audit_passed = false;

  friend bool operator==(const UnlearnReport&, const UnlearnReport&) = default;
};

UnlearnReport make_report(std::string method, std::size_t forget_class, std::size_t k, bool update_head,
                          const ForgetRetain& base, const ForgetRetain& final_scores,
                          const ParamAudit& audit, std::size_t total_params);

void write_report_json(const std::filesystem::path& path, const UnlearnReport& report);
UnlearnReport read_report_json(const std::filesystem::path& path);

/// Comparison rows: params_updated descending, STEU-family runs last.
std::vector<UnlearnReport> comparison_order(std::vector<UnlearnReport> runs);

std::string comparison_table(const std::vector<UnlearnReport>& runs);
std::string comparison_csv(const std::vector<UnlearnReport>& runs);
/// Rows for STEU-family runs ordered by (k, head); empty when fewer than two
/// distinct (k, head) settings are present.
std::string ablation_table(const std::vector<UnlearnReport>& runs);
std::string ablation_csv(const std::vector<UnlearnReport>& runs);
std::string tradeoff_csv(const std::vector<UnlearnReport>& runs);
std::vector<UnlearnReport> parse_comparison_csv(const std::string& text);

/// Writes comparison.txt, comparison.csv, tradeoff.csv and, when the runs
/// vary k or the head flag, ablation.txt and ablation.csv.
void build_report(const std::vector<UnlearnReport>& runs, const std::filesystem::path& dir);

}  // namespace steu
