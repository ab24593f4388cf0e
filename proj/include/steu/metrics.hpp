#pragma once

#include <cstdint>
#include <vector>

#include "steu/corpus.hpp"

namespace steu {

using LabelMatrix = std::vector<std::vector<std::uint8_t>>;

/// Confusion counts and scores for one class. Any ratio whose denominator
/// is zero is reported as 0.
struct ClassMetrics {
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

std::vector<ClassMetrics> per_class_metrics(const LabelMatrix& predictions, const LabelMatrix& gold);

double macro_f1(const std::vector<ClassMetrics>& metrics);

LabelMatrix gold_labels(const std::vector<Document>& docs);

}  // namespace steu
