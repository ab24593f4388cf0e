#include "steu/metrics.hpp"

#include "steu/corpus.hpp"
#include "steu/error.hpp"

namespace steu {

std::vector<ClassMetrics> per_class_metrics(const LabelMatrix& predictions, const LabelMatrix& gold) {
  if (predictions.size() != gold.size()) {
    throw Error("per_class_metrics: " + std::to_string(predictions.size()) + " prediction rows vs " +
                std::to_string(gold.size()) + " gold rows");
  }
  const std::size_t classes = gold.empty() ? 0 : gold.front().size();
  std::vector<ClassMetrics> out(classes);
  for (std::size_t r = 0; r < gold.size(); ++r) {
    if (predictions[r].size() != classes || gold[r].size() != classes) {
      throw Error("per_class_metrics: row " + std::to_string(r) + " width mismatch");
    }
    for (std::size_t c = 0; c < classes; ++c) {
      const bool p = predictions[r][c] != 0;
      const bool g = gold[r][c] != 0;
      if (p && g) ++out[c].true_positives;
      else if (p) ++out[c].false_positives;
      else if (g) ++out[c].false_negatives;
    }
  }
  for (auto& m : out) {
    const auto tp = static_cast<double>(m.true_positives);
    const auto predicted = tp + static_cast<double>(m.false_positives);
    const auto actual = tp + static_cast<double>(m.false_negatives);
    m.precision = predicted > 0 ? tp / predicted : 0.0;
    m.recall = actual > 0 ? tp / actual : 0.0;
    m.f1 = (m.precision + m.recall) > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  }
  return out;
}

double macro_f1(const std::vector<ClassMetrics>& metrics) {
  if (metrics.empty()) return 0.0;
  double total = 0.0;
  for (const auto& m : metrics) total += m.f1;
  return total / static_cast<double>(metrics.size());
}

LabelMatrix gold_labels(const std::vector<Document>& docs) {
  LabelMatrix out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(d.labels);
  return out;
}

}  // namespace steu
