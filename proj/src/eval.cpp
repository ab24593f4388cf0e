#include "steu/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "steu/csv.hpp"
#include "steu/error.hpp"

namespace steu {

ForgetRetain forget_retain(const std::vector<ClassMetrics>& metrics, std::size_t forget_class) {
  if (forget_class >= metrics.size()) {
    throw Error("forget class " + std::to_string(forget_class) + " out of range for " +
                std::to_string(metrics.size()) + " classes");
  }
  ForgetRetain out;
  out.forget_f1 = metrics[forget_class].f1;
  double retain = 0.0;
  for (std::size_t c = 0; c < metrics.size(); ++c) {
    if (c != forget_class) retain += metrics[c].f1;
  }
  out.retain_avg_f1 = metrics.size() > 1 ? retain / static_cast<double>(metrics.size() - 1) : 0.0;
  out.macro_f1 = macro_f1(metrics);
  return out;
}

ForgetRetain forget_retain_f1(const ModelParams& params, const std::vector<Document>& val,
                              std::size_t forget_class, double threshold) {
  if (val.empty()) throw Error("forget_retain_f1: empty evaluation set");
  if (forget_class >= params.config().num_classes) {
    throw Error("forget class " + std::to_string(forget_class) + " out of range for " +
                std::to_string(params.config().num_classes) + " classes");
  }
  return forget_retain(per_class_metrics(predict(params, val, threshold), gold_labels(val)), forget_class);
}

// ---- audit -----------------------------------------------------------------

ParamAudit param_audit(const ModelParams& theta0, const ModelParams& theta1, const GradientMask& mask) {
  if (!theta0.config().same_shape(theta1.config()) || theta0.names() != theta1.names()) {
    throw Error("param_audit: config mismatch between the two checkpoints");
  }
  if (mask.embedding_rows.size() != theta0.config().vocab_size) {
    throw Error("param_audit: mask covers " + std::to_string(mask.embedding_rows.size()) +
                " embedding rows, model has " + std::to_string(theta0.config().vocab_size));
  }
  ParamAudit audit;
  audit.capacity = mask.capacity(theta0.config());
  for (std::size_t i = 0; i < theta0.tensor_count(); ++i) {
    const std::string& name = theta0.name(i);
    const Tensor& a = theta0.tensor(i);
    const Tensor& b = theta1.tensor(i);
    TensorAudit t;
    t.name = name;
    t.entries = a.size();
    const bool row_masked = name == kWordEmbedding;
    const bool whole = !row_masked && mask.touches(name);
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (std::memcmp(&a[j], &b[j], sizeof(double)) == 0) continue;
      ++t.changed;
      t.max_abs_diff = std::max(t.max_abs_diff, std::fabs(a[j] - b[j]));
      const bool allowed = row_masked ? mask.embedding_rows[j / a.cols()] : whole;
      if (!allowed) ++t.violations;
    }
    audit.total_changed += t.changed;
    audit.total_violations += t.violations;
    if (t.changed) audit.changed_tensors.push_back(name);
    if (t.violations) audit.violating_tensors.push_back(name);
    audit.tensors.push_back(std::move(t));
  }
  return audit;
}

void write_audit_json(const std::filesystem::path& path, const ParamAudit& audit) {
  nlohmann::ordered_json j;
  j["passed"] = audit.passed();
  j["total_changed"] = audit.total_changed;
  j["total_violations"] = audit.total_violations;
  j["capacity"] = audit.capacity;
  j["changed_tensors"] = audit.changed_tensors;
  j["violating_tensors"] = audit.violating_tensors;
  auto& tensors = j["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : audit.tensors) {
    tensors.push_back({{"name", t.name},
                       {"entries", t.entries},
                       {"changed", t.changed},
                       {"violations", t.violations},
                       {"max_abs_diff", t.max_abs_diff}});
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---- budgets ---------------------------------------------------------------

ParamBudget param_budget(std::size_t k, std::size_t d, std::size_t num_classes, bool include_head,
                         std::size_t total_params) {
  ParamBudget b;
  b.updated = k * d + (include_head ? d * num_classes + num_classes : 0);
  b.fraction = total_params ? static_cast<double>(b.updated) / static_cast<double>(total_params) : 0.0;
  return b;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", fraction * 100.0);
  return buf;
}

// ---- reports ---------------------------------------------------------------

UnlearnReport make_report(std::string method, std::size_t forget_class, std::size_t k, bool update_head,
                          const ForgetRetain& base, const ForgetRetain& final_scores,
                          const ParamAudit& audit, std::size_t total_params) {
  UnlearnReport r;
  r.method = std::move(method);
  r.forget_class = forget_class;
  r.k = k;
  r.update_head = update_head;
  r.forget_base = base.forget_f1;
  r.forget_final = final_scores.forget_f1;
  r.retain_base = base.retain_avg_f1;
  r.retain_final = final_scores.retain_avg_f1;
  r.delta_utility = r.retain_final - r.retain_base;
  r.params_updated = audit.total_changed;
  r.params_trainable = audit.capacity;
  r.total_params = total_params;
  r.percent_model = total_params ? static_cast<double>(r.params_updated) / static_cast<double>(total_params) : 0.0;
  r.audit_passed = audit.passed();
  return r;
}

namespace {

nlohmann::ordered_json to_json(const UnlearnReport& r) {
  return {{"method", r.method},
          {"forget_class", r.forget_class},
          {"k", r.k},
          {"update_head", r.update_head},
          {"forget_base", r.forget_base},
          {"forget_final", r.forget_final},
          {"retain_base", r.retain_base},
          {"retain_final", r.retain_final},
          {"delta_utility", r.delta_utility},
          {"params_updated", r.params_updated},
          {"params_trainable", r.params_trainable},
          {"total_params", r.total_params},
          {"percent_model", r.percent_model},
          {"audit_passed", r.audit_passed}};
}

bool steu_run(const UnlearnReport& r) { return r.method == "steu" || r.method == "steu_emb_only"; }

std::string configuration(const UnlearnReport& r) {
  return "k=" + std::to_string(r.k) + (r.update_head ? " + head" : " (emb only)");
}

std::string f4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string signed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.4f", v);
  return buf;
}

std::string grouped(std::size_t n) {
  std::string digits = std::to_string(n);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

std::string align(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& cell = rows[r][c];
      const std::string pad(width[c] - cell.size(), ' ');
      if (c) line += "  ";
      line += c == 0 ? cell + pad : pad + cell;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out += std::string(total + 2 * (width.size() - 1), '-') + "\n";
    }
  }
  return out;
}

std::vector<UnlearnReport> ablation_rows(const std::vector<UnlearnReport>& runs) {
  std::vector<UnlearnReport> rows;
  for (const auto& r : runs) {
    if (steu_run(r)) rows.push_back(r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.k != b.k) return a.k < b.k;
    return a.update_head < b.update_head;
  });
  std::size_t distinct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == 0 || rows[i].k != rows[i - 1].k || rows[i].update_head != rows[i - 1].update_head) ++distinct;
  }
  if (distinct < 2) rows.clear();
  return rows;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

const char* kComparisonHeader =
    "method,forget_class,k,update_head,forget_base,forget_final,retain_base,retain_final,"
    "delta_utility,params_updated,params_trainable,total_params,percent_model,audit_passed";

}  // namespace

void write_report_json(const std::filesystem::path& path, const UnlearnReport& report) {
  write_text(path, to_json(report).dump(2) + "\n");
}

UnlearnReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read report " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    UnlearnReport r;
    r.method = j.at("method").get<std::string>();
    r.forget_class = j.at("forget_class").get<std::size_t>();
    r.k = j.at("k").get<std::size_t>();
    r.update_head = j.at("update_head").get<bool>();
    r.forget_base = j.at("forget_base").get<double>();
    r.forget_final = j.at("forget_final").get<double>();
    r.retain_base = j.at("retain_base").get<double>();
    r.retain_final = j.at("retain_final").get<double>();
    r.delta_utility = j.at("delta_utility").get<double>();
    r.params_updated = j.at("params_updated").get<std::size_t>();
    r.params_trainable = j.at("params_trainable").get<std::size_t>();
    r.total_params = j.at("total_params").get<std::size_t>();
    r.percent_model = j.at("percent_model").get<double>();
    r.audit_passed = j.at("audit_passed").get<bool>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed report: " + e.what());
  }
}

std::vector<UnlearnReport> comparison_order(std::vector<UnlearnReport> runs) {
  std::stable_sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) {
    if (steu_run(a) != steu_run(b)) return !steu_run(a);
    return a.params_updated > b.params_updated;
  });
  return runs;
}

std::string comparison_table(const std::vector<UnlearnReport>& runs) {
  std::vector<std::vector<std::string>> rows = {
      {"Method", "Forget F1", "Retain F1", "dUtility", "Params Updated", "% Model"}};
  for (const auto& r : comparison_order(runs)) {
    rows.push_back({r.method, f4(r.forget_final), f4(r.retain_final), signed4(r.delta_utility),
                    grouped(r.params_updated), format_percent(r.percent_model)});
  }
  return align(rows);
}

std::string comparison_csv(const std::vector<UnlearnReport>& runs) {
  std::string out = std::string(kComparisonHeader) + "\n";
  for (const auto& r : comparison_order(runs)) {
    out += csv::escape(r.method) + "," + std::to_string(r.forget_class) + "," + std::to_string(r.k) + "," +
           (r.update_head ? "1" : "0") + "," + csv::number(r.forget_base) + "," + csv::number(r.forget_final) +
           "," + csv::number(r.retain_base) + "," + csv::number(r.retain_final) + "," +
           csv::number(r.delta_utility) + "," + std::to_string(r.params_updated) + "," +
           std::to_string(r.params_trainable) + "," + std::to_string(r.total_params) + "," +
           csv::number(r.percent_model) + "," + (r.audit_passed ? "1" : "0") + "\n";
  }
  return out;
}

std::vector<UnlearnReport> parse_comparison_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kComparisonHeader) throw Error("not a comparison CSV");
  std::vector<UnlearnReport> runs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != 14) throw Error("comparison CSV: expected 14 fields, got " + std::to_string(f.size()));
    UnlearnReport r;
    r.method = f[0];
    r.forget_class = std::stoul(f[1]);
    r.k = std::stoul(f[2]);
    r.update_head = f[3] == "1";
    r.forget_base = std::stod(f[4]);
    r.forget_final = std::stod(f[5]);
    r.retain_base = std::stod(f[6]);
    r.retain_final = std::stod(f[7]);
    r.delta_utility = std::stod(f[8]);
    r.params_updated = std::stoul(f[9]);
    r.params_trainable = std::stoul(f[10]);
    r.total_params = std::stoul(f[11]);
    r.percent_model = std::stod(f[12]);
    r.audit_passed = f[13] == "1";
    runs.push_back(r);
  }
  return runs;
}

std::string ablation_table(const std::vector<UnlearnReport>& runs) {
  const auto rows_in = ablation_rows(runs);
  if (rows_in.empty()) return {};
  std::vector<std::vector<std::string>> rows = {
      {"Configuration", "Params Updated", "% Model", "Forget F1", "Retain Avg F1"}};
  for (const auto& r : rows_in) {
    rows.push_back({configuration(r), grouped(r.params_updated), format_percent(r.percent_model),
                    f4(r.forget_final), f4(r.retain_final)});
  }
  return align(rows);
}

std::string ablation_csv(const std::vector<UnlearnReport>& runs) {
  const auto rows = ablation_rows(runs);
  if (rows.empty()) return {};
  std::string out = "configuration,k,update_head,params_updated,params_trainable,percent_model,forget_f1,retain_avg_f1\n";
  for (const auto& r : rows) {
    out += csv::escape(configuration(r)) + "," + std::to_string(r.k) + "," + (r.update_head ? "1" : "0") + "," +
           std::to_string(r.params_updated) + "," + std::to_string(r.params_trainable) + "," +
           csv::number(r.percent_model) + "," + csv::number(r.forget_final) + "," +
           csv::number(r.retain_final) + "\n";
  }
  return out;
}

std::string tradeoff_csv(const std::vector<UnlearnReport>& runs) {
  std::string out = "method,params_updated,retain_f1,forget_f1\n";
  for (const auto& r : comparison_order(runs)) {
    const std::string label = steu_run(r) ? "steu " + configuration(r) : r.method;
    out += csv::escape(label) + "," + std::to_string(r.params_updated) + "," + csv::number(r.retain_final) + "," +
           csv::number(r.forget_final) + "\n";
  }
  return out;
}

void build_report(const std::vector<UnlearnReport>& runs, const std::filesystem::path& dir) {
  if (runs.empty()) throw Error("build_report: no runs");
  std::filesystem::create_directories(dir);
  write_text(dir / "comparison.txt", comparison_table(runs));
  write_text(dir / "comparison.csv", comparison_csv(runs));
  write_text(dir / "tradeoff.csv", tradeoff_csv(runs));
  const std::string ablation = ablation_table(runs);
  if (!ablation.empty()) {
    write_text(dir / "ablation.txt", ablation);
    write_text(dir / "ablation.csv", ablation_csv(runs));
  }
}

}  // namespace steu
