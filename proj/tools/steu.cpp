// steu: command-line driver for corpus generation, baseline training, token
// selection, unlearning, evaluation, auditing and reporting.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "steu/corpus.hpp"
#include "steu/csv.hpp"
#include "steu/error.hpp"
#include "steu/eval.hpp"
#include "steu/model.hpp"
#include "steu/selector.hpp"
#include "steu/unlearn.hpp"

namespace fs = std::filesystem;
using namespace steu;

namespace {

constexpr const char* kUsage =
    "usage: steu <command> [options]\n"
    "\n"
    "commands:\n"
    "  gen-corpus     generate a synthetic corpus directory\n"
    "  train          train the baseline classifier\n"
    "  select-tokens  rank tokens for a forget class and write the selection CSV\n"
    "  unlearn        run an unlearning method on a baseline checkpoint\n"
    "  eval           per-class metrics of a checkpoint on the validation split\n"
    "  audit          compare two checkpoints against a gradient mask\n"
    "  report         build comparison/ablation/tradeoff tables from runs\n"
    "  ablate         run the token-budget grid and the method grid\n"
    "\n"
    "Run `steu <command> --help` for options. STEU_LOG=error|info|debug sets verbosity.\n";

void setup_logging() {
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("STEU_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("STEU_LOG='{}' not recognized; using info", level);
  }
}

/// Options shared by every subcommand: a config file, all defaults captured
/// so the resolved configuration can be echoed.
void prepare(CLI::App& app) {
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "read options from a `key = value` file; flags override it");
  app.set_help_flag("-h,--help", "show this help");
}

struct ExitRequest {
  int code;
};

void parse(CLI::App& app, int argc, char** argv) {
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    throw ExitRequest{app.exit(e) == 0 ? 0 : 1};
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

/// Echo of the resolved options, re-readable through --config.
void write_resolved(const CLI::App& app, const fs::path& out_dir, const std::string& command) {
  fs::create_directories(out_dir);
  write_text(out_dir / (command + ".conf"), "# steu " + command + "\n" + app.config_to_str(true, false));
}

void require_file(const fs::path& path, const std::string& flag, const std::string& hint) {
  if (!fs::exists(path)) {
    throw UsageError(flag + " " + path.string() + " does not exist; " + hint);
  }
}

void require_corpus(const fs::path& dir) {
  require_file(dir / "train.jsonl", "--data", "run `steu gen-corpus --out " + dir.string() + "` first");
}

std::vector<double> parse_doubles(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  for (const auto& field : csv::split(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(field, &used));
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + field + "' is not a number");
    }
  }
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& text, const std::string& flag) {
  std::vector<std::size_t> out;
  for (double v : parse_doubles(text, flag)) {
    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw UsageError(flag + ": expected positive integers");
    }
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::vector<std::string> parse_names(const std::string& text) {
  std::vector<std::string> out;
  for (auto& f : csv::split(text)) {
    if (!f.empty()) out.push_back(f);
  }
  return out;
}

nlohmann::ordered_json metrics_json(const std::vector<ClassMetrics>& metrics,
                                    const std::vector<std::string>& names) {
  auto arr = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < metrics.size(); ++c) {
    const auto& m = metrics[c];
    arr.push_back({{"class", names[c]},
                   {"tp", m.true_positives},
                   {"fp", m.false_positives},
                   {"fn", m.false_negatives},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1}});
  }
  return arr;
}

// ---- gen-corpus ------------------------------------------------------------

int cmd_gen_corpus(int argc, char** argv) {
  CLI::App app("Generate a synthetic multi-label corpus", "steu gen-corpus");
  prepare(app);
  GeneratorSpec spec;
  std::string out;
  std::string prevalence = "0.30,0.25,0.25,0.20,0.20,0.15";
  app.add_option("--out", out, "output corpus directory")->required();
  app.add_option("--seed", spec.seed, "generator seed");
  app.add_option("--classes", spec.num_classes, "number of classes");
  app.add_option("--shared-vocab", spec.shared_vocab_size, "filler vocabulary size");
  app.add_option("--lexicon-size", spec.lexicon_size_per_class, "planted tokens per class");
  app.add_option("--injection-rate", spec.lexicon_injection_rate, "probability a token slot is planted");
  app.add_option("--min-length", spec.min_doc_length, "minimum document length");
  app.add_option("--max-length", spec.max_doc_length, "maximum document length");
  app.add_option("--prevalence", prevalence, "comma-separated per-class label prevalence");
  app.add_option("--multi-label-rate", spec.multi_label_rate, "target share of documents with >= 2 labels");
  app.add_option("--n-train", spec.n_train, "training documents");
  app.add_option("--n-val", spec.n_val, "validation documents");
  parse(app, argc, argv);

  spec.label_prevalence = parse_doubles(prevalence, "--prevalence");
  spdlog::info("generating corpus (seed {}, {} train / {} val)", spec.seed, spec.n_train, spec.n_val);
  const auto dataset = generate_corpus(spec);
  write_dataset(out, dataset);
  write_resolved(app, out, "gen-corpus");
  spdlog::info("wrote {} (V={}, C={})", out, dataset.vocabulary.size(), dataset.num_classes());
  return 0;
}

// ---- train -----------------------------------------------------------------

int cmd_train(int argc, char** argv) {
  CLI::App app("Train the baseline classifier", "steu train");
  prepare(app);
  std::string data, out;
  ModelConfig mc;
  TrainHyper hyper;
  app.add_option("--data", data, "corpus directory")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--dim", mc.dim, "embedding width");
  app.add_option("--max-len", mc.max_len, "maximum sequence length");
  app.add_option("--layers", mc.n_layers, "encoder blocks");
  app.add_option("--heads", mc.n_heads, "attention heads");
  app.add_option("--ffn", mc.ffn_dim, "feed-forward width");
  app.add_option("--seed", hyper.seed, "initialization and shuffling seed");
  app.add_option("--lr", hyper.lr, "Adam learning rate");
  app.add_option("--epochs", hyper.epochs, "training epochs");
  app.add_option("--batch-size", hyper.batch_size, "minibatch size");
  parse(app, argc, argv);

  require_corpus(data);
  const auto dataset = read_dataset(data);
  mc.vocab_size = dataset.vocabulary.size();
  mc.num_classes = dataset.num_classes();
  mc.seed = hyper.seed;
  mc.validate();
  fs::create_directories(out);
  write_resolved(app, out, "train");

  std::string history = "epoch,train_loss,val_macro_f1\n";
  const auto result = train_baseline(dataset, mc, hyper, [&](const EpochMetrics& m) {
    spdlog::info("epoch {}: loss {:.4f}, val macro F1 {:.4f}", m.epoch, m.train_loss, m.val_macro_f1);
    history += std::to_string(m.epoch) + "," + csv::number(m.train_loss) + "," + csv::number(m.val_macro_f1) + "\n";
  });
  save_checkpoint(fs::path(out) / "model.ckpt", result.params);
  write_text(fs::path(out) / "train_history.csv", history);

  const auto metrics = per_class_metrics(predict(result.params, dataset.val), gold_labels(dataset.val));
  nlohmann::ordered_json j;
  j["total_params"] = result.params.total_parameters();
  j["val_macro_f1"] = macro_f1(metrics);
  j["per_class"] = metrics_json(metrics, dataset.class_names);
  write_text(fs::path(out) / "metrics.json", j.dump(2) + "\n");
  spdlog::info("wrote {}/model.ckpt ({} parameters)", out, result.params.total_parameters());
  return 0;
}

// ---- select-tokens ---------------------------------------------------------

int cmd_select(int argc, char** argv) {
  CLI::App app("Rank tokens for the forget class", "steu select-tokens");
  prepare(app);
  std::string data, out, weight_log = "natural";
  std::size_t forget_class = 0, k = 64, min_freq = 5;
  app.add_option("--data", data, "corpus directory")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--forget-class", forget_class, "index of the class to forget");
  app.add_option("--k", k, "token budget");
  app.add_option("--min-freq", min_freq, "minimum forget-class count");
  app.add_option("--weight-log", weight_log, "base of the frequency weight")
      ->check(CLI::IsMember({"natural", "base2"}));
  parse(app, argc, argv);

  require_corpus(data);
  const auto dataset = read_dataset(data);
  const auto stats = count_token_stats(dataset, forget_class);
  const auto scores = score_tokens(stats, weight_log == "base2" ? WeightLog::base2 : WeightLog::natural);
  const auto selected = select_tokens(scores, k, min_freq, forget_class);
  fs::create_directories(out);
  write_selection_csv(fs::path(out) / "selection.csv", scores, selected, dataset.vocabulary);
  write_resolved(app, out, "select-tokens");
  spdlog::info("selected {} tokens for class {} ({} forget documents)", selected.token_ids.size(),
               forget_class, stats.forget_documents);
  return 0;
}

// ---- unlearn ---------------------------------------------------------------

struct UnlearnInputs {
  std::string model, data, selection, out;
  std::string method = "steu";
  std::string scope = "full";
  bool no_head = false;
  bool no_retain_anchor = false;
  UnlearnConfig config;
};

void add_unlearn_options(CLI::App& app, UnlearnInputs& in, bool with_method) {
  UnlearnConfig& c = in.config;
  app.add_option("--model", in.model, "baseline checkpoint")->required();
  app.add_option("--data", in.data, "corpus directory")->required();
  app.add_option("--out", in.out, "output directory")->required();
  if (with_method) {
    app.add_option("--selection", in.selection, "selection CSV (STEU methods)");
    app.add_option("--method", in.method, "steu, steu_emb_only, grad_ascent, direct_suppression, influence_weighted");
    app.add_flag("--no-head", in.no_head, "STEU: keep the classifier head frozen");
  }
  app.add_option("--forget-class", c.forget_class, "index of the class to forget");
  app.add_option("--k", c.k, "token budget (prefix of the selection)");
  app.add_option("--lambda-u", c.lambda_u, "forget-loss weight");
  app.add_option("--lambda-k", c.lambda_k, "utility-loss weight");
  app.add_option("--lr", c.lr, "Adam learning rate");
  app.add_option("--epochs", c.epochs, "passes over the forget stream");
  app.add_option("--batch-size", c.batch_size, "forget and retain batch size");
  app.add_option("--seed", c.seed, "stream shuffling seed");
  app.add_option("--forget-scope", in.scope, "forget-loss columns: full or target")
      ->check(CLI::IsMember({"full", "target"}));
  app.add_flag("--no-retain-anchor", in.no_retain_anchor, "baselines: drop the utility term");
  app.add_option("--clip-norm", c.clip_norm, "gradient-norm cap for grad_ascent");
  app.add_option("--threshold", c.threshold, "decision threshold for F1");
}

UnlearnConfig resolve(const UnlearnInputs& in) {
  UnlearnConfig c = in.config;
  c.method = parse_method(in.method);
  c.forget_scope = parse_scope(in.scope);
  c.update_head = !in.no_head;
  c.retain_anchor = !in.no_retain_anchor;
  return c;
}

SelectedSet selection_prefix(const std::vector<TokenId>& ranked, const UnlearnConfig& c) {
  SelectedSet s;
  s.k = c.k;
  s.min_freq = c.min_freq;
  s.forget_class = c.forget_class;
  s.token_ids.assign(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(std::min(c.k, ranked.size())));
  return s;
}

/// One unlearning run written to `out`: checkpoint, history, mask, audit and
/// report JSON.
UnlearnReport unlearn_into(const ModelParams& theta0, const LabeledDataset& dataset, const SelectedSet& selected,
                           const UnlearnConfig& config, const ForgetRetain& base, const fs::path& out) {
  spdlog::info("unlearning with {} (class {}, k {}, {} epochs)", method_name(config.method), config.forget_class,
               selected.token_ids.size(), config.epochs);
  const auto result = run_unlearning(theta0, dataset, selected, config);
  for (const auto& e : result.history.epochs) {
    spdlog::debug("epoch {}: forget F1 {:.4f}, retain avg F1 {:.4f}", e.epoch, e.forget_f1, e.retain_avg_f1);
  }
  fs::create_directories(out);
  save_checkpoint(out / "model.ckpt", result.params);
  write_history_csv(out / "history.csv", result.history);
  write_mask(out / "mask.json", result.mask);
  const auto audit = param_audit(theta0, result.params, result.mask);
  write_audit_json(out / "audit.json", audit);
  const auto final_scores = forget_retain_f1(result.params, dataset.val, config.forget_class, config.threshold);
  const bool head = result.mask.head_trainable;
  const std::size_t k = is_steu_family(config.method) ? selected.token_ids.size() : 0;
  auto report = make_report(std::string(method_name(config.method)), config.forget_class, k, head, base,
                            final_scores, audit, theta0.total_parameters());
  write_report_json(out / "report.json", report);
  spdlog::info("{}: forget F1 {:.4f} -> {:.4f}, retain avg F1 {:.4f} -> {:.4f}, {} parameters changed",
               report.method, report.forget_base, report.forget_final, report.retain_base, report.retain_final,
               report.params_updated);
  if (!audit.passed()) throw Error("audit failed for " + report.method);
  return report;
}

ModelParams load_baseline(const std::string& path, const LabeledDataset& dataset) {
  require_file(path, "--model", "run `steu train` first");
  auto theta0 = load_checkpoint(path);
  if (theta0.config().vocab_size != dataset.vocabulary.size() ||
      theta0.config().num_classes != dataset.num_classes()) {
    throw Error("checkpoint " + path + " was not trained on this corpus (vocabulary or class count differ)");
  }
  return theta0;
}

int cmd_unlearn(int argc, char** argv) {
  CLI::App app("Run an unlearning method", "steu unlearn");
  prepare(app);
  UnlearnInputs in;
  add_unlearn_options(app, in, true);
  parse(app, argc, argv);

  const UnlearnConfig config = resolve(in);
  require_corpus(in.data);
  const auto dataset = read_dataset(in.data);
  const auto theta0 = load_baseline(in.model, dataset);
  config.validate(dataset.num_classes());
  SelectedSet selected;
  if (is_steu_family(config.method)) {
    if (in.selection.empty()) throw UsageError("--selection is required for method " + in.method);
    require_file(in.selection, "--selection", "run `steu select-tokens` first");
    selected = selection_prefix(read_selection_csv(in.selection), config);
  }
  write_resolved(app, in.out, "unlearn");
  const auto base = forget_retain_f1(theta0, dataset.val, config.forget_class, config.threshold);
  unlearn_into(theta0, dataset, selected, config, base, in.out);
  return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(int argc, char** argv) {
  CLI::App app("Evaluate a checkpoint on the validation split", "steu eval");
  prepare(app);
  std::string model, data, out;
  std::size_t forget_class = 0;
  double threshold = 0.5;
  app.add_option("--model", model, "checkpoint")->required();
  app.add_option("--data", data, "corpus directory")->required();
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--forget-class", forget_class, "class reported as the forget class");
  app.add_option("--threshold", threshold, "decision threshold");
  parse(app, argc, argv);

  if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("--threshold must lie in (0, 1)");
  require_corpus(data);
  const auto dataset = read_dataset(data);
  const auto params = load_baseline(model, dataset);
  const auto metrics = per_class_metrics(predict(params, dataset.val, threshold), gold_labels(dataset.val));
  const auto fr = forget_retain(metrics, forget_class);
  nlohmann::ordered_json j;
  j["forget_class"] = forget_class;
  j["threshold"] = threshold;
  j["forget_f1"] = fr.forget_f1;
  j["retain_avg_f1"] = fr.retain_avg_f1;
  j["macro_f1"] = fr.macro_f1;
  j["per_class"] = metrics_json(metrics, dataset.class_names);
  fs::create_directories(out);
  write_text(fs::path(out) / "metrics.json", j.dump(2) + "\n");
  write_resolved(app, out, "eval");
  spdlog::info("forget F1 {:.4f}, retain avg F1 {:.4f}, macro F1 {:.4f}", fr.forget_f1, fr.retain_avg_f1,
               fr.macro_f1);
  return 0;
}

// ---- audit -----------------------------------------------------------------

int cmd_audit(int argc, char** argv) {
  CLI::App app("Audit parameter changes against a mask", "steu audit");
  prepare(app);
  std::string base, model, mask_path, out;
  app.add_option("--base", base, "reference checkpoint")->required();
  app.add_option("--model", model, "edited checkpoint")->required();
  app.add_option("--mask", mask_path, "mask JSON written by unlearn")->required();
  app.add_option("--out", out, "output directory")->required();
  parse(app, argc, argv);

  require_file(base, "--base", "run `steu train` first");
  require_file(model, "--model", "run `steu unlearn` first");
  require_file(mask_path, "--mask", "run `steu unlearn` first");
  const auto theta0 = load_checkpoint(base);
  const auto theta1 = load_checkpoint(model);
  const auto mask = read_mask(mask_path);
  const auto audit = param_audit(theta0, theta1, mask);
  fs::create_directories(out);
  write_audit_json(fs::path(out) / "audit.json", audit);
  write_resolved(app, out, "audit");
  if (!audit.passed()) {
    std::string names;
    for (const auto& n : audit.violating_tensors) names += (names.empty() ? "" : ", ") + n;
    spdlog::error("audit FAILED: {} entries changed outside the mask in {}", audit.total_violations, names);
    return 2;
  }
  spdlog::info("audit passed: {} entries changed (capacity {})", audit.total_changed, audit.capacity);
  return 0;
}

// ---- report ----------------------------------------------------------------

int cmd_report(int argc, char** argv) {
  CLI::App app("Build comparison, ablation and tradeoff tables", "steu report");
  prepare(app);
  std::vector<std::string> runs;
  std::string out;
  app.add_option("--runs", runs, "run directories (each holding report.json) or report files")->required()->default_str("");
  app.add_option("--out", out, "output directory")->required();
  parse(app, argc, argv);

  std::vector<UnlearnReport> reports;
  for (const auto& r : runs) {
    fs::path p = r;
    if (fs::is_directory(p)) p /= "report.json";
    require_file(p, "--runs", "run `steu unlearn --out " + r + "` first");
    reports.push_back(read_report_json(p));
  }
  build_report(reports, out);
  write_resolved(app, out, "report");
  std::cout << comparison_table(reports);
  return 0;
}

// ---- ablate ----------------------------------------------------------------

int cmd_ablate(int argc, char** argv) {
  CLI::App app("Token-budget grid and method grid", "steu ablate");
  prepare(app);
  UnlearnInputs in;
  std::string ks = "64,128,256";
  std::string methods = "grad_ascent,direct_suppression,influence_weighted";
  std::size_t min_freq = 5;
  add_unlearn_options(app, in, false);
  app.add_option("--ks", ks, "comma-separated token budgets");
  app.add_option("--methods", methods, "comma-separated baseline methods");
  app.add_option("--min-freq", min_freq, "minimum forget-class count for selection");
  parse(app, argc, argv);

  UnlearnConfig config = resolve(in);
  config.min_freq = min_freq;
  const auto budgets = parse_counts(ks, "--ks");
  std::vector<Method> baselines;
  for (const auto& name : parse_names(methods)) {
    const Method m = parse_method(name);
    if (is_steu_family(m)) throw UsageError("--methods lists baselines only; STEU runs come from --ks");
    baselines.push_back(m);
  }
  require_corpus(in.data);
  const auto dataset = read_dataset(in.data);
  const auto theta0 = load_baseline(in.model, dataset);
  config.validate(dataset.num_classes());
  write_resolved(app, in.out, "ablate");

  const std::size_t max_k = *std::max_element(budgets.begin(), budgets.end());
  const auto scores = score_tokens(count_token_stats(dataset, config.forget_class));
  const auto ranked = select_tokens(scores, max_k, min_freq, config.forget_class).token_ids;
  const auto base = forget_retain_f1(theta0, dataset.val, config.forget_class, config.threshold);
  const fs::path root = in.out;

  std::vector<UnlearnReport> grid, comparison;
  for (std::size_t k : budgets) {
    for (bool head : {false, true}) {
      UnlearnConfig c = config;
      c.method = head ? Method::steu : Method::steu_emb_only;
      c.k = k;
      const auto name = "steu_k" + std::to_string(k) + (head ? "_head" : "_emb");
      auto report = unlearn_into(theta0, dataset, selection_prefix(ranked, c), c, base, root / "runs" / name);
      grid.push_back(report);
      if (head && k == budgets.front()) comparison.push_back(report);
    }
  }
  for (Method m : baselines) {
    UnlearnConfig c = config;
    c.method = m;
    comparison.push_back(unlearn_into(theta0, dataset, {}, c, base, root / "runs" / std::string(method_name(m))));
  }
  build_report(comparison, root);
  const auto table = ablation_table(grid);
  if (!table.empty()) {
    write_text(root / "ablation.txt", table);
    write_text(root / "ablation.csv", ablation_csv(grid));
  }
  std::cout << comparison_table(comparison) << "\n" << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  if (argc < 2) {
    std::cerr << kUsage;
    return 1;
  }
  const std::string command = argv[1];
  if (command == "-h" || command == "--help" || command == "help") {
    std::cout << kUsage;
    return 0;
  }
  // Subcommand parsers see argv without the command word.
  std::vector<char*> rest;
  rest.push_back(argv[0]);
  for (int i = 2; i < argc; ++i) rest.push_back(argv[i]);
  const int n = static_cast<int>(rest.size());
  try {
    if (command == "gen-corpus") return cmd_gen_corpus(n, rest.data());
    if (command == "train") return cmd_train(n, rest.data());
    if (command == "select-tokens") return cmd_select(n, rest.data());
    if (command == "unlearn") return cmd_unlearn(n, rest.data());
    if (command == "eval") return cmd_eval(n, rest.data());
    if (command == "audit") return cmd_audit(n, rest.data());
    if (command == "report") return cmd_report(n, rest.data());
    if (command == "ablate") return cmd_ablate(n, rest.data());
    std::cerr << "steu: unknown command '" << command << "'\n\n" << kUsage;
    return 1;
  } catch (const ExitRequest& e) {
    return e.code;
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
}
