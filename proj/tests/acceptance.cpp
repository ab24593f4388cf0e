// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "primitive_checks.hpp"
#include "selector_oracle.hpp"
#include "steu/error.hpp"
#include "steu/eval.hpp"
#include "steu/unlearn.hpp"
#include "support.hpp"

using namespace steu;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "steu_acceptance";

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::string& args, const std::string& log) {
  const std::string cmd = std::string(STEU_CLI) + " " + args + " >> " + (kWork / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- shared experiment ----------------------------------------------------

struct Run {
  UnlearnResult result;
  ForgetRetain scores;
  ParamAudit audit;
};

struct Experiment {
  std::uint64_t seed = 0;
  LabeledDataset data;
  ModelParams theta0;
  ForgetRetain base;
  SelectedSet selected;
  std::map<Method, Run> runs;
};

Experiment prepare(std::uint64_t seed) {
  Experiment e;
  e.seed = seed;
  GeneratorSpec spec;
  spec.seed = seed;
  e.data = generate_corpus(spec);
  ModelConfig mc;
  mc.vocab_size = e.data.vocabulary.size();
  mc.num_classes = e.data.num_classes();
  mc.seed = seed;
  TrainHyper hyper;
  hyper.seed = seed;
  e.theta0 = train_baseline(e.data, mc, hyper).params;
  e.base = forget_retain_f1(e.theta0, e.data.val, 0, 0.5);
  e.selected = select_tokens(score_tokens(count_token_stats(e.data, 0)), 64, 5, 0);
  std::printf("  seed %llu baseline: macro %.4f forget %.4f retain %.4f\n", static_cast<unsigned long long>(seed),
              e.base.macro_f1, e.base.forget_f1, e.base.retain_avg_f1);
  return e;
}

const Run& run(Experiment& e, Method m) {
  auto it = e.runs.find(m);
  if (it != e.runs.end()) return it->second;
  UnlearnConfig c;
  c.method = m;
  c.seed = e.seed;
  Run r;
  r.result = run_unlearning(e.theta0, e.data, e.selected, c);
  r.scores = forget_retain_f1(r.result.params, e.data.val, 0, 0.5);
  r.audit = param_audit(e.theta0, r.result.params, r.result.mask);
  std::printf("  seed %llu %-20s forget %.4f retain %.4f changed %zu\n", static_cast<unsigned long long>(e.seed),
              std::string(method_name(m)).c_str(), r.scores.forget_f1, r.scores.retain_avg_f1,
              r.audit.total_changed);
  return e.runs.emplace(m, std::move(r)).first->second;
}

// ---- criteria ---------------------------------------------------------------

Verdict budget_arithmetic() {
  const auto emb = param_budget(256, 768, 6, false, 108300000);
  const auto head = param_budget(256, 768, 6, true, 108300000);
  const std::string pct = format_percent(head.fraction);
  return {emb.updated == 196608 && head.updated == 201222 && pct == "0.19%",
          fmt("emb only %zu, with head %zu, %s of 108.3M", emb.updated, head.updated, pct.c_str())};
}

Verdict ablation_pattern(Experiment& e) {
  const double with_head = run(e, Method::steu).scores.forget_f1;
  const double emb_only = run(e, Method::steu_emb_only).scores.forget_f1;
  return {with_head <= 0.02 && emb_only - with_head >= 0.05,
          fmt("forget F1 emb-only %.4f vs +head %.4f (gap %.4f)", emb_only, with_head, emb_only - with_head)};
}

Verdict tradeoff_pattern(Experiment& e) {
  const auto& steu = run(e, Method::steu);
  const auto& ds = run(e, Method::direct_suppression);
  const auto& ga = run(e, Method::grad_ascent);
  const double steu_drop = e.base.retain_avg_f1 - steu.scores.retain_avg_f1;
  const double ga_drop = e.base.retain_avg_f1 - ga.scores.retain_avg_f1;
  const bool ok = steu.scores.forget_f1 <= 0.02 && ds.scores.forget_f1 <= 0.02 && ga.scores.forget_f1 <= 0.02 &&
                  10 * steu.audit.total_changed <= ds.audit.total_changed && ga_drop >= steu_drop;
  return {ok, fmt("forget steu %.4f ds %.4f ga %.4f; params %zu vs %zu; retain drop ga %.4f >= steu %.4f",
                  steu.scores.forget_f1, ds.scores.forget_f1, ga.scores.forget_f1, steu.audit.total_changed,
                  ds.audit.total_changed, ga_drop, steu_drop)};
}

Verdict behavioral(std::vector<Experiment*> seeds) {
  bool ok = true;
  std::string detail;
  for (auto* e : seeds) {
    const auto& r = run(*e, Method::steu);
    const double drop = e->base.retain_avg_f1 - r.scores.retain_avg_f1;
    ok = ok && e->base.macro_f1 >= 0.85 && r.scores.forget_f1 <= 0.02 && drop <= 0.05;
    detail += fmt("seed %llu: base macro %.4f, forget %.4f, retain drop %.4f; ",
                  static_cast<unsigned long long>(e->seed), e->base.macro_f1, r.scores.forget_f1, drop);
  }
  detail.resize(detail.size() - 2);
  return {ok, detail};
}

Verdict freeze_audit(std::vector<Experiment*> seeds, int tamper_exit) {
  bool ok = tamper_exit == 2;
  std::size_t audited = 0;
  for (auto* e : seeds) {
    for (const auto& [m, r] : e->runs) {
      if (!is_steu_family(m)) continue;
      const auto& mc = e->theta0.config();
      const std::size_t bound = 64 * mc.dim + mc.dim * mc.num_classes + mc.num_classes;
      ok = ok && r.audit.passed() && r.audit.total_changed <= bound;
      ++audited;
    }
  }
  return {ok && audited > 0, fmt("%zu STEU runs audited clean; tampered checkpoint exit code %d", audited, tamper_exit)};
}

Verdict selector_oracle() {
  std::size_t matched = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    const std::size_t V = 5 + rng.below(46), C = 2 + rng.below(4), n = 10 + rng.below(191);
    const auto ds = test::random_dataset(seed * 31, V, C, n, 0, 15);
    const std::size_t cf = rng.below(C), k = 1 + rng.below(20), min_freq = 1 + rng.below(4);
    const auto want = test::brute_force_selection(ds, cf, k, min_freq);
    try {
      if (select_tokens(score_tokens(count_token_stats(ds, cf)), k, min_freq, cf).token_ids == want) ++matched;
    } catch (const Error&) {
      if (want.empty()) ++matched;
    }
  }
  double worst = 1.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    GeneratorSpec spec;
    spec.seed = seed;
    const auto ds = generate_corpus(spec);
    const auto sel = select_tokens(score_tokens(count_token_stats(ds, 0)), 2 * spec.lexicon_size_per_class, 5, 0);
    const std::set<TokenId> chosen(sel.token_ids.begin(), sel.token_ids.end());
    const auto lexicon = planted_lexicon(spec, 0);
    std::size_t hit = 0;
    for (const auto& t : lexicon) {
      const auto id = ds.vocabulary.find(t);
      if (id && chosen.count(*id)) ++hit;
    }
    worst = std::min(worst, static_cast<double>(hit) / static_cast<double>(lexicon.size()));
  }
  return {matched == 100 && worst >= 0.8, fmt("oracle matched %zu/100; minimum plant recall %.3f", matched, worst)};
}

Verdict gradient_correctness() {
  auto cfg = test::small_config(40, 4, 8, 1, 2);
  const auto params = test::random_params(cfg, 21, 0.3);
  const auto ds = test::random_dataset(12, 40, 4, 4, 0, 6);
  const auto batch = make_batch(ds.train);
  const Tensor labels = label_matrix(test::pointers(ds.train));
  auto loss_of = [&](const ModelParams& p) {
    ad::Tape tape;
    return multilabel_loss(tape.constant(infer_logits(p, batch)), labels).value().item();
  };
  auto out = forward(params, batch);
  const auto grads = out.tape->backward(multilabel_loss(out.logits, labels));
  std::vector<Tensor> values, analytic;
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    values.push_back(params.tensor(i));
    analytic.push_back(grads.at(params.name(i)));
  }
  const auto composed = grad_check(
      [&](std::span<const Tensor> ts) {
        auto p = params;
        for (std::size_t i = 0; i < ts.size(); ++i) p.tensor(i) = ts[i];
        return loss_of(p);
      },
      values, analytic, 1e-5);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& [op, r] : test::primitive_checks()) {
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      worst_op = op;
    }
  }
  return {composed.max_relative_error < 1e-4 && worst < 1e-6,
          fmt("composed %.2e over %zu coordinates; worst primitive %s %.2e", composed.max_relative_error,
              composed.coordinates_checked, worst_op.c_str(), worst)};
}

Verdict stationarity(Experiment& e) {
  std::vector<const Document*> retain;
  for (const auto& d : e.data.train)
    if (!d.has_label(0)) retain.push_back(&d);
  Rng rng(5);
  double worst = 0.0;
  std::size_t batches = 0;
  for (Method m : {Method::steu, Method::steu_emb_only, Method::direct_suppression}) {
    UnlearnConfig c;
    c.method = m;
    const auto mask = build_mask(e.selected, c, e.theta0.config());
    for (int b = 0; b < 5; ++b, ++batches) {
      std::vector<const Document*> pick;
      for (int i = 0; i < 16; ++i) pick.push_back(retain[rng.below(retain.size())]);
      const auto tokens = make_batch(pick);
      const Tensor base = infer_logits(e.theta0, tokens);
      auto out = forward(e.theta0, tokens, [&](std::string_view n) { return mask.touches(n); });
      for (const auto& [name, g] : out.tape->backward(utility_loss(out.logits, base, 0)))
        for (double v : g.values()) worst = std::max(worst, std::abs(v));
    }
  }
  return {worst < 1e-10, fmt("max |grad| %.2e over %zu retain batches and 3 masks", worst, batches)};
}

Verdict determinism(int& tamper_exit) {
  const char* files[] = {"base/model.ckpt", "base/train_history.csv", "base/metrics.json", "select/selection.csv",
                         "steu/model.ckpt", "steu/history.csv",        "steu/mask.json",    "steu/audit.json",
                         "steu/report.json", "report/comparison.csv",  "report/comparison.txt",
                         "report/tradeoff.csv"};
  bool ok = true;
  for (const char* name : {"quick_a", "quick_b"}) {
    const auto d = (kWork / name).string();
    ok = ok && cli("gen-corpus --out " + d + "/data --seed 7", "cli.log") == 0 &&
         cli("train --data " + d + "/data --out " + d + "/base --seed 7", "cli.log") == 0 &&
         cli("select-tokens --data " + d + "/data --out " + d + "/select", "cli.log") == 0 &&
         cli("unlearn --model " + d + "/base/model.ckpt --data " + d + "/data --selection " + d +
                 "/select/selection.csv --out " + d + "/steu --seed 7",
             "cli.log") == 0 &&
         cli("report --runs " + d + "/steu --out " + d + "/report", "cli.log") == 0;
  }
  std::size_t same = 0, total = 0;
  for (const char* f : files) {
    ++total;
    const auto a = slurp(kWork / "quick_a" / f);
    if (!a.empty() && a == slurp(kWork / "quick_b" / f)) ++same;
  }

  // tampered copy for the freeze audit
  auto tampered = load_checkpoint(kWork / "quick_a/steu/model.ckpt");
  double& v = tampered.at("block0.ffn.w1")[0];
  v = std::nextafter(v, 1e300);
  save_checkpoint(kWork / "tampered.ckpt", tampered);
  const auto a = (kWork / "quick_a").string();
  tamper_exit = cli("audit --base " + a + "/base/model.ckpt --model " + (kWork / "tampered.ckpt").string() +
                        " --mask " + a + "/steu/mask.json --out " + (kWork / "tamper_audit").string(),
                    "cli.log");
  return {ok && same == total, fmt("%zu/%zu artifacts byte-identical across two runs", same, total)};
}

}  // namespace

int main() {
  std::setvbuf(stdout, nullptr, _IOLBF, 0);
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  const auto t0 = std::chrono::steady_clock::now();
  std::map<int, Verdict> verdicts;
  std::map<int, double> elapsed;
  auto timed = [&](int id, auto&& fn) {
    const auto start = std::chrono::steady_clock::now();
    try {
      verdicts[id] = fn();
    } catch (const std::exception& ex) {
      verdicts[id] = {false, std::string("exception: ") + ex.what()};
    }
    elapsed[id] += seconds_since(start);
    std::printf("  criterion %d done (%.1fs)\n", id, elapsed[id]);
    std::fflush(stdout);
  };

  timed(1, budget_arithmetic);
  timed(7, gradient_correctness);
  timed(6, selector_oracle);

  auto start = std::chrono::steady_clock::now();
  Experiment seven = prepare(7);
  Experiment eleven = prepare(11);
  const double training = seconds_since(start);
  std::printf("  baselines trained (%.1fs)\n", training);

  timed(8, [&] { return stationarity(seven); });
  timed(2, [&] { return ablation_pattern(seven); });
  timed(3, [&] { return tradeoff_pattern(seven); });
  timed(4, [&] { return behavioral({&seven, &eleven}); });
  run(seven, Method::influence_weighted);
  int tamper_exit = -1;
  timed(9, [&] { return determinism(tamper_exit); });
  timed(5, [&] { return freeze_audit({&seven, &eleven}, tamper_exit); });

  const char* titles[] = {"",
                          "budget arithmetic",
                          "ablation pattern",
                          "tradeoff pattern",
                          "behavioral unlearning",
                          "freeze audit",
                          "selector oracle",
                          "gradient correctness",
                          "utility stationarity",
                          "determinism"};
  std::printf("\n");
  int failed = 0;
  for (const auto& [id, v] : verdicts) {
    std::printf("%s criterion %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, titles[id], v.detail.c_str());
    failed += !v.pass;
  }
  std::printf("\n%d/%zu criteria passed in %.1fs\n", static_cast<int>(verdicts.size()) - failed, verdicts.size(),
              seconds_since(t0));
  return failed ? 1 : 0;
}
