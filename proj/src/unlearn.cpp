#include "steu/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "steu/csv.hpp"
#include "steu/error.hpp"
#include "steu/eval.hpp"
#include "steu/rng.hpp"

namespace steu {

namespace {

constexpr Method kMethods[] = {Method::steu, Method::steu_emb_only, Method::grad_ascent,
                               Method::direct_suppression, Method::influence_weighted};

bool is_head(std::string_view name) { return name == kHeadWeight || name == kHeadBias; }

}  // namespace

std::string_view method_name(Method m) {
  switch (m) {
    case Method::steu: return "steu";
    case Method::steu_emb_only: return "steu_emb_only";
    case Method::grad_ascent: return "grad_ascent";
    case Method::direct_suppression: return "direct_suppression";
    case Method::influence_weighted: return "influence_weighted";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : kMethods) {
    if (method_name(m) == name) return m;
  }
  throw UsageError("unknown method '" + std::string(name) +
                   "' (expected steu, steu_emb_only, grad_ascent, direct_suppression, influence_weighted)");
}

bool is_steu_family(Method m) { return m == Method::steu || m == Method::steu_emb_only; }

std::string_view scope_name(ForgetScope s) { return s == ForgetScope::full ? "full" : "target"; }

ForgetScope parse_scope(std::string_view name) {
  if (name == "full") return ForgetScope::full;
  if (name == "target") return ForgetScope::target;
  throw UsageError("unknown forget scope '" + std::string(name) + "' (expected full or target)");
}

void UnlearnConfig::validate(std::size_t num_classes) const {
  if (forget_class >= num_classes) {
    throw Error("forget class " + std::to_string(forget_class) + " out of range for " +
                std::to_string(num_classes) + " classes");
  }
  if (!(lambda_u >= 0.0) || !(lambda_k >= 0.0)) throw Error("lambda_u and lambda_k must be >= 0");
  if (lambda_u == 0.0 && lambda_k == 0.0) throw Error("lambda_u and lambda_k are both 0");
  if (epochs < 1) throw Error("epochs must be >= 1");
  if (batch_size < 1) throw Error("batch_size must be >= 1");
  if (k < 1) throw Error("k must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be a finite value >= 0");
  if (!(clip_norm > 0.0)) throw Error("clip_norm must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must lie in (0, 1)");
}

bool UnlearnConfig::head_trainable() const {
  if (method == Method::steu) return update_head;
  return method != Method::steu_emb_only;
}

// ---- mask ------------------------------------------------------------------

std::size_t GradientMask::trainable_rows() const {
  return static_cast<std::size_t>(std::count(embedding_rows.begin(), embedding_rows.end(), true));
}

bool GradientMask::touches(std::string_view name) const {
  if (name == kWordEmbedding) return trainable_rows() > 0;
  if (is_head(name)) return head_trainable;
  return encoder_trainable_tensors.count(std::string(name)) > 0;
}

std::size_t GradientMask::capacity(const ModelConfig& config) const {
  std::size_t n = trainable_rows() * config.dim;
  if (head_trainable) n += config.dim * config.num_classes + config.num_classes;
  for (const auto& spec : tensor_layout(config)) {
    if (encoder_trainable_tensors.count(spec.name)) n += shape_size(spec.shape);
  }
  return n;
}

GradientMask build_mask(const SelectedSet& selected, const UnlearnConfig& config,
                        const ModelConfig& model_config) {
  GradientMask mask;
  mask.embedding_rows.assign(model_config.vocab_size, false);
  mask.head_trainable = config.head_trainable();
  if (is_steu_family(config.method)) {
    for (TokenId t : selected.token_ids) {
      if (t >= model_config.vocab_size) {
        throw Error("selected token id " + std::to_string(t) + " >= vocab size " +
                    std::to_string(model_config.vocab_size));
      }
      mask.embedding_rows[t] = true;
    }
  } else {
    const std::string last = block_prefix(model_config.n_layers - 1);
    for (const auto& spec : tensor_layout(model_config)) {
      if (spec.name.rfind(last, 0) == 0) mask.encoder_trainable_tensors.insert(spec.name);
    }
  }
  return mask;
}

ad::Gradients mask_gradients(const ad::Gradients& grads, const GradientMask& mask) {
  for (const auto& name : mask.encoder_trainable_tensors) {
    if (!grads.count(name)) throw Error("mask names tensor '" + name + "' absent from gradients");
  }
  for (auto name : {kWordEmbedding, kHeadWeight, kHeadBias}) {
    if (!grads.count(std::string(name))) {
      throw Error("gradients lack tensor '" + std::string(name) + "'");
    }
  }
  ad::Gradients out;
  for (const auto& [name, grad] : grads) {
    Tensor g = grad;
    if (name == kWordEmbedding) {
      if (g.rows() != mask.embedding_rows.size()) {
        throw Error("embedding gradient has " + std::to_string(g.rows()) + " rows, mask has " +
                    std::to_string(mask.embedding_rows.size()));
      }
      for (std::size_t r = 0; r < g.rows(); ++r) {
        if (!mask.embedding_rows[r]) std::fill(g.row(r).begin(), g.row(r).end(), 0.0);
      }
    } else if (!mask.touches(name)) {
      g.fill(0.0);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

void write_mask(const std::filesystem::path& path, const GradientMask& mask) {
  nlohmann::ordered_json j;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.embedding_rows.size(); ++i) {
    if (mask.embedding_rows[i]) rows.push_back(i);
  }
  j["vocab_size"] = mask.embedding_rows.size();
  j["embedding_rows"] = rows;
  j["head_trainable"] = mask.head_trainable;
  j["encoder_trainable_tensors"] = mask.encoder_trainable_tensors;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

GradientMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read mask " + path.string());
  GradientMask mask;
  try {
    const auto j = nlohmann::json::parse(in);
    mask.embedding_rows.assign(j.at("vocab_size").get<std::size_t>(), false);
    for (std::size_t r : j.at("embedding_rows").get<std::vector<std::size_t>>()) {
      if (r >= mask.embedding_rows.size()) throw Error("row " + std::to_string(r) + " out of range");
      mask.embedding_rows[r] = true;
    }
    mask.head_trainable = j.at("head_trainable").get<bool>();
    for (const auto& name : j.at("encoder_trainable_tensors")) {
      mask.encoder_trainable_tensors.insert(name.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed mask: " + e.what());
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
  return mask;
}

// ---- objectives ------------------------------------------------------------

ad::Var forget_loss(ad::Var logits, const Tensor& labels, std::size_t forget_class, ForgetScope scope,
                    const std::vector<double>* row_weights) {
  const Tensor& z = logits.value();
  if (labels.shape() != z.shape()) {
    throw Error("forget_loss: shape mismatch " + shape_string(z.shape()) + " vs " +
                shape_string(labels.shape()));
  }
  if (forget_class >= z.cols()) throw Error("forget_loss: forget class out of range");
  Tensor target = labels;
  for (std::size_t r = 0; r < target.rows(); ++r) {
    if (target(r, forget_class) != 1.0) {
      throw Error("forget_loss: batch row " + std::to_string(r) + " lacks the forget label");
    }
    target(r, forget_class) = 0.0;
  }
  ad::BceOptions options;
  if (scope == ForgetScope::target) options.columns = {forget_class};
  if (row_weights) options.row_weights = *row_weights;
  return ad::bce_with_logits(logits, target, options);
}

ad::Var utility_loss(ad::Var logits, const Tensor& base_logits, std::size_t forget_class) {
  const Tensor& z = logits.value();
  if (z.cols() < 2) throw Error("utility_loss: needs at least 2 classes");
  if (base_logits.shape() != z.shape()) {
    throw Error("utility_loss: shape mismatch " + shape_string(z.shape()) + " vs " +
                shape_string(base_logits.shape()));
  }
  if (forget_class >= z.cols()) throw Error("utility_loss: forget class out of range");
  Tensor target = base_logits;
  for (auto& v : target.values()) v = ad::stable_sigmoid(v);
  ad::BceOptions options;
  for (std::size_t c = 0; c < z.cols(); ++c) {
    if (c != forget_class) options.columns.push_back(c);
  }
  return ad::soft_bce(ad::sigmoid(logits), target, options);
}

// ---- history ---------------------------------------------------------------

void write_history_csv(const std::filesystem::path& path, const TrainingHistory& history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,epoch,forget_loss,utility_loss,total_loss,forget_f1,retain_avg_f1\n";
  auto epoch_it = history.epochs.begin();
  for (const auto& s : history.steps) {
    out << s.step << ',' << s.epoch << ',' << csv::number(s.forget_loss) << ','
        << csv::number(s.utility_loss) << ',' << csv::number(s.total_loss);
    if (epoch_it != history.epochs.end() && epoch_it->last_step == s.step) {
      out << ',' << csv::number(epoch_it->forget_f1) << ',' << csv::number(epoch_it->retain_avg_f1);
      ++epoch_it;
    } else {
      out << ",,";
    }
    out << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

// ---- optimization ----------------------------------------------------------

namespace {

/// Index stream over a document subset, reshuffled on every pass.
class Stream {
 public:
  Stream(std::vector<std::size_t> items, std::uint64_t seed) : items_(std::move(items)), rng_(seed) {
    rng_.shuffle(items_);
  }
  std::size_t size() const { return items_.size(); }

  std::vector<std::size_t> next(std::size_t n) {
    std::vector<std::size_t> out;
    while (out.size() < n) {
      if (pos_ == items_.size()) {
        rng_.shuffle(items_);
        pos_ = 0;
      }
      out.push_back(items_[pos_++]);
    }
    return out;
  }

  void reshuffle() {
    rng_.shuffle(items_);
    pos_ = 0;
  }
  const std::vector<std::size_t>& items() const { return items_; }

 private:
  std::vector<std::size_t> items_;
  Rng rng_;
  std::size_t pos_ = 0;
};

double global_norm(const ad::Gradients& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

}  // namespace

UnlearnResult run_unlearning(const ModelParams& theta0, const LabeledDataset& dataset,
                             const SelectedSet& selected, const UnlearnConfig& config,
                             const StepObserver& observer) {
  const ModelConfig& mc = theta0.config();
  config.validate(mc.num_classes);
  if (dataset.vocabulary.size() != mc.vocab_size || dataset.num_classes() != mc.num_classes) {
    throw Error("run_unlearning: dataset does not match the model (vocabulary or class count)");
  }
  const std::size_t cf = config.forget_class;

  std::vector<std::size_t> forget_ids, retain_ids;
  for (std::size_t i = 0; i < dataset.train.size(); ++i) {
    (dataset.train[i].has_label(cf) ? forget_ids : retain_ids).push_back(i);
  }
  if (forget_ids.empty()) throw Error("run_unlearning: empty forget stream");
  if (retain_ids.empty()) throw Error("run_unlearning: empty retain stream");

  UnlearnResult result;
  result.params = theta0;
  result.mask = build_mask(selected, config, mc);
  const GradientMask& mask = result.mask;

  const bool ascent = config.method == Method::grad_ascent;
  const bool anchored = is_steu_family(config.method) || config.retain_anchor;
  const bool weighted = config.method == Method::influence_weighted;

  Stream forget_stream(forget_ids, derive_seed(config.seed, 0x666f));
  Stream retain_stream(retain_ids, derive_seed(config.seed, 0x7265));
  const std::size_t steps_per_epoch = (forget_ids.size() + config.batch_size - 1) / config.batch_size;
  result.history.steps_per_epoch = steps_per_epoch;

  const TrainablePredicate trainable = [&mask](std::string_view name) { return mask.touches(name); };
  Adam adam({.lr = config.lr});
  std::vector<const Document*> fbatch, rbatch;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (epoch > 1) forget_stream.reshuffle();
    const auto& order = forget_stream.items();
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      ++step;
      fbatch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        fbatch.push_back(&dataset.train[order[i]]);
      }
      auto fout = forward(result.params, make_batch(fbatch), trainable);
      const Tensor flabels = label_matrix(fbatch);

      ad::Var f_loss;
      if (ascent) {
        f_loss = multilabel_loss(fout.logits, flabels);
      } else if (weighted) {
        // Per-example forget loss from the forward values, normalized to mean 1.
        Tensor target = flabels;
        std::vector<std::size_t> cols;
        for (std::size_t c = 0; c < mc.num_classes; ++c) {
          if (config.forget_scope == ForgetScope::full || c == cf) cols.push_back(c);
        }
        std::vector<double> weights(fbatch.size(), 0.0);
        double total = 0.0;
        for (std::size_t r = 0; r < fbatch.size(); ++r) {
          target(r, cf) = 0.0;
          for (std::size_t c : cols) weights[r] += ad::bce_logit_term(fout.values()(r, c), target(r, c));
          total += weights[r];
        }
        const double mean_w = total / static_cast<double>(fbatch.size());
        for (auto& w : weights) w = mean_w > 0.0 ? w / mean_w : 1.0;
        f_loss = forget_loss(fout.logits, flabels, cf, config.forget_scope, &weights);
      } else {
        f_loss = forget_loss(fout.logits, flabels, cf, config.forget_scope);
      }
      const double f_value = f_loss.value().item();
      ad::Var f_obj = ad::scale(f_loss, ascent ? -config.lambda_u : config.lambda_u);
      ad::Gradients grads = fout.tape->backward(f_obj);
      double total_value = (ascent ? -1.0 : 1.0) * config.lambda_u * f_value;

      double u_value = 0.0;
      if (anchored && config.lambda_k > 0.0) {
        rbatch.clear();
        const auto picks = retain_stream.next(config.batch_size);
        for (std::size_t i : picks) rbatch.push_back(&dataset.train[i]);
        const TokenBatch rtokens = make_batch(rbatch);
        // Frozen logits on the very same batch, so the anchor is exact at theta0.
        const Tensor base = infer_logits(theta0, rtokens);
        auto rout = forward(result.params, rtokens, trainable);
        ad::Var u_loss = utility_loss(rout.logits, base, cf);
        u_value = u_loss.value().item();
        const ad::Gradients ugrads = rout.tape->backward(ad::scale(u_loss, config.lambda_k));
        for (auto& [name, g] : grads) {
          const Tensor& other = ugrads.at(name);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += other[i];
        }
        total_value += config.lambda_k * u_value;
      }
      if (!std::isfinite(total_value)) {
        throw Error("run_unlearning: non-finite loss at step " + std::to_string(step));
      }

      // Complete the mapping so the mask sees every tensor.
      for (std::size_t i = 0; i < result.params.tensor_count(); ++i) {
        if (!grads.count(result.params.name(i))) {
          grads.emplace(result.params.name(i), Tensor(result.params.tensor(i).shape(), 0.0));
        }
      }
      ad::Gradients masked = mask_gradients(grads, mask);
      if (ascent) {
        const double norm = global_norm(masked);
        if (norm > config.clip_norm) {
          const double s = config.clip_norm / norm;
          for (auto& [name, g] : masked) {
            for (auto& v : g.values()) v *= s;
          }
        }
      }
      if (observer) observer(step, masked);
      for (auto it = masked.begin(); it != masked.end();) {
        it = mask.touches(it->first) ? std::next(it) : masked.erase(it);
      }
      adam.step(result.params, masked);

      result.history.steps.push_back({step, epoch, f_value, u_value, total_value});
    }
    EpochRecord record{epoch, step, 0.0, 0.0};
    if (!dataset.val.empty()) {
      const auto fr = forget_retain_f1(result.params, dataset.val, cf, config.threshold);
      record.forget_f1 = fr.forget_f1;
      record.retain_avg_f1 = fr.retain_avg_f1;
    }
    result.history.epochs.push_back(record);
  }
  return result;
}

}  // namespace steu
