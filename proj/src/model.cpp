#include "steu/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "steu/error.hpp"
#include "steu/rng.hpp"

namespace steu {

// ---- config & layout -------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error("invalid model config: " + why); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (dim < 1 || max_len < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1) {
    fail("all dimensions must be >= 1");
  }
  if (dim % n_heads != 0) fail("dim " + std::to_string(dim) + " not divisible by n_heads " + std::to_string(n_heads));
  if (num_classes < 2) fail("num_classes must be >= 2");
}

bool ModelConfig::same_shape(const ModelConfig& o) const {
  return vocab_size == o.vocab_size && dim == o.dim && max_len == o.max_len &&
         n_layers == o.n_layers && n_heads == o.n_heads && ffn_dim == o.ffn_dim &&
         num_classes == o.num_classes;
}

std::string block_prefix(std::size_t layer) { return "block" + std::to_string(layer) + "."; }

std::vector<TensorSpec> tensor_layout(const ModelConfig& c) {
  std::vector<TensorSpec> out;
  out.push_back({std::string(kWordEmbedding), {c.vocab_size, c.dim}});
  out.push_back({std::string(kPositionEmbedding), {c.max_len, c.dim}});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto p = block_prefix(l);
    out.push_back({p + "attn.wq", {c.dim, c.dim}});
    out.push_back({p + "attn.wk", {c.dim, c.dim}});
    out.push_back({p + "attn.wv", {c.dim, c.dim}});
    out.push_back({p + "attn.wo", {c.dim, c.dim}});
    out.push_back({p + "ln1.gain", {c.dim}});
    out.push_back({p + "ln1.bias", {c.dim}});
    out.push_back({p + "ffn.w1", {c.dim, c.ffn_dim}});
    out.push_back({p + "ffn.b1", {c.ffn_dim}});
    out.push_back({p + "ffn.w2", {c.ffn_dim, c.dim}});
    out.push_back({p + "ffn.b2", {c.dim}});
    out.push_back({p + "ln2.gain", {c.dim}});
    out.push_back({p + "ln2.bias", {c.dim}});
  }
  out.push_back({std::string(kHeadWeight), {c.dim, c.num_classes}});
  out.push_back({std::string(kHeadBias), {c.num_classes}});
  return out;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  return a.config_.same_shape(b.config_) && a.names_ == b.names_ && a.tensors_ == b.tensors_;
}

std::size_t closed_form_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.dim;
  const std::size_t f = c.ffn_dim;
  return c.vocab_size * d + c.max_len * d + c.n_layers * (4 * d * d + 2 * d * f + f + d + 4 * d) +
         d * c.num_classes + c.num_classes;
}

// ---- parameters ------------------------------------------------------------

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool is_gain(std::string_view name) { return ends_with(name, ".gain"); }
bool is_bias(std::string_view name) {
  return ends_with(name, ".bias") || ends_with(name, ".b1") || ends_with(name, ".b2");
}

}  // namespace

ModelParams ModelParams::with_layout(const ModelConfig& config) {
  config.validate();
  ModelParams p;
  p.config_ = config;
  for (auto& spec : tensor_layout(config)) {
    p.tensors_.emplace_back(spec.shape, is_gain(spec.name) ? 1.0 : 0.0);
    p.names_.push_back(std::move(spec.name));
  }
  return p;
}

ModelParams ModelParams::zeros(const ModelConfig& config) { return with_layout(config); }

ModelParams ModelParams::initialize(const ModelConfig& config) {
  ModelParams p = with_layout(config);
  for (std::size_t i = 0; i < p.tensors_.size(); ++i) {
    if (is_gain(p.names_[i]) || is_bias(p.names_[i])) continue;
    Rng rng(derive_seed(config.seed, i));
    for (auto& v : p.tensors_[i].values()) v = rng.normal(0.0, 0.02);
  }
  return p;
}

Tensor& ModelParams::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

const Tensor& ModelParams::at(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw Error("no parameter tensor named '" + std::string(name) + "'");
}

bool ModelParams::contains(std::string_view name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ModelParams::total_parameters() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

// ---- batching --------------------------------------------------------------

TokenBatch make_batch(std::span<const Document* const> docs) {
  TokenBatch batch;
  for (const auto* d : docs) batch.width = std::max(batch.width, d->token_ids.size());
  batch.ids.assign(docs.size() * batch.width, kPadId);
  for (std::size_t r = 0; r < docs.size(); ++r) {
    std::copy(docs[r]->token_ids.begin(), docs[r]->token_ids.end(),
              batch.ids.begin() + static_cast<std::ptrdiff_t>(r * batch.width));
    batch.lengths.push_back(docs[r]->token_ids.size());
  }
  return batch;
}

TokenBatch make_batch(const std::vector<Document>& docs) {
  std::vector<const Document*> ptrs;
  for (const auto& d : docs) ptrs.push_back(&d);
  return make_batch(ptrs);
}

Tensor label_matrix(std::span<const Document* const> docs) {
  const std::size_t classes = docs.empty() ? 0 : docs.front()->labels.size();
  Tensor out({docs.size(), classes});
  for (std::size_t r = 0; r < docs.size(); ++r) {
    for (std::size_t c = 0; c < classes; ++c) out(r, c) = docs[r]->labels[c];
  }
  return out;
}

// ---- forward ---------------------------------------------------------------

BatchOutput forward(const ModelParams& params, const TokenBatch& batch,
                    const TrainablePredicate& trainable) {
  const ModelConfig& cfg = params.config();
  ad::Segments segments;
  segments.offsets.push_back(0);
  std::vector<TokenId> ids;
  std::vector<TokenId> positions;
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const std::size_t len = batch.lengths[r];
    if (len == 0) throw Error("forward: row " + std::to_string(r) + " has length 0");
    if (len > cfg.max_len) {
      throw Error("forward: row " + std::to_string(r) + " has length " + std::to_string(len) +
                  " > max_len " + std::to_string(cfg.max_len));
    }
    if (len > batch.width) throw Error("forward: row length exceeds batch width");
    for (std::size_t p = 0; p < len; ++p) {
      const TokenId t = batch.ids[r * batch.width + p];
      if (t >= cfg.vocab_size) {
        throw Error("forward: token id " + std::to_string(t) + " >= vocab size " +
                    std::to_string(cfg.vocab_size));
      }
      ids.push_back(t);
      positions.push_back(static_cast<TokenId>(p));
    }
    segments.offsets.push_back(ids.size());
  }

  BatchOutput out;
  out.tape = std::make_unique<ad::Tape>();
  ad::Tape& tape = *out.tape;
  auto leaf = [&](std::string_view name) {
    const bool train = !trainable || trainable(name);
    return tape.parameter(std::string(name), params.at(name), train);
  };

  ad::Var x = ad::add(ad::gather_rows(leaf(kWordEmbedding), ids),
                      ad::gather_rows(leaf(kPositionEmbedding), positions));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto p = block_prefix(l);
    ad::Var q = ad::matmul(x, leaf(p + "attn.wq"));
    ad::Var k = ad::matmul(x, leaf(p + "attn.wk"));
    ad::Var v = ad::matmul(x, leaf(p + "attn.wv"));
    ad::Var attended = ad::matmul(ad::attention(q, k, v, segments, cfg.n_heads), leaf(p + "attn.wo"));
    ad::Var h = ad::layer_norm(ad::add(x, attended), leaf(p + "ln1.gain"), leaf(p + "ln1.bias"));
    ad::Var ff = ad::gelu(ad::add_row(ad::matmul(h, leaf(p + "ffn.w1")), leaf(p + "ffn.b1")));
    ff = ad::add_row(ad::matmul(ff, leaf(p + "ffn.w2")), leaf(p + "ffn.b2"));
    x = ad::layer_norm(ad::add(h, ff), leaf(p + "ln2.gain"), leaf(p + "ln2.bias"));
  }
  ad::Var pooled = ad::mean_pool(x, segments);
  out.logits = ad::add_row(ad::matmul(pooled, leaf(kHeadWeight)), leaf(kHeadBias));
  return out;
}

Tensor infer_logits(const ModelParams& params, const TokenBatch& batch) {
  auto out = forward(params, batch, [](std::string_view) { return false; });
  return out.values();
}

Tensor infer_logits(const ModelParams& params, const std::vector<Document>& docs,
                    std::size_t batch_size) {
  const std::size_t classes = params.config().num_classes;
  Tensor all({docs.size(), classes});
  std::vector<const Document*> chunk;
  for (std::size_t start = 0; start < docs.size(); start += batch_size) {
    chunk.clear();
    for (std::size_t i = start; i < std::min(docs.size(), start + batch_size); ++i) chunk.push_back(&docs[i]);
    const Tensor logits = infer_logits(params, make_batch(chunk));
    std::copy(logits.values().begin(), logits.values().end(),
              all.values().begin() + static_cast<std::ptrdiff_t>(start * classes));
  }
  return all;
}

ad::Var multilabel_loss(ad::Var logits, const Tensor& labels) {
  return ad::bce_with_logits(logits, labels);
}

LabelMatrix threshold_logits(const Tensor& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must be in (0, 1)");
  LabelMatrix out(logits.rows(), std::vector<std::uint8_t>(logits.cols(), 0));
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      out[r][c] = ad::stable_sigmoid(logits(r, c)) >= threshold;
    }
  }
  return out;
}

LabelMatrix predict(const ModelParams& params, const std::vector<Document>& docs, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error("threshold must be in (0, 1)");
  return threshold_logits(infer_logits(params, docs), threshold);
}

// ---- optimizer -------------------------------------------------------------

void Adam::step(ModelParams& params, const ad::Gradients& grads) {
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(config_.beta1, t);
  const double correction2 = 1.0 - std::pow(config_.beta2, t);
  for (const auto& [name, grad] : grads) {
    Tensor& param = params.at(name);
    if (param.shape() != grad.shape()) {
      throw Error("Adam: gradient shape mismatch for " + name);
    }
    auto it = std::find_if(state_.begin(), state_.end(), [&](const auto& s) { return s.first == name; });
    if (it == state_.end()) {
      state_.push_back({name, Moments{Tensor(grad.shape(), 0.0), Tensor(grad.shape(), 0.0)}});
      it = std::prev(state_.end());
    }
    Moments& mom = it->second;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = grad[i];
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g;
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g * g;
      const double update = (mom.m[i] / correction1) / (std::sqrt(mom.v[i] / correction2) + config_.eps);
      param[i] -= config_.lr * update;
    }
  }
}

// ---- baseline training -----------------------------------------------------

TrainResult train_baseline(const LabeledDataset& dataset, const ModelConfig& config,
                           const TrainHyper& hyper, const EpochCallback& on_epoch) {
  if (dataset.train.empty()) throw Error("train_baseline: empty training split");
  if (dataset.vocabulary.size() != config.vocab_size) {
    throw Error("train_baseline: dataset vocabulary has " + std::to_string(dataset.vocabulary.size()) +
                " tokens, config expects " + std::to_string(config.vocab_size));
  }
  if (dataset.num_classes() != config.num_classes) {
    throw Error("train_baseline: dataset has " + std::to_string(dataset.num_classes()) +
                " classes, config expects " + std::to_string(config.num_classes));
  }
  if (hyper.batch_size < 1 || hyper.epochs < 1) throw Error("train_baseline: batch_size and epochs must be >= 1");

  TrainResult result;
  result.params = ModelParams::initialize(config);
  Adam adam({.lr = hyper.lr});
  Rng rng(derive_seed(hyper.seed, 0x7472));
  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), 0);
  const LabelMatrix gold = gold_labels(dataset.val);

  std::vector<const Document*> chunk;
  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      chunk.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + hyper.batch_size); ++i) {
        chunk.push_back(&dataset.train[order[i]]);
      }
      auto out = forward(result.params, make_batch(chunk));
      ad::Var loss = multilabel_loss(out.logits, label_matrix(chunk));
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw Error("train_baseline: loss diverged at epoch " + std::to_string(epoch) + ", step " +
                    std::to_string(steps + 1));
      }
      adam.step(result.params, out.tape->backward(loss));
      loss_total += value;
      ++steps;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_total / static_cast<double>(steps);
    m.val_macro_f1 = dataset.val.empty()
                         ? 0.0
                         : macro_f1(per_class_metrics(predict(result.params, dataset.val), gold));
    result.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'T', 'E', 'U'};

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > UINT32_MAX) throw Error(std::string("checkpoint: ") + what + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
  bool done() const { return pos_ == data_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(path_ + ": truncated checkpoint");
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  const ModelConfig& c = params.config();
  std::string buf(kMagic, 4);
  put_u32(buf, kCheckpointVersion);
  for (std::size_t v : {c.vocab_size, c.dim, c.max_len, c.n_layers, c.n_heads, c.ffn_dim, c.num_classes}) {
    put_u32(buf, narrow_u32(v, "config value"));
  }
  for (std::size_t i = 0; i < params.tensor_count(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params.tensor(i);
    put_u32(buf, narrow_u32(name.size(), "name length"));
    buf += name;
    put_u32(buf, narrow_u32(t.rank(), "rank"));
    for (auto d : t.shape()) put_u32(buf, narrow_u32(d, "dimension"));
    for (double v : t.values()) put_f64(buf, v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("write failed: " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string();
  if (data.size() < 4 || data.compare(0, 4, kMagic, 4) != 0) {
    throw Error(where + ": not a checkpoint");
  }
  Reader r(data.substr(4), where);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.vocab_size = r.u32();
  cfg.dim = r.u32();
  cfg.max_len = r.u32();
  cfg.n_layers = r.u32();
  cfg.n_heads = r.u32();
  cfg.ffn_dim = r.u32();
  cfg.num_classes = r.u32();
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(where + ": " + e.what());
  }
  if (closed_form_parameter_count(cfg) > data.size() / 8) {
    throw Error(where + ": truncated checkpoint (config implies more values than the file holds)");
  }
  ModelParams params = ModelParams::zeros(cfg);

  std::size_t index = 0;
  while (!r.done()) {
    const std::string name = r.bytes(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (index >= params.tensor_count() || params.name(index) != name) {
      throw Error(where + ": unexpected tensor '" + name + "' at position " + std::to_string(index));
    }
    Tensor& dst = params.tensor(index);
    if (dst.shape() != shape) {
      throw Error(where + ": shape mismatch for tensor '" + name + "': file " + shape_string(shape) +
                  ", config " + shape_string(dst.shape()));
    }
    for (auto& v : dst.values()) v = r.f64();
    ++index;
  }
  if (index != params.tensor_count()) {
    throw Error(where + ": truncated checkpoint (missing tensor '" + params.name(index) + "')");
  }
  return params;
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  ModelParams params = load_checkpoint(path);
  const auto want = tensor_layout(expected);
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (i >= params.tensor_count() || params.name(i) != want[i].name) {
      throw Error(path.string() + ": shape mismatch, expected tensor '" + want[i].name + "'");
    }
    if (params.tensor(i).shape() != want[i].shape) {
      throw Error(path.string() + ": shape mismatch for tensor '" + want[i].name + "': checkpoint " +
                  shape_string(params.tensor(i).shape()) + ", expected " + shape_string(want[i].shape));
    }
  }
  if (params.tensor_count() != want.size()) {
    throw Error(path.string() + ": shape mismatch, checkpoint has extra tensors");
  }
  return params;
}

}  // namespace steu
