#include "steu/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "steu/error.hpp"

namespace steu::ad {

namespace {

void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw Error(op + ": " + what);
}

std::string shapes(const Tensor& a, const Tensor& b) {
  return shape_string(a.shape()) + " vs " + shape_string(b.shape());
}

Tape& tape_of(Var a, Var b) {
  require(&a.tape() == &b.tape(), "op", "operands recorded on different tapes");
  return a.tape();
}

}  // namespace

// ---- Tape ----------------------------------------------------------------

Var Tape::parameter(std::string name, const Tensor& value, bool trainable) {
  Node node;
  node.op = std::move(name);
  node.ref = &value;
  node.requires_grad = trainable;
  node.trainable_leaf = trainable;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node node;
  node.op = "constant";
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  if (check_finite_ && !value.all_finite()) {
    throw Error(op + ": produced non-finite values");
  }
  Node node;
  node.op = std::move(op);
  node.owned = std::move(value);
  for (const auto& in : inputs) {
    require(&in.tape() == this, node.op, "input recorded on a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const { return nodes_[v.id()].value(); }

Gradients Tape::backward(Var loss) const {
  require(&loss.tape() == this, "backward", "loss recorded on a different tape");
  require(value(loss).size() == 1, "backward",
          "loss must be a scalar, got shape " + shape_string(value(loss).shape()));

  const std::size_t last = loss.id();
  std::vector<Tensor> grads(last + 1);
  for (std::size_t i = 0; i <= last; ++i) {
    if (nodes_[i].requires_grad) grads[i] = Tensor(nodes_[i].value().shape(), 0.0);
  }
  if (nodes_[last].requires_grad) grads[last][0] = 1.0;

  std::vector<Tensor*> slots;
  for (std::size_t i = last + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backward) continue;
    slots.clear();
    for (std::size_t in : node.inputs) {
      slots.push_back(nodes_[in].requires_grad ? &grads[in] : nullptr);
    }
    node.backward(grads[i], slots);
  }

  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].trainable_leaf) continue;
    Tensor g = i <= last ? std::move(grads[i]) : Tensor(nodes_[i].value().shape(), 0.0);
    auto [it, inserted] = out.emplace(nodes_[i].op, std::move(g));
    require(inserted, "backward", "duplicate parameter name " + nodes_[i].op);
  }
  return out;
}

// ---- scalar helpers ------------------------------------------------------

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double bce_logit_term(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

void softmax_inplace(std::span<double> row) {
  if (row.empty()) return;
  const double peak = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (auto& v : row) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : row) v /= total;
}

// ---- elementwise ---------------------------------------------------------

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.shape() == y.shape(), "add", "shape mismatch " + shapes(x, y));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return tape.record("add", std::move(out), {a, b},
                     [](const Tensor& g, std::span<Tensor* const> in) {
                       for (auto* slot : in) {
                         if (!slot) continue;
                         for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                       }
                     });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.shape() == y.shape(), "sub", "shape mismatch " + shapes(x, y));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return tape.record("sub", std::move(out), {a, b},
                     [](const Tensor& g, std::span<Tensor* const> in) {
                       if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                       if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
                     });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.shape() == y.shape(), "mul", "shape mismatch " + shapes(x, y));
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return tape.record("mul", std::move(out), {a, b},
                     [x, y](const Tensor& g, std::span<Tensor* const> in) {
                       if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * y[i];
                       if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * x[i];
                     });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().record("scale", std::move(out), {a},
                         [s](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += s * g[i];
                         });
}

Var add_row(Var a, Var bias) {
  Tape& tape = tape_of(a, bias);
  const Tensor& x = a.value();
  const Tensor& b = bias.value();
  require(x.rank() == 2 && b.size() == x.cols(), "add_row",
          "bias does not match row width " + shapes(x, b));
  Tensor out = x;
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out(r, c) += b[c];
  }
  return tape.record("add_row", std::move(out), {a, bias},
                     [rows, cols](const Tensor& g, std::span<Tensor* const> in) {
                       if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                       if (in[1]) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) (*in[1])[c] += g[r * cols + c];
                         }
                       }
                     });
}

Var sigmoid(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = stable_sigmoid(v);
  Tensor cache = out;
  return a.tape().record("sigmoid", std::move(out), {a},
                         [cache](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             (*in[0])[i] += g[i] * cache[i] * (1.0 - cache[i]);
                           }
                         });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  Tensor tanh_cache(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    tanh_cache[i] = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    out[i] = 0.5 * v * (1.0 + tanh_cache[i]);
  }
  return a.tape().record("gelu", std::move(out), {a},
                         [a, tanh_cache](const Tensor& g, std::span<Tensor* const> in) {
                           const Tensor& x = a.value();
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const double v = x[i];
                             const double t = tanh_cache[i];
                             const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                             (*in[0])[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                           }
                         });
}

Var softmax_rows(Var a) {
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  Tensor cache = out;
  return a.tape().record("softmax_rows", std::move(out), {a},
                         [cache](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t r = 0; r < cache.rows(); ++r) {
                             auto p = cache.row(r);
                             auto gr = g.row(r);
                             double dot = 0.0;
                             for (std::size_t c = 0; c < p.size(); ++c) dot += p[c] * gr[c];
                             auto dst = in[0]->row(r);
                             for (std::size_t c = 0; c < p.size(); ++c) dst[c] += p[c] * (gr[c] - dot);
                           }
                         });
}

// ---- linear algebra ------------------------------------------------------

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap view(const Tensor& t) { return ConstMap(t.values().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.values().data(), t.rows(), t.cols()); }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require(x.rank() == 2 && y.rank() == 2 && x.cols() == y.rows(), "matmul",
          "inner dimensions differ " + shapes(x, y));
  Tensor out({x.rows(), y.cols()}, 0.0);
  view(out).noalias() = view(x) * view(y);
  return tape.record("matmul", std::move(out), {a, b},
                     [a, b](const Tensor& g, std::span<Tensor* const> in) {
                       if (in[0]) view(*in[0]).noalias() += view(g) * view(b.value()).transpose();
                       if (in[1]) view(*in[1]).noalias() += view(a.value()).transpose() * view(g);
                     });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = tape_of(x, gain);
  tape_of(x, bias);
  const Tensor& in = x.value();
  require(in.rank() == 2, "layer_norm", "expects a matrix, got " + shape_string(in.shape()));
  const std::size_t rows = in.rows();
  const std::size_t cols = in.cols();
  require(gain.value().size() == cols && bias.value().size() == cols, "layer_norm",
          "gain/bias width differs from input " + shapes(in, gain.value()));
  const Tensor& g = gain.value();
  const Tensor& b = bias.value();

  Tensor normed({rows, cols});
  std::vector<double> inv_std(rows);
  Tensor out({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = in.row(r);
    double mu = 0.0;
    for (double v : src) mu += v;
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : src) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      normed(r, c) = (src[c] - mu) * inv_std[r];
      out(r, c) = normed(r, c) * g[c] + b[c];
    }
  }
  return tape.record(
      "layer_norm", std::move(out), {x, gain, bias},
      [normed, inv_std, gain, rows, cols](const Tensor& grad, std::span<Tensor* const> slots) {
        const Tensor& g = gain.value();
        for (std::size_t r = 0; r < rows; ++r) {
          auto gr = grad.row(r);
          auto xh = normed.row(r);
          if (slots[1]) for (std::size_t c = 0; c < cols; ++c) (*slots[1])[c] += gr[c] * xh[c];
          if (slots[2]) for (std::size_t c = 0; c < cols; ++c) (*slots[2])[c] += gr[c];
          if (slots[0]) {
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double d = gr[c] * g[c];
              mean_d += d;
              mean_dx += d * xh[c];
            }
            mean_d /= static_cast<double>(cols);
            mean_dx /= static_cast<double>(cols);
            auto dst = slots[0]->row(r);
            for (std::size_t c = 0; c < cols; ++c) {
              dst[c] += inv_std[r] * (gr[c] * g[c] - mean_d - xh[c] * mean_dx);
            }
          }
        }
      });
}

Var gather_rows(Var table, std::span<const std::uint32_t> ids) {
  const Tensor& t = table.value();
  require(t.rank() == 2, "gather_rows", "table must be a matrix");
  const std::size_t cols = t.cols();
  Tensor out({ids.size(), cols});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] < t.rows(), "gather_rows",
            "row id " + std::to_string(ids[r]) + " out of range for " + shape_string(t.shape()));
    std::copy_n(&t(ids[r], 0), cols, &out(r, 0));
  }
  std::vector<std::uint32_t> index(ids.begin(), ids.end());
  return table.tape().record("gather_rows", std::move(out), {table},
                             [index, cols](const Tensor& g, std::span<Tensor* const> in) {
                               Tensor& dst = *in[0];
                               for (std::size_t r = 0; r < index.size(); ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   dst(index[r], c) += g(r, c);
                                 }
                               }
                             });
}

Var mean_pool(Var x, const Segments& segments) {
  const Tensor& in = x.value();
  require(in.rank() == 2 && segments.total() == in.rows(), "mean_pool",
          "segments cover " + std::to_string(segments.total()) + " rows, input has " +
              std::to_string(in.rows()));
  const std::size_t cols = in.cols();
  const std::size_t batch = segments.count();
  Tensor out({batch, cols}, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t len = segments.length(b);
    require(len > 0, "mean_pool", "empty segment " + std::to_string(b));
    for (std::size_t r = segments.offsets[b]; r < segments.offsets[b + 1]; ++r) {
      for (std::size_t c = 0; c < cols; ++c) out(b, c) += in(r, c);
    }
    for (std::size_t c = 0; c < cols; ++c) out(b, c) /= static_cast<double>(len);
  }
  return x.tape().record("mean_pool", std::move(out), {x},
                         [segments, cols](const Tensor& g, std::span<Tensor* const> slots) {
                           Tensor& dst = *slots[0];
                           for (std::size_t b = 0; b < segments.count(); ++b) {
                             const double w = 1.0 / static_cast<double>(segments.length(b));
                             for (std::size_t r = segments.offsets[b]; r < segments.offsets[b + 1]; ++r) {
                               for (std::size_t c = 0; c < cols; ++c) dst(r, c) += w * g(b, c);
                             }
                           }
                         });
}

Var attention(Var q, Var k, Var v, const Segments& segments, std::size_t n_heads) {
  Tape& tape = tape_of(q, k);
  tape_of(q, v);
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  require(Q.shape() == K.shape() && Q.shape() == V.shape(), "attention",
          "q/k/v shapes differ " + shapes(Q, K) + " / " + shape_string(V.shape()));
  require(Q.rank() == 2 && segments.total() == Q.rows(), "attention",
          "segments do not cover the input rows");
  const std::size_t d = Q.cols();
  require(n_heads > 0 && d % n_heads == 0, "attention", "width not divisible by head count");
  const std::size_t dh = d / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  // Probabilities for every (segment, head) block, stored consecutively.
  std::vector<double> probs;
  std::size_t total = 0;
  for (std::size_t b = 0; b < segments.count(); ++b) total += segments.length(b) * segments.length(b);
  probs.reserve(total * n_heads);

  Tensor out({Q.rows(), d}, 0.0);
  for (std::size_t b = 0; b < segments.count(); ++b) {
    const std::size_t base = segments.offsets[b];
    const std::size_t len = segments.length(b);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t start = probs.size();
        const double* qi = &Q(base + i, c0);
        for (std::size_t j = 0; j < len; ++j) {
          const double* kj = &K(base + j, c0);
          double s = 0.0;
          for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
          probs.push_back(s * scale_factor);
        }
        std::span<double> row(probs.data() + start, len);
        softmax_inplace(row);
        double* oi = &out(base + i, c0);
        for (std::size_t j = 0; j < len; ++j) {
          const double p = row[j];
          const double* vj = &V(base + j, c0);
          for (std::size_t t = 0; t < dh; ++t) oi[t] += p * vj[t];
        }
      }
    }
  }

  return tape.record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, segments, n_heads, dh, scale_factor, probs = std::move(probs)](
          const Tensor& g, std::span<Tensor* const> slots) {
        const Tensor& Q = q.value();
        const Tensor& K = k.value();
        const Tensor& V = v.value();
        std::vector<double> dp;
        std::size_t cursor = 0;
        for (std::size_t b = 0; b < segments.count(); ++b) {
          const std::size_t base = segments.offsets[b];
          const std::size_t len = segments.length(b);
          dp.resize(len);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const double* p = probs.data() + cursor;
              cursor += len;
              const double* gi = &g(base + i, c0);
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double* vj = &V(base + j, c0);
                double acc = 0.0;
                for (std::size_t t = 0; t < dh; ++t) acc += gi[t] * vj[t];
                dp[j] = acc;
                dot += p[j] * acc;
                if (slots[2]) {
                  double* gv = &(*slots[2])(base + j, c0);
                  for (std::size_t t = 0; t < dh; ++t) gv[t] += p[j] * gi[t];
                }
              }
              for (std::size_t j = 0; j < len; ++j) {
                const double ds = p[j] * (dp[j] - dot) * scale_factor;
                if (ds == 0.0) continue;
                if (slots[0]) {
                  double* gq = &(*slots[0])(base + i, c0);
                  const double* kj = &K(base + j, c0);
                  for (std::size_t t = 0; t < dh; ++t) gq[t] += ds * kj[t];
                }
                if (slots[1]) {
                  double* gk = &(*slots[1])(base + j, c0);
                  const double* qi = &Q(base + i, c0);
                  for (std::size_t t = 0; t < dh; ++t) gk[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---- reductions ----------------------------------------------------------

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape().record("sum", Tensor::scalar(total), {a},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           for (auto& v : in[0]->values()) v += g[0];
                         });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  return a.tape().record("mean", Tensor::scalar(total / n), {a},
                         [n](const Tensor& g, std::span<Tensor* const> in) {
                           for (auto& v : in[0]->values()) v += g[0] / n;
                         });
}

namespace {

std::vector<std::size_t> resolve_columns(const BceOptions& options, std::size_t cols,
                                         const std::string& op) {
  if (options.columns.empty()) {
    std::vector<std::size_t> all(cols);
    for (std::size_t c = 0; c < cols; ++c) all[c] = c;
    return all;
  }
  for (std::size_t c : options.columns) {
    require(c < cols, op, "column " + std::to_string(c) + " out of range");
  }
  return options.columns;
}

std::vector<double> resolve_weights(const BceOptions& options, std::size_t rows,
                                    const std::string& op) {
  if (!options.row_weights) return std::vector<double>(rows, 1.0);
  require(options.row_weights->size() == rows, op, "row weight count differs from batch");
  return *options.row_weights;
}

}  // namespace

Var bce_with_logits(Var logits, const Tensor& targets, const BceOptions& options) {
  const Tensor& z = logits.value();
  require(z.shape() == targets.shape(), "bce_with_logits", "shape mismatch " + shapes(z, targets));
  require(z.rank() == 2, "bce_with_logits", "expects batch x classes");
  const auto columns = resolve_columns(options, z.cols(), "bce_with_logits");
  const auto weights = resolve_weights(options, z.rows(), "bce_with_logits");
  const double denom = static_cast<double>(z.rows() * columns.size());
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    double row_total = 0.0;
    for (std::size_t c : columns) row_total += bce_logit_term(z(r, c), targets(r, c));
    total += weights[r] * row_total;
  }
  return logits.tape().record(
      "bce_with_logits", Tensor::scalar(total / denom), {logits},
      [logits, targets, columns, weights, denom](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& z = logits.value();
        for (std::size_t r = 0; r < z.rows(); ++r) {
          for (std::size_t c : columns) {
            (*in[0])(r, c) += g[0] * weights[r] * (stable_sigmoid(z(r, c)) - targets(r, c)) / denom;
          }
        }
      });
}

Var soft_bce(Var probs, const Tensor& targets, const BceOptions& options) {
  const Tensor& p = probs.value();
  require(p.shape() == targets.shape(), "soft_bce", "shape mismatch " + shapes(p, targets));
  require(p.rank() == 2, "soft_bce", "expects batch x classes");
  const auto columns = resolve_columns(options, p.cols(), "soft_bce");
  const auto weights = resolve_weights(options, p.rows(), "soft_bce");
  const double denom = static_cast<double>(p.rows() * columns.size());
  const auto clamp = [](double x) { return std::clamp(x, kProbClamp, 1.0 - kProbClamp); };
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double row_total = 0.0;
    for (std::size_t c : columns) {
      const double q = clamp(p(r, c));
      const double t = clamp(targets(r, c));
      row_total += -(t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
    }
    total += weights[r] * row_total;
  }
  return probs.tape().record(
      "soft_bce", Tensor::scalar(total / denom), {probs},
      [probs, targets, columns, weights, denom, clamp](const Tensor& g, std::span<Tensor* const> in) {
        const Tensor& p = probs.value();
        for (std::size_t r = 0; r < p.rows(); ++r) {
          for (std::size_t c : columns) {
            const double x = p(r, c);
            if (x < kProbClamp || x > 1.0 - kProbClamp) continue;
            const double t = clamp(targets(r, c));
            const double d = -t / x + (1.0 - t) / (1.0 - x);
            (*in[0])(r, c) += g[0] * weights[r] * d / denom;
          }
        }
      });
}

}  // namespace steu::ad
