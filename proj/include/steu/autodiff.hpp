#pragma once

// Reverse-mode differentiation over the small set of primitives the
// classifier needs. A Tape records one forward pass; backward() replays it in
// reverse. Nodes whose inputs carry no gradient are recorded value-only, so a
// tape built from frozen parameters doubles as an inference pass.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "steu/tensor.hpp"

namespace steu::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradient per named trainable leaf. Ordered for deterministic iteration.
using Gradients = std::map<std::string, Tensor>;

/// Packed ragged sequences: rows [offsets[b], offsets[b+1]) belong to sequence b.
struct Segments {
  std::vector<std::size_t> offsets;
  std::size_t count() const { return offsets.empty() ? 0 : offsets.size() - 1; }
  std::size_t length(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  std::size_t total() const { return offsets.empty() ? 0 : offsets.back(); }
};

class Tape {
 public:
  /// Receives the output gradient and one slot per input; a slot is null when
  /// that input needs no gradient.
  using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> in_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf referencing caller-owned storage, which must outlive the tape.
  /// Trainable leaves appear in the gradient mapping under `name`.
  Var parameter(std::string name, const Tensor& value, bool trainable = true);
  Var constant(Tensor value);

  Var record(std::string op, Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  const std::string& op_name(Var v) const { return nodes_[v.id()].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradients of a scalar `loss` w.r.t. every trainable leaf. Leaves the loss
  /// does not depend on get zero tensors. Idempotent: the tape is not consumed.
  Gradients backward(Var loss) const;

  /// Enables per-op non-finite checks on recorded values; errors name the op.
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    std::string op;
    Tensor owned;
    const Tensor* ref = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable_leaf = false;
    const Tensor& value() const { return ref ? *ref : owned; }
  };
  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(*this); }

// ---- primitives ----------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a: N x m, bias: length m (or 1 x m), added to every row.
Var add_row(Var a, Var bias);
Var sigmoid(Var a);
Var gelu(Var a);
/// Row-wise softmax with the row max subtracted.
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// out[r] = table[ids[r]].
Var gather_rows(Var table, std::span<const std::uint32_t> ids);
/// Mean of each segment's rows: N x d -> B x d.
Var mean_pool(Var x, const Segments& segments);
/// Multi-head scaled dot-product attention restricted to each segment.
Var attention(Var q, Var k, Var v, const Segments& segments, std::size_t n_heads);
Var sum(Var a);
Var mean(Var a);

/// Options shared by the two cross-entropy reductions.
struct BceOptions {
  /// Per-row weights (length = rows); constants, not differentiated.
  std::optional<std::vector<double>> row_weights;
  /// Columns included in the mean; all when empty.
  std::vector<std::size_t> columns;
};

/// Mean over rows and selected columns of max(z,0) - z*y + ln(1 + e^-|z|).
Var bce_with_logits(Var logits, const Tensor& targets, const BceOptions& options = {});

/// Mean over rows and selected columns of -(t ln p + (1-t) ln(1-p)), with p and
/// t clamped to [1e-7, 1-1e-7]; the clamp has zero derivative outside the band.
Var soft_bce(Var probs, const Tensor& targets, const BceOptions& options = {});

// ---- scalar helpers used by primitives and by tests ----------------------

double stable_sigmoid(double x);
double bce_logit_term(double z, double y);
void softmax_inplace(std::span<double> row);

inline constexpr double kProbClamp = 1e-7;

}  // namespace steu::ad
