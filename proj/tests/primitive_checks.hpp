#pragma once

// Finite-difference checks of every tape primitive on small random inputs.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "steu/autodiff.hpp"
#include "steu/grad_check.hpp"
#include "support.hpp"

namespace steu::test {

struct OpCheck {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t coordinates_total = 0;
};

using Builder = std::function<ad::Var(std::vector<ad::Var>&)>;

// Scalar probe of an op: sum(op(inputs) * R) with a fixed random R, so every
// output coordinate carries a distinct weight.
inline double probe(const Builder& build, std::span<const Tensor> inputs, ad::Gradients* grads) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter("in" + std::to_string(i), inputs[i]));
  ad::Var out = build(vars);
  Rng rng(99);
  ad::Var weights = tape.constant(random_tensor(out.value().shape(), rng));
  ad::Var loss = ad::sum(ad::mul(out, weights));
  if (grads) *grads = tape.backward(loss);
  return loss.value().item();
}

inline OpCheck check_op(const Builder& build, const std::vector<Tensor>& inputs) {
  ad::Gradients grads;
  probe(build, inputs, &grads);
  std::vector<Tensor> analytic;
  OpCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    analytic.push_back(grads.at("in" + std::to_string(i)));
    out.coordinates_total += inputs[i].size();
  }
  const auto r = grad_check([&](std::span<const Tensor> p) { return probe(build, p, nullptr); }, inputs, analytic,
                            1e-5);
  out.max_relative_error = r.max_relative_error;
  out.coordinates_checked = r.coordinates_checked;
  return out;
}

inline ad::Segments segments_of(std::vector<std::size_t> lengths) {
  ad::Segments s;
  s.offsets.push_back(0);
  for (auto l : lengths) s.offsets.push_back(s.offsets.back() + l);
  return s;
}

inline std::map<std::string, OpCheck> primitive_checks(std::uint64_t seed = 2024) {
  Rng rng(seed);
  const auto seg = segments_of({3, 1, 4});
  const std::vector<std::uint32_t> ids = {0, 2, 2, 4, 1, 3};
  std::map<std::string, OpCheck> out;

  out["matmul"] = check_op([](auto& v) { return ad::matmul(v[0], v[1]); },
                           {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)});
  out["add"] = check_op([](auto& v) { return ad::add(v[0], v[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  out["sub"] = check_op([](auto& v) { return ad::sub(v[0], v[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  out["mul"] = check_op([](auto& v) { return ad::mul(v[0], v[1]); },
                        {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)});
  out["scale"] = check_op([](auto& v) { return ad::scale(v[0], -1.7); }, {random_tensor({3, 4}, rng)});
  out["add_row"] = check_op([](auto& v) { return ad::add_row(v[0], v[1]); },
                            {random_tensor({5, 4}, rng), random_tensor({4}, rng)});
  out["sigmoid"] = check_op([](auto& v) { return ad::sigmoid(v[0]); }, {random_tensor({4, 4}, rng, 2.0)});
  out["gelu"] = check_op([](auto& v) { return ad::gelu(v[0]); }, {random_tensor({4, 4}, rng, 2.0)});
  out["softmax_rows"] = check_op([](auto& v) { return ad::softmax_rows(v[0]); }, {random_tensor({3, 5}, rng)});
  out["layer_norm"] = check_op([](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); },
                               {random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  out["gather_rows"] = check_op([&](auto& v) { return ad::gather_rows(v[0], ids); }, {random_tensor({5, 3}, rng)});
  out["mean_pool"] = check_op([&](auto& v) { return ad::mean_pool(v[0], seg); }, {random_tensor({8, 4}, rng)});
  out["attention"] = check_op([&](auto& v) { return ad::attention(v[0], v[1], v[2], seg, 2); },
                              {random_tensor({8, 4}, rng), random_tensor({8, 4}, rng), random_tensor({8, 4}, rng)});
  out["sum"] = check_op([](auto& v) { return ad::sum(v[0]); }, {random_tensor({3, 3}, rng)});
  out["mean"] = check_op([](auto& v) { return ad::mean(v[0]); }, {random_tensor({3, 3}, rng)});

  Tensor targets({4, 3});
  for (auto& t : targets.values()) t = rng.uniform() < 0.5 ? 1.0 : 0.0;
  out["bce_with_logits"] =
      check_op([&](auto& v) { return ad::bce_with_logits(v[0], targets); }, {random_tensor({4, 3}, rng, 2.0)});
  ad::BceOptions weighted;
  weighted.row_weights = std::vector<double>{0.5, 1.5, 1.0, 1.0};
  weighted.columns = {0, 2};
  out["bce_with_logits/weighted"] =
      check_op([&](auto& v) { return ad::bce_with_logits(v[0], targets, weighted); }, {random_tensor({4, 3}, rng)});

  Tensor soft({4, 3});
  for (auto& t : soft.values()) t = rng.uniform();
  Tensor probs({4, 3});
  for (auto& p : probs.values()) p = 0.05 + 0.9 * rng.uniform();
  out["soft_bce"] = check_op([&](auto& v) { return ad::soft_bce(v[0], soft); }, {probs});
  return out;
}

}  // namespace steu::test
