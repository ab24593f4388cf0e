#pragma once

#include <functional>
#include <span>
#include <vector>

#include "steu/tensor.hpp"

namespace steu {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

/// Scalar objective over a list of parameter tensors.
using Objective = std::function<double(std::span<const Tensor>)>;

/// Compares `analytic` against central differences of `f` on a deterministic
/// sample of at least `min_coordinates` entries drawn from every tensor (all
/// entries when there are fewer). Relative error is |g_a - g_fd| / max(1, |g_fd|).
GradCheckResult grad_check(const Objective& f, std::span<const Tensor> params,
                           std::span<const Tensor> analytic, double eps,
                           std::size_t min_coordinates = 200);

}  // namespace steu
