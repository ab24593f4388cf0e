#include "steu/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "steu/error.hpp"

namespace steu {

GradCheckResult grad_check(const Objective& f, std::span<const Tensor> params,
                           std::span<const Tensor> analytic, double eps,
                           std::size_t min_coordinates) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
  if (eps > 1e-2) throw Error("grad_check: eps must not exceed 1e-2");
  if (params.size() != analytic.size()) {
    throw Error("grad_check: parameter and gradient lists differ in length");
  }
  std::size_t total = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].shape() != analytic[t].shape()) {
      throw Error("grad_check: gradient shape differs for tensor " + std::to_string(t));
    }
    total += params[t].size();
  }

  std::vector<Tensor> work(params.begin(), params.end());
  GradCheckResult result;
  const std::size_t per_tensor_floor =
      params.empty() ? 0 : (min_coordinates + params.size() - 1) / params.size();

  for (std::size_t t = 0; t < work.size(); ++t) {
    const std::size_t n = work[t].size();
    if (n == 0) continue;
    const std::size_t proportional =
        (min_coordinates * n + total - 1) / std::max<std::size_t>(total, 1);
    const std::size_t quota = std::min(n, std::max(per_tensor_floor, proportional));
    for (std::size_t j = 0; j < quota; ++j) {
      const std::size_t idx = j * n / quota;
      const double saved = work[t][idx];
      work[t][idx] = saved + eps;
      const double up = f(work);
      work[t][idx] = saved - eps;
      const double down = f(work);
      work[t][idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw Error("grad_check: objective non-finite at perturbed point (tensor " +
                    std::to_string(t) + ", index " + std::to_string(idx) + ")");
      }
      const double fd = (up - down) / (2.0 * eps);
      const double rel = std::abs(analytic[t][idx] - fd) / std::max(1.0, std::abs(fd));
      ++result.coordinates_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_tensor = t;
        result.worst_index = idx;
      }
    }
  }
  return result;
}

}  // namespace steu
