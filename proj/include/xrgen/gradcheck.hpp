#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "xrgen/error.hpp"
#include "xrgen/params.hpp"
#include "xrgen/rng.hpp"

namespace xrgen {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

/// Compares reverse-mode gradients with central differences on trainable
/// parameters. Checks every coordinate of tensors up to `max_coords_per_tensor`
/// values, otherwise a seeded random sample of that many.
inline GradCheckResult finite_diff_check(ModelParams& params, const std::function<Tensor()>& loss_fn,
                                         double eps, std::size_t max_coords_per_tensor = 64,
                                         std::uint64_t seed = 0) {
  if (!(eps > 0.0)) throw UsageError("finite_diff_check: eps must be positive");
  auto eval = [&]() {
    NoGradGuard ng;
    const double v = loss_fn().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
  };

  GradCheckResult res;
  if (params.empty()) return res;

  params.zero_grad();
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
  if (loss.recorded()) backward(loss);

  Rng rng(seed);
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    std::vector<std::size_t> coords(p.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(max_coords_per_tensor);
    }
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i : coords) {
      double& w = p.mutable_data()[i];
      const double saved = w;
      w = saved + eps;
      const double fp = eval();
      w = saved - eps;
      const double fm = eval();
      w = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = name;
        res.worst_index = i;
      }
    }
  }
  params.zero_grad();
  return res;
}

}  // namespace xrgen
