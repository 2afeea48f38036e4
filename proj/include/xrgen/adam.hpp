#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/params.hpp"

namespace xrgen {

struct AdamConfig {
  double alpha = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  explicit AdamState(AdamConfig c = {}) : config(c) {}
};

/// One bias-corrected Adam update over every trainable parameter, then zeroes
/// the gradients. Frozen tensors (requires_grad == false) are skipped.
inline void adam_step(ModelParams& params, AdamState& state) {
  for (auto& [name, p] : params) {
    if (p.requires_grad() && !p.has_grad()) {
      throw UsageError("adam_step: parameter '" + name + "' has no gradient");
    }
  }
  state.t += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.size()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    auto w = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= c.alpha * mhat / (std::sqrt(vhat) + c.eps);
    }
    p.zero_grad();
  }
}

}  // namespace xrgen
