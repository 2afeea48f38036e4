#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "xrgen/error.hpp"
#include "xrgen/rng.hpp"
#include "xrgen/tensor.hpp"

namespace xrgen {

/// Ordered collection of named parameter tensors. Iteration order is
/// insertion order, which fixes checkpoint layout and optimizer traversal.
class ModelParams {
 public:
  using Entry = std::pair<std::string, Tensor>;

  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("missing parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor& at(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ModelParams&>(*this).at(name));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  /// Allocates zeroed gradients on every trainable tensor.
  void zero_grad() {
    for (auto& [_, t] : entries_) {
      if (t.requires_grad()) t.zero_grad();
    }
  }

  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, t] : entries_) {
      if (name.rfind(prefix, 0) == 0) t.set_requires_grad(on);
    }
  }

  /// Deep copy (fresh storage for every tensor).
  ModelParams clone() const {
    ModelParams out;
    for (const auto& [name, t] : entries_) out.add(name, t.clone());
    return out;
  }

  /// Adds every entry of `other` (names must not collide).
  void merge(const ModelParams& other) {
    for (const auto& [name, t] : other) add(name, t);
  }

  /// Entries whose names start with `prefix`, sharing storage.
  ModelParams subset(const std::string& prefix) const {
    ModelParams out;
    for (const auto& [name, t] : entries_) {
      if (name.rfind(prefix, 0) == 0) out.add(name, t);
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform(-a, a) initialized tensor.
inline Tensor uniform_tensor(Shape shape, double a, Rng& rng, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& x : t.mutable_data()) x = rng.uniform(-a, a);
  return t;
}

}  // namespace xrgen
