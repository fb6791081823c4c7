// Named learnable tensors, weight initialization, and the Adam optimizer.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vstain/autodiff.hpp"
#include "vstain/error.hpp"
#include "vstain/tensor.hpp"

namespace vstain {

/// Samples N(0, std^2) truncated to [-2 std, 2 std] by rejection.
template <class T>
Tensor<T> truncated_normal_init(const Shape& shape, double std_dev, std::mt19937_64& rng) {
  Tensor<T> out(shape);
  std::normal_distribution<double> normal(0.0, std_dev);
  const double bound = 2.0 * std_dev;
  for (auto& v : out.data()) {
    double s;
    do {
      s = normal(rng);
    } while (std::abs(s) > bound);
    v = static_cast<T>(s);
  }
  return out;
}

/// Ordered collection of named parameters. Order is insertion order and is
/// the order used for checkpoints and hashing.
template <class T>
class ParameterStore {
 public:
  Var<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, Var<T>(std::move(value), true));
    return entries_.back().second;
  }

  Var<T>& operator[](const std::string& name) { return entries_.at(lookup(name)).second; }
  const Var<T>& operator[](const std::string& name) const { return entries_.at(lookup(name)).second; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t count_scalars() const {
    std::size_t total = 0;
    for (const auto& [name, var] : entries_) total += var.size();
    return total;
  }

  void zero_grad() {
    for (auto& [name, var] : entries_) var.zero_grad();
  }

  /// Frozen parameters receive no gradients.
  void set_trainable(bool on) {
    for (auto& [name, var] : entries_) var.set_requires_grad(on);
  }

  /// FNV-1a over names, shapes, and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t len) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < len; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& [name, var] : entries_) {
      mix(name.data(), name.size());
      for (auto d : var.shape()) mix(&d, sizeof d);
      mix(var.value().data().data(), var.size() * sizeof(T));
    }
    return h;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;

  void reset() {
    step = 0;
    m.clear();
    v.clear();
  }
};

/// One bias-corrected Adam update of every parameter that holds a gradient.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws NumericError (leaving parameters untouched) on a non-finite gradient.
template <class T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state) {
  for (const auto& [name, var] : params) {
    if (var.has_grad() && !var.grad().all_finite()) throw NumericError("non-finite gradient in parameter " + name);
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& [name, var] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.shape() != var.shape()) m = Tensor<T>(var.shape());
    if (v.shape() != var.shape()) v = Tensor<T>(var.shape());
    auto values = var.mutable_value().data();
    const bool has = var.has_grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has ? static_cast<double>(var.grad()[i]) : 0.0;
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1;
      const double vhat = vi / c2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) - state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
    }
  }
}

}  // namespace vstain
