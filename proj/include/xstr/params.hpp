// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "xstr/errors.hpp"
#include "xstr/rng.hpp"
#include "xstr/tensor.hpp"

namespace xstr {

/// Named trainable tensors with paired gradients. Names live under exactly one
/// of the `enc.` / `dec.` namespaces; iteration is in name order.
template <class T>
class BasicParamSet {
 public:
  using Tensor = BasicTensor<T>;
  // Gradients are accumulators: a tape may add into them through a const set.
  struct Entry {
    Tensor value;
    mutable Tensor grad;
  };

  static bool valid_name(std::string_view name) {
    return (name.starts_with("enc.") || name.starts_with("dec.")) && name.size() > 4;
  }

  Entry& add(const std::string& name, Tensor value) {
    require(valid_name(name), ErrorCode::ShapeMismatch, "parameter name outside enc./dec.: " + name);
    require(!entries_.contains(name), ErrorCode::ShapeMismatch, "duplicate parameter " + name);
    Tensor grad(value.shape(), T(0));
    auto [it, _] = entries_.emplace(name, Entry{std::move(value), std::move(grad)});
    return it->second;
  }

  /// Uniform in +-sqrt(1/fan_in), seeded by (seed, name) so the draw does not
  /// depend on construction order.
  Entry& add_uniform(const std::string& name, Shape shape, std::size_t fan_in, std::uint64_t seed, double gain = 1.0) {
    Tensor t(std::move(shape));
    Rng rng(derive_seed(seed, name));
    const double bound = gain * std::sqrt(1.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return add(name, std::move(t));
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    require(it != entries_.end(), ErrorCode::ShapeMismatch, "missing parameter " + name);
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    require(it != entries_.end(), ErrorCode::ShapeMismatch, "missing parameter " + name);
    return it->second;
  }

  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names(std::string_view prefix = {}) const {
    std::vector<std::string> out;
    for (const auto& [name, _] : entries_)
      if (name.starts_with(prefix)) out.push_back(name);
    return out;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.numel();
    return n;
  }

  void zero_grad() const {
    for (auto& [_, e] : entries_) e.grad.fill(T(0));
  }

  /// Entries under `prefix` only (gradients reset).
  BasicParamSet subset(std::string_view prefix) const {
    BasicParamSet out;
    for (const auto& [name, e] : entries_)
      if (name.starts_with(prefix)) out.add(name, e.value);
    return out;
  }

  template <class U>
  BasicParamSet<U> cast() const {
    BasicParamSet<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>());
    return out;
  }

  /// Bitwise equality of names and values (gradients ignored).
  bool bit_equal(const BasicParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b)
      if (a->first != b->first || !a->second.value.bit_equal(b->second.value)) return false;
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;
};

using ParamSet = BasicParamSet<float>;

/// Plain SGD: value -= lr * grad for every entry, then gradients are zeroed.
/// Parameters are left untouched when any updated value would be non-finite.
template <class T>
void sgd_step(BasicParamSet<T>& params, T lr) {
  for (const auto& [name, e] : params) {
    const T* v = e.value.data();
    const T* g = e.grad.data();
    for (std::size_t i = 0; i < e.value.numel(); ++i)
      require(std::isfinite(v[i] - lr * g[i]), ErrorCode::NumericalError, "non-finite update in " + name);
  }
  for (auto& [name, e] : params) {
    T* v = e.value.data();
    const T* g = e.grad.data();
    for (std::size_t i = 0; i < e.value.numel(); ++i) v[i] -= lr * g[i];
  }
  params.zero_grad();
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling. `max_norm <= 0` leaves gradients alone.
template <class T>
double clip_grad_norm(BasicParamSet<T>& params, double max_norm) {
  double sq = 0;
  for (const auto& [_, e] : params)
    for (std::size_t i = 0; i < e.grad.numel(); ++i) sq += static_cast<double>(e.grad[i]) * e.grad[i];
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, e] : params)
      for (std::size_t i = 0; i < e.grad.numel(); ++i) e.grad[i] *= s;
  }
  return norm;
}

}  // namespace xstr
