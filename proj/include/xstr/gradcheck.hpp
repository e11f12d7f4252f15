// SPDX-License-Identifier: Apache-2.0
//
// Central-difference oracle for tape gradients. Intended to run on the double
// instantiation of the numerics so that rounding noise stays far below the
// tolerances it is asked to confirm.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "xstr/autograd.hpp"
#include "xstr/rng.hpp"

namespace xstr {

template <class T>
using LossFn = std::function<BasicVar<T>(BasicTape<T>&, BasicParamSet<T>&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

/// Compares the analytic gradient of `loss` with central differences on up to
/// `max_coords` seeded coordinates per tensor. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <class T>
GradCheckResult finite_diff_report(const LossFn<T>& loss, BasicParamSet<T>& params, double eps = 1e-3,
                                   std::uint64_t seed = 0, std::size_t max_coords = 64) {
  params.zero_grad();
  {
    BasicTape<T> tape;
    tape.backward(loss(tape, params));
  }
  auto eval = [&]() {
    BasicTape<T> tape(false);
    return static_cast<double>(loss(tape, params).value()[0]);
  };

  GradCheckResult result;
  for (auto& [name, entry] : params) {
    const BasicTensor<T> analytic = entry.grad;
    std::vector<std::size_t> coords;
    if (entry.value.numel() <= max_coords) {
      coords.resize(entry.value.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      Rng rng(derive_seed(seed, name));
      coords = rng.permutation(entry.value.numel());
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const T saved = entry.value[i];
      entry.value[i] = static_cast<T>(saved + eps);
      const double up = eval();
      entry.value[i] = static_cast<T>(saved - eps);
      const double down = eval();
      entry.value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i]);
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++result.coords_checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = name;
        result.worst_index = i;
      }
    }
  }
  params.zero_grad();
  return result;
}

template <class T>
double finite_diff_check(const LossFn<T>& loss, BasicParamSet<T>& params, double eps = 1e-3,
                         std::uint64_t seed = 0) {
  return finite_diff_report(loss, params, eps, seed).max_rel_error;
}

}  // namespace xstr
