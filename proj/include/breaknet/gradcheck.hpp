#pragma once

#include <functional>
#include <string>
#include <vector>

#include "breaknet/tensor.hpp"

namespace breaknet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_input;  // max error for each checked tensor
  std::size_t worst_input = 0;
  std::int64_t worst_index = -1;
};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, perturbing every element of every tensor in `inputs`.
///
/// The error per element is |analytic - numeric| / max(1, |numeric|).
/// `f` must be deterministic and rebuild its graph from `inputs` on each call.
/// Throws NumericError if `f` returns a non-finite value.
GradCheckResult grad_check(const std::function<Tensord()>& f, std::vector<Tensord> inputs, double eps = 1e-4);

}  // namespace breaknet
