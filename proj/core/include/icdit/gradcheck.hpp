#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "icdit/tensor.hpp"

namespace icdit {

/// Max over checked components of |analytic - central| / (|central| + 1e-12).
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t components = 0;
};

/// Compares the tape gradient of the scalar f(x) with central differences.
/// eps must lie in [1e-7, 1e-3]. Resets the current thread's tape and
/// leaves x's gradient cleared.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-5);

/// Same check against several leaves at once. f closes over them. With
/// fraction < 1 a seeded uniform subset of all components is probed
/// (at least one).
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double eps = 1e-5,
                           double fraction = 1.0, std::uint64_t seed = 0);

}  // namespace icdit
