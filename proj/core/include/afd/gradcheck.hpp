#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "afd/tensor.hpp"

namespace afd {

struct GradCheckOptions {
  double eps = 1e-5;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
  double abs_floor = 1e-6;
  // Check at most this many coordinates per tensor (evenly spread). 0 = all.
  std::size_t max_coords = 0;
  // When x +/- eps lands on a different piece of a piecewise op than x,
  // the central difference is not a derivative estimate. Such coordinates are
  // re-measured with eps divided by 10, up to this many times.
  int kink_refinements = 3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Worst error using the nominal eps everywhere, kinks included.
  double nominal_max_rel_error = 0.0;
  // Coordinates whose nominal stencil crossed a kink.
  std::size_t kinks = 0;
  // Kinked coordinates still crossing one at the smallest eps tried.
  // Their error at that eps still counts toward max_rel_error.
  std::size_t kinks_unresolved = 0;
};

/// Compares backward() gradients of the scalar `f()` with respect to `x`
/// against central differences (f(x+eps) - f(x-eps)) / (2 eps).
/// Kinked coordinates are re-measured with a smaller eps; see GradCheckOptions.
///
/// `f` is rebuilt from scratch on every call; it must read `x` through the
/// shared tensor storage. Throws if two evaluations at the same point differ.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& opts = {});

/// Same check over several tensors at once, sharing one analytic pass.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> xs,
                                  const GradCheckOptions& opts = {});

}  // namespace afd
