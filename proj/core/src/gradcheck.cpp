#include "afd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

namespace afd {

namespace {

double eval_no_grad(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const Tensor y = f();
  if (y.numel() != 1) throw ShapeError("finite_diff_check: f must return a scalar, got " + shape_str(y.shape()));
  return y.item();
}

struct Probed {
  double value;
  std::uint64_t branches;
};

Probed eval_probed(const std::function<Tensor()>& f) {
  BranchProbe probe;
  const double v = eval_no_grad(f);
  return {v, probe.digest()};
}

struct Difference {
  double numeric;
  bool kinked;
};

Difference central_difference(const std::function<Tensor()>& f, std::span<double> values, std::size_t i, double eps,
                              std::uint64_t base_branches) {
  const double saved = values[i];
  values[i] = saved + eps;
  const Probed up = eval_probed(f);
  values[i] = saved - eps;
  const Probed down = eval_probed(f);
  values[i] = saved;
  return {(up.value - down.value) / (2.0 * eps), up.branches != base_branches || down.branches != base_branches};
}

double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, Tensor x, const GradCheckOptions& opts) {
  return finite_diff_check(f, std::vector<Tensor>{std::move(x)}, opts);
}

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> xs,
                                  const GradCheckOptions& opts) {
  if (!(opts.eps > 0.0 && opts.eps <= 1e-2)) throw std::invalid_argument("finite_diff_check: eps must lie in (0, 1e-2]");
  if (xs.empty()) throw std::invalid_argument("finite_diff_check: no tensors to check");
  if (opts.kink_refinements < 0) throw std::invalid_argument("finite_diff_check: kink_refinements must be >= 0");

  const Probed base = eval_probed(f);
  const Probed again = eval_probed(f);
  if (base.value != again.value || base.branches != again.branches) {
    throw std::runtime_error("finite_diff_check: f is not deterministic");
  }

  std::vector<bool> prior_flags;
  for (auto& x : xs) {
    prior_flags.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.clear_grad();
  }
  Tape::current().reset();
  const Tensor loss = f();
  backward(loss);
  Tape::current().reset();

  std::vector<std::vector<double>> analytic;
  for (auto& x : xs) {
    analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                       : std::vector<double>(x.numel(), 0.0));
    x.clear_grad();
  }

  GradCheckResult result;
  std::size_t flat_offset = 0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    auto values = xs[t].mutable_values();
    const std::size_t n = values.size();
    const std::size_t count = opts.max_coords == 0 ? n : std::min(n, opts.max_coords);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = count == n ? k : (k * n) / count + (n / count) / 2;
      const double a = analytic[t][i];
      Difference d = central_difference(f, values, i, opts.eps, base.branches);
      const double nominal = relative_error(a, d.numeric, opts.abs_floor);
      result.nominal_max_rel_error = std::max(result.nominal_max_rel_error, nominal);
      if (d.kinked) {
        ++result.kinks;
        double eps = opts.eps;
        for (int r = 0; r < opts.kink_refinements && d.kinked; ++r) {
          eps /= 10.0;
          d = central_difference(f, values, i, eps, base.branches);
        }
        if (d.kinked) ++result.kinks_unresolved;
      }
      const double rel = relative_error(a, d.numeric, opts.abs_floor);
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.coords_checked == 1) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_coord = flat_offset + i;
        result.worst_analytic = a;
        result.worst_numeric = d.numeric;
      }
    }
    flat_offset += n;
  }
  for (std::size_t t = 0; t < xs.size(); ++t) xs[t].set_requires_grad(prior_flags[t]);
  return result;
}

}  // namespace afd
