#include "afd/layers.hpp"

#include <cmath>

#include "afd/ops.hpp"

namespace afd {

Tensor normal_param(Rng& rng, const Shape& shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(shape, std::move(v), true);
}

Tensor constant_param(const Shape& shape, double value) { return Tensor::full(shape, value, true); }

Conv2d Conv2d::init(Rng& rng, std::size_t in, std::size_t out, std::size_t k, int stride, int padding,
                    double stddev) {
  if (stddev < 0) stddev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  return {normal_param(rng, {out, in, k, k}, stddev), constant_param({out}, 0.0), stride, padding};
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Linear Linear::init(Rng& rng, std::size_t in, std::size_t out, double stddev) {
  if (stddev < 0) stddev = std::sqrt(2.0 / static_cast<double>(in));
  return {normal_param(rng, {in, out}, stddev), constant_param({out}, 0.0)};
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

}  // namespace afd
