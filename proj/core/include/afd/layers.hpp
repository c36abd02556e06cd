#pragma once

#include <string>
#include <vector>

#include "afd/archive.hpp"
#include "afd/rng.hpp"
#include "afd/tensor.hpp"

namespace afd {

/// Named parameters; each entry aliases the live parameter storage.
using ParamList = std::vector<NamedTensor>;

/// Gaussian-initialized parameter tensor with requires_grad set.
Tensor normal_param(Rng& rng, const Shape& shape, double stddev);
Tensor constant_param(const Shape& shape, double value);

struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  int stride = 1;
  int padding = 0;

  /// He-normal weights unless `stddev` is given; zero bias.
  static Conv2d init(Rng& rng, std::size_t in, std::size_t out, std::size_t k, int stride, int padding,
                     double stddev = -1.0);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  Shape layer_shape() const { return weight.shape(); }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(Rng& rng, std::size_t in, std::size_t out, double stddev = -1.0);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out) const;
  Shape layer_shape() const { return weight.shape(); }
};

}  // namespace afd
