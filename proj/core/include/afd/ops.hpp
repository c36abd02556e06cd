#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "afd/box.hpp"
#include "afd/tensor.hpp"

namespace afd::ops {

// --- convolution / linear algebra --------------------------------------

/// 2-D cross-correlation over NCHW input with OIHW kernel.
/// Uses im2col + GEMM; agrees with conv2d_direct to within 1e-12.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding);

/// Same contract as conv2d, computed with the direct nested-loop formulation.
Tensor conv2d_direct(const Tensor& input, const Tensor& kernel, int stride, int padding);

Tensor matmul(const Tensor& a, const Tensor& b);

/// x[N,in] * weight[in,out] + bias[out]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// --- elementwise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

/// x * s where s is a scalar tensor (gradient flows to both).
Tensor scale(const Tensor& x, const Tensor& s);
/// x * c for a constant c.
Tensor scale(const Tensor& x, double c);

// --- structural ------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape);
/// [R, C] -> [C, R]
Tensor transpose2d(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// Concatenation of w_k * x_k along `axis`, each weight a scalar tensor.
Tensor weighted_concat(std::span<const std::pair<Tensor, Tensor>> parts, std::size_t axis);

/// Rows of a [R, ...] tensor picked by index (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Mean over consecutive groups of `group` rows: [G*group, D] -> [G, D].
Tensor group_mean_rows(const Tensor& x, std::size_t group);

/// Scalar tensor broadcast to `shape`.
Tensor expand_scalar(const Tensor& s, const Shape& shape);

/// [N, C, H, W] -> [N, C]
Tensor global_avg_pool(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// --- pooling ---------------------------------------------------------------

/// RoIAlign over a [C, H, W] (or [1, C, H, W]) feature map. Boxes are in image
/// pixels and mapped to feature coordinates by dividing by `stride`. Each of
/// the pool x pool output cells averages `sampling` x `sampling` bilinear
/// samples. Returns [n, C, pool, pool].
Tensor roi_align(const Tensor& features, std::span<const Box> boxes, int pool, double stride,
                 int sampling = 2);

// --- losses ----------------------------------------------------------------

/// Mean softmax cross-entropy of logits [R, C] against integer targets.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

/// Mean binary cross-entropy with logits [R] (any shape, flattened).
Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets);

/// Sum over all elements of the smooth-L1 distance to constant targets.
Tensor smooth_l1(const Tensor& pred, std::span<const double> targets, double beta);

}  // namespace afd::ops
