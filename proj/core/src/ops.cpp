#include "afd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace afd::ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

bool wants_grad(const TensorImpl& t) { return t.requires_grad && !t.grad.empty(); }

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current().grad_enabled()) return false;
  for (auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void record(std::vector<ImplPtr> inputs, Tensor& out, std::function<void()> rule) {
  out.set_requires_grad(true);
  Tape::current().record({std::move(inputs), out.impl(), std::move(rule)});
}

Tensor finish(const Shape& shape, std::vector<double> values, const char* op) {
  auto out = Tensor::from(shape, std::move(values));
  check_finite(out, op);
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

void require_scalar(const Tensor& t, const char* op) {
  if (t.numel() != 1) throw ShapeError(std::string(op) + ": expected scalar, got " + shape_str(t.shape()));
}

// Row-major GEMM kernels. All accumulate into C.

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* __restrict c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[i * K + k];
      if (a == 0.0) continue;
      const double* __restrict b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C[M,N] += A^T * B with A stored [K,M], B stored [K,N]
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const double* __restrict b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double a = A[k * M + i];
      if (a == 0.0) continue;
      double* __restrict c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

void transpose_into(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[M,N] += A[M,K] * B^T with B stored [N,K]
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B, double* C,
             std::vector<double>& scratch) {
  scratch.resize(N * K);
  transpose_into(N, K, B, scratch.data());
  gemm_nn(M, N, K, A, scratch.data(), C);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, oh, ow;
  int stride, pad;
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, int stride, int padding, const char* op) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw ShapeError(std::string(op) + ": expected NCHW input and OIHW kernel, got input " +
                     shape_str(input.shape()) + " and kernel " + shape_str(kernel.shape()));
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument(std::string(op) + ": stride must be >= 1, padding >= 0");
  ConvGeometry g{};
  g.n = input.dim(0), g.c = input.dim(1), g.h = input.dim(2), g.w = input.dim(3);
  g.o = kernel.dim(0), g.kh = kernel.dim(2), g.kw = kernel.dim(3);
  g.stride = stride, g.pad = padding;
  if (kernel.dim(1) != g.c || g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError(std::string(op) + ": input " + shape_str(input.shape()) + " incompatible with kernel " +
                     shape_str(kernel.shape()) + " at padding " + std::to_string(padding));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

// cols[(c*kh + i)*kw + j, oy*ow + ox] = x[c, oy*s - p + i, ox*s - p + j]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(i);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(j);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 && ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

void col2im(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(i);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(j);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

Tensor conv2d_impl(const Tensor& input, const Tensor& kernel, const Tensor* bias, int stride, int padding) {
  const auto g = conv_geometry(input, kernel, stride, padding, "conv2d");
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.o)) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match kernel " +
                     shape_str(kernel.shape()));
  }
  const std::size_t ckk = g.c * g.kh * g.kw, plane = g.oh * g.ow;
  const std::size_t in_sz = g.c * g.h * g.w, out_sz = g.o * plane;
  std::vector<double> out(g.n * out_sz, 0.0);
  std::vector<double> cols(ckk * plane);
  const double* x = input.values().data();
  const double* w = kernel.values().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, x + n * in_sz, cols.data());
    double* y = out.data() + n * out_sz;
    if (bias) {
      for (std::size_t o = 0; o < g.o; ++o) std::fill_n(y + o * plane, plane, bias->values()[o]);
    }
    gemm_nn(g.o, plane, ckk, w, cols.data(), y);
  }
  auto result = finish({g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d");

  if (recording({&input, &kernel, bias})) {
    ImplPtr xi = input.impl(), wi = kernel.impl(), bi = bias ? bias->impl() : nullptr, yi = result.impl();
    std::vector<ImplPtr> ins{xi, wi};
    if (bi) ins.push_back(bi);
    record(std::move(ins), result, [g, xi, wi, bi, yi, ckk, plane, in_sz, out_sz] {
      std::vector<double> cols(ckk * plane), dcols(ckk * plane), scratch;
      for (std::size_t n = 0; n < g.n; ++n) {
        const double* dy = yi->grad.data() + n * out_sz;
        if (wants_grad(*wi)) {
          im2col(g, xi->values.data() + n * in_sz, cols.data());
          gemm_nt(g.o, ckk, plane, dy, cols.data(), wi->grad.data(), scratch);
        }
        if (bi && wants_grad(*bi)) {
          for (std::size_t o = 0; o < g.o; ++o) {
            double s = 0.0;
            for (std::size_t p = 0; p < plane; ++p) s += dy[o * plane + p];
            bi->grad[o] += s;
          }
        }
        if (wants_grad(*xi)) {
          std::fill(dcols.begin(), dcols.end(), 0.0);
          gemm_tn(ckk, plane, g.o, wi->values.data(), dy, dcols.data());
          col2im(g, dcols.data(), xi->grad.data() + n * in_sz);
        }
      }
    });
  }
  return result;
}

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op, int kind) {
  require_same_shape(a, b, op);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = kind == 0 ? av[i] + bv[i] : kind == 1 ? av[i] - bv[i] : av[i] * bv[i];
  }
  auto result = finish(a.shape(), std::move(out), op);
  if (recording({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = result.impl();
    record({ai, bi}, result, [ai, bi, yi, kind] {
      const auto& dy = yi->grad;
      if (wants_grad(*ai)) {
        for (std::size_t i = 0; i < dy.size(); ++i) ai->grad[i] += kind == 2 ? dy[i] * bi->values[i] : dy[i];
      }
      if (wants_grad(*bi)) {
        for (std::size_t i = 0; i < dy.size(); ++i) {
          bi->grad[i] += kind == 0 ? dy[i] : kind == 1 ? -dy[i] : dy[i] * ai->values[i];
        }
      }
    });
  }
  return result;
}

// Decomposes a shape around `axis` into (outer, axis extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

double bilinear_weights(double y, double x, std::size_t height, std::size_t width, std::array<std::size_t, 4>& idx,
                        std::array<double, 4>& wts) {
  // Returns 0 if the point lies outside the map (no contribution).
  const double h = static_cast<double>(height), w = static_cast<double>(width);
  if (y < -1.0 || y > h || x < -1.0 || x > w) {
    wts = {0, 0, 0, 0};
    idx = {0, 0, 0, 0};
    return 0.0;
  }
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  std::size_t y_low = static_cast<std::size_t>(y), x_low = static_cast<std::size_t>(x);
  std::size_t y_high, x_high;
  if (y_low >= height - 1) {
    y_high = y_low = height - 1;
    y = static_cast<double>(y_low);
  } else {
    y_high = y_low + 1;
  }
  if (x_low >= width - 1) {
    x_high = x_low = width - 1;
    x = static_cast<double>(x_low);
  } else {
    x_high = x_low + 1;
  }
  const double ly = y - static_cast<double>(y_low), lx = x - static_cast<double>(x_low);
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  idx = {y_low * width + x_low, y_low * width + x_high, y_high * width + x_low, y_high * width + x_high};
  wts = {hy * hx, hy * lx, ly * hx, ly * lx};
  return 1.0;
}

}  // namespace

// --- convolution / linear algebra ------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  return conv2d_impl(input, kernel, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  return conv2d_impl(input, kernel, &bias, stride, padding);
}

Tensor conv2d_direct(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  const auto g = conv_geometry(input, kernel, stride, padding, "conv2d_direct");
  const auto x = input.values(), w = kernel.values();
  std::vector<double> out(g.n * g.o * g.oh * g.ow, 0.0);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o)
      for (std::size_t oy = 0; oy < g.oh; ++oy)
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.c; ++c)
            for (std::size_t i = 0; i < g.kh; ++i) {
              const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(i);
              if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
              for (std::size_t j = 0; j < g.kw; ++j) {
                const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(j);
                if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                acc += x[((n * g.c + c) * g.h + iy) * g.w + ix] * w[((o * g.c + c) * g.kh + i) * g.kw + j];
              }
            }
          out[((n * g.o + o) * g.oh + oy) * g.ow + ox] = acc;
        }
  return finish({g.n, g.o, g.oh, g.ow}, std::move(out), "conv2d_direct");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(M * N, 0.0);
  gemm_nn(M, N, K, a.values().data(), b.values().data(), out.data());
  auto result = finish({M, N}, std::move(out), "matmul");
  if (recording({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), yi = result.impl();
    record({ai, bi}, result, [ai, bi, yi, M, N, K] {
      std::vector<double> scratch;
      if (wants_grad(*ai)) gemm_nt(M, K, N, yi->grad.data(), bi->values.data(), ai->grad.data(), scratch);
      if (wants_grad(*bi)) gemm_tn(K, N, M, ai->values.data(), yi->grad.data(), bi->grad.data());
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t M = x.dim(0), K = x.dim(1), N = weight.dim(1);
  if (weight.dim(0) != K || bias.rank() != 1 || bias.dim(0) != N) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) +
                     ", bias " + shape_str(bias.shape()));
  }
  std::vector<double> out(M * N);
  for (std::size_t i = 0; i < M; ++i) std::copy_n(bias.values().data(), N, out.data() + i * N);
  gemm_nn(M, N, K, x.values().data(), weight.values().data(), out.data());
  auto result = finish({M, N}, std::move(out), "linear");
  if (recording({&x, &weight, &bias})) {
    ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = result.impl();
    record({xi, wi, bi}, result, [xi, wi, bi, yi, M, N, K] {
      std::vector<double> scratch;
      if (wants_grad(*xi)) gemm_nt(M, K, N, yi->grad.data(), wi->values.data(), xi->grad.data(), scratch);
      if (wants_grad(*wi)) gemm_tn(K, N, M, xi->values.data(), yi->grad.data(), wi->grad.data());
      if (wants_grad(*bi)) {
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) bi->grad[j] += yi->grad[i * N + j];
      }
    });
  }
  return result;
}

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "mul", 2); }

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    BranchProbe::note(xv[i] > 0.0);
  }
  auto result = finish(x.shape(), std::move(out), "relu");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) {
        if (xi->values[i] > 0.0) xi->grad[i] += yi->grad[i];
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-xv[i])) : std::exp(xv[i]) / (1.0 + std::exp(xv[i]));
  }
  auto result = finish(x.shape(), std::move(out), "sigmoid");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) {
        const double s = yi->values[i];
        xi->grad[i] += yi->grad[i] * s * (1.0 - s);
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  const auto s = split_at(x.shape(), axis);
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = xv[base];
      for (std::size_t k = 1; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        out[base + k * s.inner] = std::exp(xv[base + k * s.inner] - mx);
        z += out[base + k * s.inner];
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
    }
  auto result = finish(x.shape(), std::move(out), "softmax");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi, s] {
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < s.extent; ++k) {
            dot += yi->grad[base + k * s.inner] * yi->values[base + k * s.inner];
          }
          for (std::size_t k = 0; k < s.extent; ++k) {
            const std::size_t i = base + k * s.inner;
            xi->grad[i] += yi->values[i] * (yi->grad[i] - dot);
          }
        }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, const Tensor& s) {
  require_scalar(s, "scale");
  const double c = s.item();
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  auto result = finish(x.shape(), std::move(out), "scale");
  if (recording({&x, &s})) {
    ImplPtr xi = x.impl(), si = s.impl(), yi = result.impl();
    record({xi, si}, result, [xi, si, yi] {
      const double c = si->values[0];
      if (wants_grad(*xi)) {
        for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i] * c;
      }
      if (wants_grad(*si)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < yi->grad.size(); ++i) acc += yi->grad[i] * xi->values[i];
        si->grad[0] += acc;
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  auto result = finish(x.shape(), std::move(out), "scale");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi, c] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i] * c;
    });
  }
  return result;
}

// --- structural ----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto result = Tensor::from(shape, std::vector<double>(x.values().begin(), x.values().end()));
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i];
    });
  }
  return result;
}

Tensor transpose2d(const Tensor& x) {
  require_rank(x, 2, "transpose2d");
  const std::size_t R = x.dim(0), C = x.dim(1);
  std::vector<double> out(R * C);
  transpose_into(R, C, x.values().data(), out.data());
  auto result = Tensor::from({C, R}, std::move(out));
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi, R, C] {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) xi->grad[r * C + c] += yi->grad[c * R + r];
    });
  }
  return result;
}

Tensor weighted_concat(std::span<const std::pair<Tensor, Tensor>> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("weighted_concat: empty parts list");
  const Shape& ref = parts.front().first.shape();
  if (axis >= ref.size()) throw ShapeError("weighted_concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& [t, w] : parts) {
    require_scalar(w, "weighted_concat");
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) {
      throw ShapeError("weighted_concat: part " + shape_str(s) + " incompatible with " + shape_str(ref) +
                       " along axis " + std::to_string(axis));
    }
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& [t, w] : parts) {
    const double c = w.item();
    const std::size_t ext = t.dim(axis), block = ext * split.inner;
    const auto tv = t.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t k = 0; k < block; ++k)
        out[o * split.extent * split.inner + offset * split.inner + k] = c * tv[o * block + k];
    offset += ext;
  }
  auto result = finish(out_shape, std::move(out), "weighted_concat");

  bool any = false;
  for (const auto& [t, w] : parts) any = any || recording({&t, &w});
  if (any) {
    std::vector<ImplPtr> ins;
    std::vector<std::pair<ImplPtr, ImplPtr>> pairs;
    for (const auto& [t, w] : parts) {
      ins.push_back(t.impl());
      ins.push_back(w.impl());
      pairs.emplace_back(t.impl(), w.impl());
    }
    ImplPtr yi = result.impl();
    record(std::move(ins), result, [pairs, yi, split, axis] {
      std::size_t offset = 0;
      for (const auto& [ti, wi] : pairs) {
        const std::size_t ext = ti->shape[axis], block = ext * split.inner;
        const double c = wi->values[0];
        double dw = 0.0;
        for (std::size_t o = 0; o < split.outer; ++o)
          for (std::size_t k = 0; k < block; ++k) {
            const double g = yi->grad[o * split.extent * split.inner + offset * split.inner + k];
            if (wants_grad(*ti)) ti->grad[o * block + k] += c * g;
            dw += g * ti->values[o * block + k];
          }
        if (wants_grad(*wi)) wi->grad[0] += dw;
        offset += ext;
      }
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty parts list");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: part " + shape_str(s) + " incompatible with " + shape_str(ref));
    total += s[axis];
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& t : parts) {
    const std::size_t block = t.dim(axis) * split.inner;
    const auto tv = t.values();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(tv.data() + o * block, block, out.data() + o * split.extent * split.inner + offset * split.inner);
    offset += t.dim(axis);
  }
  auto result = Tensor::from(out_shape, std::move(out));
  bool any = false;
  for (const auto& t : parts) any = any || recording({&t});
  if (any) {
    std::vector<ImplPtr> ins;
    for (const auto& t : parts) ins.push_back(t.impl());
    ImplPtr yi = result.impl();
    record(ins, result, [ins, yi, split, axis] {
      std::size_t offset = 0;
      for (const auto& ti : ins) {
        const std::size_t block = ti->shape[axis] * split.inner;
        if (wants_grad(*ti)) {
          for (std::size_t o = 0; o < split.outer; ++o)
            for (std::size_t k = 0; k < block; ++k)
              ti->grad[o * block + k] += yi->grad[o * split.extent * split.inner + offset * split.inner + k];
        }
        offset += ti->shape[axis];
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty row list");
  const std::size_t R = x.dim(0), row = x.numel() / R;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= R) throw std::out_of_range("gather_rows: row index " + std::to_string(rows[i]) + " >= " + std::to_string(R));
    std::copy_n(x.values().data() + rows[i] * row, row, out.data() + i * row);
  }
  auto result = Tensor::from(out_shape, std::move(out));
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    record({xi}, result, [xi, yi, idx, row] {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t k = 0; k < row; ++k) xi->grad[idx[i] * row + k] += yi->grad[i * row + k];
    });
  }
  return result;
}

Tensor group_mean_rows(const Tensor& x, std::size_t group) {
  if (group == 0 || x.rank() < 1 || x.dim(0) % group != 0) {
    throw ShapeError("group_mean_rows: " + shape_str(x.shape()) + " not divisible into groups of " +
                     std::to_string(group));
  }
  const std::size_t G = x.dim(0) / group, row = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = G;
  std::vector<double> out(G * row, 0.0);
  const auto xv = x.values();
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t k = 0; k < row; ++k) out[g * row + k] += xv[(g * group + r) * row + k];
    for (std::size_t k = 0; k < row; ++k) out[g * row + k] *= inv;
  }
  auto result = finish(out_shape, std::move(out), "group_mean_rows");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi, G, group, row, inv] {
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t r = 0; r < group; ++r)
          for (std::size_t k = 0; k < row; ++k) xi->grad[(g * group + r) * row + k] += inv * yi->grad[g * row + k];
    });
  }
  return result;
}

Tensor expand_scalar(const Tensor& s, const Shape& shape) {
  require_scalar(s, "expand_scalar");
  auto result = Tensor::full(shape, s.item());
  if (recording({&s})) {
    ImplPtr si = s.impl(), yi = result.impl();
    record({si}, result, [si, yi] {
      double acc = 0.0;
      for (double g : yi->grad) acc += g;
      si->grad[0] += acc;
    });
  }
  return result;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(plane);
  std::vector<double> out(N * C);
  const auto xv = x.values();
  for (std::size_t i = 0; i < N * C; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[i * plane + p];
    out[i] = s * inv;
  }
  auto result = finish({N, C}, std::move(out), "global_avg_pool");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi, plane, inv] {
      for (std::size_t i = 0; i < yi->grad.size(); ++i)
        for (std::size_t p = 0; p < plane; ++p) xi->grad[i * plane + p] += yi->grad[i] * inv;
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  auto result = finish({1}, {s}, "sum");
  if (recording({&x})) {
    ImplPtr xi = x.impl(), yi = result.impl();
    record({xi}, result, [xi, yi] {
      for (auto& g : xi->grad) g += yi->grad[0];
    });
  }
  return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// --- pooling ---------------------------------------------------------------------

Tensor roi_align(const Tensor& features, std::span<const Box> boxes, int pool, double stride, int sampling) {
  if (pool < 1 || sampling < 1) throw std::invalid_argument("roi_align: pool and sampling must be >= 1");
  if (!(stride > 0.0)) throw std::invalid_argument("roi_align: stride must be positive");
  Shape fs = features.shape();
  if (fs.size() == 4 && fs[0] == 1) fs.erase(fs.begin());
  if (fs.size() != 3) throw ShapeError("roi_align: expected [C,H,W] features, got " + shape_str(features.shape()));
  if (boxes.empty()) throw std::invalid_argument("roi_align: empty box list");
  const std::size_t C = fs[0], H = fs[1], W = fs[2], P = static_cast<std::size_t>(pool);
  const std::size_t S = static_cast<std::size_t>(sampling), plane = H * W;

  // Per box: for each output cell and sample, four taps with weights. Channel
  // independent, so computed once per box and reused in backward.
  struct Tap {
    std::array<std::size_t, 4> idx;
    std::array<double, 4> w;
  };
  const std::size_t taps_per_box = P * P * S * S;
  std::vector<Tap> taps(boxes.size() * taps_per_box);
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const Box& box = boxes[b];
    if (!box_valid(box)) {
      throw std::invalid_argument("roi_align: degenerate box [" + std::to_string(box[0]) + "," +
                                  std::to_string(box[1]) + "," + std::to_string(box[2]) + "," +
                                  std::to_string(box[3]) + "]");
    }
    // Half-pixel convention: feature cell c has its value at c + 0.5.
    const double x1 = box[0] / stride - 0.5, y1 = box[1] / stride - 0.5;
    const double bw = (box[2] - box[0]) / stride / static_cast<double>(P);
    const double bh = (box[3] - box[1]) / stride / static_cast<double>(P);
    for (std::size_t py = 0; py < P; ++py)
      for (std::size_t px = 0; px < P; ++px)
        for (std::size_t sy = 0; sy < S; ++sy)
          for (std::size_t sx = 0; sx < S; ++sx) {
            const double y = y1 + (static_cast<double>(py) + (static_cast<double>(sy) + 0.5) / static_cast<double>(S)) * bh;
            const double x = x1 + (static_cast<double>(px) + (static_cast<double>(sx) + 0.5) / static_cast<double>(S)) * bw;
            Tap& t = taps[b * taps_per_box + ((py * P + px) * S + sy) * S + sx];
            bilinear_weights(y, x, H, W, t.idx, t.w);
          }
  }

  const double inv = 1.0 / static_cast<double>(S * S);
  const double* f = features.values().data();
  std::vector<double> out(boxes.size() * C * P * P, 0.0);
  for (std::size_t b = 0; b < boxes.size(); ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double* fc = f + c * plane;
      for (std::size_t cell = 0; cell < P * P; ++cell) {
        double acc = 0.0;
        for (std::size_t s = 0; s < S * S; ++s) {
          const Tap& t = taps[b * taps_per_box + cell * S * S + s];
          acc += t.w[0] * fc[t.idx[0]] + t.w[1] * fc[t.idx[1]] + t.w[2] * fc[t.idx[2]] + t.w[3] * fc[t.idx[3]];
        }
        out[(b * C + c) * P * P + cell] = acc * inv;
      }
    }
  const std::size_t n = boxes.size();
  auto result = finish({n, C, P, P}, std::move(out), "roi_align");
  if (recording({&features})) {
    ImplPtr fi = features.impl(), yi = result.impl();
    record({fi}, result, [fi, yi, taps = std::move(taps), n, C, P, S, plane, taps_per_box, inv] {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < C; ++c) {
          double* gc = fi->grad.data() + c * plane;
          for (std::size_t cell = 0; cell < P * P; ++cell) {
            const double g = yi->grad[(b * C + c) * P * P + cell] * inv;
            if (g == 0.0) continue;
            for (std::size_t s = 0; s < S * S; ++s) {
              const Tap& t = taps[b * taps_per_box + cell * S * S + s];
              for (int k = 0; k < 4; ++k) gc[t.idx[k]] += g * t.w[k];
            }
          }
        }
    });
  }
  return result;
}

// --- losses ------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t R = logits.dim(0), C = logits.dim(1);
  if (targets.size() != R) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  const auto lv = logits.values();
  std::vector<double> probs(R * C);
  double loss = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= C) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside [0, " +
                              std::to_string(C) + ")");
    }
    const double* row = lv.data() + r * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) probs[r * C + c] = std::exp(row[c] - lse);
    loss += lse - row[targets[r]];
  }
  loss /= static_cast<double>(R);
  auto result = finish({1}, {loss}, "cross_entropy");
  if (recording({&logits})) {
    ImplPtr li = logits.impl(), yi = result.impl();
    std::vector<int> tg(targets.begin(), targets.end());
    record({li}, result, [li, yi, probs = std::move(probs), tg = std::move(tg), R, C] {
      const double g = yi->grad[0] / static_cast<double>(R);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          const double onehot = static_cast<int>(c) == tg[r] ? 1.0 : 0.0;
          li->grad[r * C + c] += g * (probs[r * C + c] - onehot);
        }
    });
  }
  return result;
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  const std::size_t n = logits.numel();
  if (targets.size() != n) {
    throw ShapeError("bce_with_logits: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  const auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = lv[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x*t
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  auto result = finish({1}, {loss}, "bce_with_logits");
  if (recording({&logits})) {
    ImplPtr li = logits.impl(), yi = result.impl();
    std::vector<double> tg(targets.begin(), targets.end());
    record({li}, result, [li, yi, tg = std::move(tg), n] {
      const double g = yi->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double x = li->values[i];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        li->grad[i] += g * (s - tg[i]);
      }
    });
  }
  return result;
}

Tensor smooth_l1(const Tensor& pred, std::span<const double> targets, double beta) {
  const std::size_t n = pred.numel();
  if (targets.size() != n) {
    throw ShapeError("smooth_l1: " + std::to_string(targets.size()) + " targets for " + shape_str(pred.shape()));
  }
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1: beta must be positive");
  const auto pv = pred.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = std::abs(pv[i] - targets[i]);
    BranchProbe::note(d < beta);
    loss += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  auto result = finish({1}, {loss}, "smooth_l1");
  if (recording({&pred})) {
    ImplPtr pi = pred.impl(), yi = result.impl();
    std::vector<double> tg(targets.begin(), targets.end());
    record({pi}, result, [pi, yi, tg = std::move(tg), n, beta] {
      const double g = yi->grad[0];
      for (std::size_t i = 0; i < n; ++i) {
        const double d = pi->values[i] - tg[i];
        const double dd = std::abs(d) < beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
        pi->grad[i] += g * dd;
      }
    });
  }
  return result;
}

}  // namespace afd::ops
