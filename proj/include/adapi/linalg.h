#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "adapi/tensor.h"

namespace adapi {

struct ConvGeometry {
  size_t in_channels = 1;
  size_t out_channels = 1;
  size_t kernel = 1;
  size_t stride = 1;
  size_t pad = 0;
  size_t in_height = 1;
  size_t in_width = 1;

  size_t out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  size_t out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  Shape input_shape() const { return {in_channels, in_height, in_width}; }
  Shape kernel_shape() const { return {out_channels, in_channels, kernel, kernel}; }
  Shape output_shape() const { return {out_channels, out_height(), out_width()}; }
  void validate() const;

  bool operator==(const ConvGeometry&) const = default;
};

inline void ConvGeometry::validate() const {
  if (kernel == 0 || stride == 0 || in_height + 2 * pad < kernel || in_width + 2 * pad < kernel) {
    throw ShapeError("invalid convolution geometry");
  }
}

// Single-sample 2-D convolution, out[o,y,x] = sum_{c,i,j} in[c, y*s+i-p, x*s+j-p] * k[o,c,i,j].
// When `kernel_support` is given, positions whose support byte is 0 are
// skipped entirely; over the ring this is exact because the skipped weights
// are zero.
template <class T>
void conv2d_accumulate(const ConvGeometry& g, std::span<const T> input, std::span<const T> kernel,
                       std::span<T> out, std::span<const uint8_t> kernel_support = {}) {
  const size_t oh = g.out_height(), ow = g.out_width();
  const size_t K = g.kernel;
  for (size_t o = 0; o < g.out_channels; ++o) {
    for (size_t c = 0; c < g.in_channels; ++c) {
      for (size_t i = 0; i < K; ++i) {
        for (size_t j = 0; j < K; ++j) {
          const size_t widx = ((o * g.in_channels + c) * K + i) * K + j;
          if (!kernel_support.empty() && kernel_support[widx] == 0) continue;
          const T w = kernel[widx];
          for (size_t y = 0; y < oh; ++y) {
            const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.in_height)) continue;
            const T* in_row = input.data() + (c * g.in_height + iy) * g.in_width;
            T* out_row = out.data() + (o * oh + y) * ow;
            for (size_t x = 0; x < ow; ++x) {
              const long ix = static_cast<long>(x * g.stride + j) - static_cast<long>(g.pad);
              if (ix < 0 || ix >= static_cast<long>(g.in_width)) continue;
              out_row[x] += in_row[ix] * w;
            }
          }
        }
      }
    }
  }
}

template <class T>
Tensor<T> conv2d(const ConvGeometry& g, const Tensor<T>& input, const Tensor<T>& kernel,
                 std::span<const uint8_t> kernel_support = {}) {
  require_same_shape(input.shape(), g.input_shape(), "conv2d input");
  require_same_shape(kernel.shape(), g.kernel_shape(), "conv2d kernel");
  Tensor<T> out(g.output_shape());
  conv2d_accumulate<T>(g, input.span(), kernel.span(), out.span(), kernel_support);
  return out;
}

// [m x k] * [k x n] -> [m x n]; rows of `b` whose support is 0 are skipped.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, std::span<const uint8_t> b_support = {}) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b.data() + p * n;
      T* orow = out.data() + i * n;
      if (b_support.empty()) {
        for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      } else {
        const uint8_t* srow = b_support.data() + p * n;
        for (size_t j = 0; j < n; ++j) {
          if (srow[j]) orow[j] += av * brow[j];
        }
      }
    }
  }
  return out;
}

}  // namespace adapi
