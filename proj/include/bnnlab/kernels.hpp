#pragma once

// Dense compute kernels behind the autodiff primitives. Every kernel has a
// serial reference implementation and an OpenMP implementation that splits
// work over independent output elements only, so both produce bitwise
// identical results. The unqualified entry points dispatch to the parallel
// variant when OpenMP is available.

#include <cstddef>
#include <span>

namespace bnnlab::kernels {

// Stride-1 convolution with symmetric zero padding.
struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t pad = 0;

  std::size_t out_height() const { return height + 2 * pad - kernel + 1; }
  std::size_t out_width() const { return width + 2 * pad - kernel + 1; }
};

using In = std::span<const double>;
using Out = std::span<double>;

namespace serial {

// c[n,m] = a[n,k] * b[k,m]
void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);
// c[n,k] = a[n,m] * b[k,m]^T
void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k);
// c[k,m] = a[n,k]^T * b[n,m]
void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);

void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output);
void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input);
void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight);

}  // namespace serial

namespace parallel {

void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);
void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k);
void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);

void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output);
void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input);
void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight);

}  // namespace parallel

bool openmp_enabled();
int max_threads();
// Thread count for later parallel regions (no-op without OpenMP).
void set_max_threads(int n);

void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);
void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k);
void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m);
void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output);
void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input);
void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight);

}  // namespace bnnlab::kernels
