// OpenMP kernels. Work is split over output rows or planes; each output
// element accumulates its terms in the same order as the serial reference.

#include <algorithm>

#include "bnnlab/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bnnlab::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

struct Range {
  std::size_t begin;
  std::size_t end;
};

// Output indices o in [0, out) whose input index o + k - pad lies in [0, in).
Range valid_range(std::size_t out, std::size_t in, std::size_t k, std::size_t pad) {
  const std::size_t begin = pad > k ? pad - k : 0;
  const std::size_t limit = in + pad > k ? in + pad - k : 0;
  return {std::min(begin, out), std::min(limit, out)};
}

}  // namespace

bool openmp_enabled() {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_max_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(n, 1));
#else
  (void)n;
#endif
}

namespace parallel {

void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  const long rows = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    double* crow = c.data() + i * m;
    std::fill(crow, crow + m, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k) {
  const long rows = static_cast<long>(n);
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (long i = 0; i < rows; ++i) {
    const double* arow = a.data() + i * m;
    for (std::size_t j = 0; j < k; ++j) {
      const double* brow = b.data() + j * m;
      double acc = 0.0;
      for (std::size_t p = 0; p < m; ++p) acc += arow[p] * brow[p];
      c[i * k + j] = acc;
    }
  }
}

void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  const long rows = static_cast<long>(k);
#pragma omp parallel for schedule(static) if (n * k * m > kParallelThreshold)
  for (long p = 0; p < rows; ++p) {
    double* crow = c.data() + p * m;
    std::fill(crow, crow + m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a[i * k + p];
      const double* brow = b.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const long planes = static_cast<long>(g.batch * g.out_channels);
  const std::size_t work = g.batch * g.out_channels * g.in_channels * kk * oh * ow;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (long plane = 0; plane < planes; ++plane) {
    const std::size_t n = plane / g.out_channels, o = plane % g.out_channels;
    double* out = output.data() + plane * oh * ow;
    std::fill(out, out + oh * ow, 0.0);
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      const double* in = input.data() + (n * g.in_channels + c) * g.height * g.width;
      const double* w = weight.data() + (o * g.in_channels + c) * kk;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const Range ry = valid_range(oh, g.height, ky, g.pad);
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const Range rx = valid_range(ow, g.width, kx, g.pad);
          const double wv = w[ky * g.kernel + kx];
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            const double* irow = in + (y + ky - g.pad) * g.width;
            double* orow = out + y * ow;
            for (std::size_t x = rx.begin; x < rx.end; ++x) orow[x] += irow[x + kx - g.pad] * wv;
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const long planes = static_cast<long>(g.batch * g.in_channels);
  const std::size_t work = g.batch * g.out_channels * g.in_channels * kk * oh * ow;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (long plane = 0; plane < planes; ++plane) {
    const std::size_t n = plane / g.in_channels, c = plane % g.in_channels;
    double* gin = grad_input.data() + plane * g.height * g.width;
    std::fill(gin, gin + g.height * g.width, 0.0);
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* gout = grad_output.data() + (n * g.out_channels + o) * oh * ow;
      const double* w = weight.data() + (o * g.in_channels + c) * kk;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const Range ry = valid_range(oh, g.height, ky, g.pad);
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          const Range rx = valid_range(ow, g.width, kx, g.pad);
          const double wv = w[ky * g.kernel + kx];
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            double* irow = gin + (y + ky - g.pad) * g.width;
            const double* grow = gout + y * ow;
            for (std::size_t x = rx.begin; x < rx.end; ++x) irow[x + kx - g.pad] += grow[x] * wv;
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const long pairs = static_cast<long>(g.out_channels * g.in_channels);
  const std::size_t work = g.batch * g.out_channels * g.in_channels * kk * oh * ow;
#pragma omp parallel for schedule(static) if (work > kParallelThreshold)
  for (long pair = 0; pair < pairs; ++pair) {
    const std::size_t o = pair / g.in_channels, c = pair % g.in_channels;
    double* gw = grad_weight.data() + pair * kk;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      const Range ry = valid_range(oh, g.height, ky, g.pad);
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const Range rx = valid_range(ow, g.width, kx, g.pad);
        double acc = 0.0;
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* in = input.data() + (n * g.in_channels + c) * g.height * g.width;
          const double* gout = grad_output.data() + (n * g.out_channels + o) * oh * ow;
          for (std::size_t y = ry.begin; y < ry.end; ++y) {
            const double* irow = in + (y + ky - g.pad) * g.width;
            const double* grow = gout + y * ow;
            for (std::size_t x = rx.begin; x < rx.end; ++x) acc += grow[x] * irow[x + kx - g.pad];
          }
        }
        gw[ky * g.kernel + kx] = acc;
      }
    }
  }
}

}  // namespace parallel

void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  parallel::matmul(a, b, c, n, k, m);
}
void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k) {
  parallel::matmul_nt(a, b, c, n, m, k);
}
void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  parallel::matmul_tn(a, b, c, n, k, m);
}
void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output) {
  parallel::conv2d_forward(g, input, weight, output);
}
void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input) {
  parallel::conv2d_backward_input(g, grad_output, weight, grad_input);
}
void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight) {
  parallel::conv2d_backward_weight(g, input, grad_output, grad_weight);
}

}  // namespace bnnlab::kernels
