// Reference kernels: textbook loop nests, one output element at a time.

#include "bnnlab/kernels.hpp"

namespace bnnlab::kernels::serial {

void matmul(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * m + j];
      c[i * m + j] = acc;
    }
  }
}

void matmul_nt(In a, In b, Out c, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < m; ++p) acc += a[i * m + p] * b[j * m + p];
      c[i * k + j] = acc;
    }
  }
}

void matmul_tn(In a, In b, Out c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += a[i * k + p] * b[i * m + j];
      c[p * m + j] = acc;
    }
  }
}

void conv2d_forward(const ConvGeometry& g, In input, In weight, Out output) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
                const long ix = static_cast<long>(x + kx) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                    ix >= static_cast<long>(g.width)) {
                  continue;
                }
                acc += input[((n * g.in_channels + c) * g.height + iy) * g.width + ix] *
                       weight[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
              }
            }
          }
          output[((n * g.out_channels + o) * oh + y) * ow + x] = acc;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, In grad_output, In weight, Out grad_input) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      for (std::size_t iy = 0; iy < g.height; ++iy) {
        for (std::size_t ix = 0; ix < g.width; ++ix) {
          double acc = 0.0;
          for (std::size_t o = 0; o < g.out_channels; ++o) {
            for (std::size_t ky = 0; ky < g.kernel; ++ky) {
              for (std::size_t kx = 0; kx < g.kernel; ++kx) {
                const long y = static_cast<long>(iy + g.pad) - static_cast<long>(ky);
                const long x = static_cast<long>(ix + g.pad) - static_cast<long>(kx);
                if (y < 0 || x < 0 || y >= static_cast<long>(oh) || x >= static_cast<long>(ow)) {
                  continue;
                }
                acc += grad_output[((n * g.out_channels + o) * oh + y) * ow + x] *
                       weight[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx];
              }
            }
          }
          grad_input[((n * g.in_channels + c) * g.height + iy) * g.width + ix] = acc;
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, In input, In grad_output, Out grad_weight) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t c = 0; c < g.in_channels; ++c) {
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          double acc = 0.0;
          for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t x = 0; x < ow; ++x) {
                const long iy = static_cast<long>(y + ky) - static_cast<long>(g.pad);
                const long ix = static_cast<long>(x + kx) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.height) ||
                    ix >= static_cast<long>(g.width)) {
                  continue;
                }
                acc += grad_output[((n * g.out_channels + o) * oh + y) * ow + x] *
                       input[((n * g.in_channels + c) * g.height + iy) * g.width + ix];
              }
            }
          }
          grad_weight[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx] = acc;
        }
      }
    }
  }
}

}  // namespace bnnlab::kernels::serial
