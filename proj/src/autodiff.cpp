#include "bnnlab/autodiff.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <string>

#include "bnnlab/error.hpp"
#include "bnnlab/kernels.hpp"

namespace bnnlab {

namespace {

thread_local bool g_recording = true;

using Grads = std::vector<Tensor>;
using Need = std::vector<bool>;

std::string shapes_of(std::span<const Var> inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) s += " and ";
    s += shape_str(inputs[i].shape());
  }
  return s;
}

[[noreturn]] void shape_fail(OpKind op, std::span<const Var> inputs, const std::string& why) {
  throw ShapeError(std::string(op_name(op)) + ": " + why + " (shapes " + shapes_of(inputs) + ")");
}

void expect_arity(OpKind op, std::span<const Var> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ShapeError(std::string(op_name(op)) + ": expected " + std::to_string(n) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
}

Tape* common_tape(std::span<const Var> inputs) {
  if (!g_recording) return nullptr;
  Tape* tape = nullptr;
  for (const auto& v : inputs) {
    if (!v.tracked()) continue;
    if (tape && tape != v.tape()) throw Error("autodiff: inputs recorded on different tapes");
    tape = v.tape();
  }
  return tape;
}

template <class MakeBackward>
Var finish(OpKind op, std::span<const Var> inputs, Tensor value, MakeBackward&& make_backward) {
  Tape* tape = common_tape(inputs);
  if (!tape) return Var(std::move(value));
  return tape->record(op, inputs, std::move(value), make_backward());
}

void accumulate(Tensor& into, Tensor&& g) {
  if (into.empty() && into.shape().empty() && !g.empty()) {
    into = std::move(g);
    return;
  }
  auto dst = into.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Elementwise unary op; derivative(x, y) evaluates dy/dx.
template <class F, class D>
Var unary(OpKind op, std::span<const Var> in, F f, D derivative) {
  expect_arity(op, in, 1);
  const Var x = in[0];
  Tensor out(x.shape());
  const auto xs = x.value().data();
  auto ys = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = f(xs[i]);
  auto out_ptr = std::make_shared<const Tensor>(out);
  return finish(op, in, std::move(out), [x, out_ptr, derivative] {
    return [x, out_ptr, derivative](const Tensor& g, const Need&) {
      Tensor gx(x.shape());
      const auto xs = x.value().data();
      const auto ys = out_ptr->data();
      auto d = gx.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * derivative(xs[i], ys[i]);
      return Grads{std::move(gx)};
    };
  });
}

template <class F>
Var binary_same_shape(OpKind op, std::span<const Var> in, F f, bool is_mul) {
  expect_arity(op, in, 2);
  const Var a = in[0], b = in[1];
  if (a.shape() != b.shape()) shape_fail(op, in, "operand shapes differ");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i], b.value()[i]);
  const double b_sign = op == OpKind::Sub ? -1.0 : 1.0;
  return finish(op, in, std::move(out), [a, b, b_sign, is_mul] {
    return [a, b, b_sign, is_mul](const Tensor& g, const Need& need) {
      Grads r(2);
      if (need[0]) {
        r[0] = Tensor(a.shape());
        for (std::size_t i = 0; i < g.size(); ++i) r[0][i] = is_mul ? g[i] * b.value()[i] : g[i];
      }
      if (need[1]) {
        r[1] = Tensor(b.shape());
        for (std::size_t i = 0; i < g.size(); ++i)
          r[1][i] = is_mul ? g[i] * a.value()[i] : b_sign * g[i];
      }
      return r;
    };
  });
}

struct ChannelLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t inner;
};

ChannelLayout channel_layout(OpKind op, std::span<const Var> in, const Var& x) {
  if (x.shape().size() < 2) shape_fail(op, in, "expected [N, C, ...] input");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.shape().size(); ++i) inner *= x.shape()[i];
  return {x.shape()[0], x.shape()[1], inner};
}

void expect_channel_vector(OpKind op, std::span<const Var> in, const Var& v, std::size_t c) {
  if (v.shape().size() != 1 || v.shape()[0] != c) {
    shape_fail(op, in, "per-channel operand must have shape [" + std::to_string(c) + "]");
  }
}

Var op_matmul(std::span<const Var> in) {
  constexpr OpKind op = OpKind::MatMul;
  expect_arity(op, in, 2);
  const Var a = in[0], b = in[1];
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    shape_fail(op, in, "expected [n,k] x [k,m]");
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out({n, m});
  kernels::matmul(a.value().data(), b.value().data(), out.data(), n, k, m);
  return finish(op, in, std::move(out), [a, b, n, k, m] {
    return [a, b, n, k, m](const Tensor& g, const Need& need) {
      Grads r(2);
      if (need[0]) {
        r[0] = Tensor({n, k});
        kernels::matmul_nt(g.data(), b.value().data(), r[0].data(), n, m, k);
      }
      if (need[1]) {
        r[1] = Tensor({k, m});
        kernels::matmul_tn(a.value().data(), g.data(), r[1].data(), n, k, m);
      }
      return r;
    };
  });
}

Var op_conv2d(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::Conv2d;
  expect_arity(op, in, 2);
  const Var x = in[0], w = in[1];
  if (x.shape().size() != 4 || w.shape().size() != 4) shape_fail(op, in, "expected rank-4 operands");
  kernels::ConvGeometry geo{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
                            w.shape()[0], w.shape()[2], attrs.pad};
  if (w.shape()[1] != geo.in_channels) shape_fail(op, in, "input channels differ");
  if (w.shape()[2] != w.shape()[3]) shape_fail(op, in, "kernel must be square");
  if (geo.kernel == 0 || geo.height + 2 * geo.pad < geo.kernel ||
      geo.width + 2 * geo.pad < geo.kernel) {
    shape_fail(op, in, "kernel larger than padded input");
  }
  Tensor out({geo.batch, geo.out_channels, geo.out_height(), geo.out_width()});
  kernels::conv2d_forward(geo, x.value().data(), w.value().data(), out.data());
  return finish(op, in, std::move(out), [x, w, geo] {
    return [x, w, geo](const Tensor& g, const Need& need) {
      Grads r(2);
      if (need[0]) {
        r[0] = Tensor(x.shape());
        kernels::conv2d_backward_input(geo, g.data(), w.value().data(), r[0].data());
      }
      if (need[1]) {
        r[1] = Tensor(w.shape());
        kernels::conv2d_backward_weight(geo, x.value().data(), g.data(), r[1].data());
      }
      return r;
    };
  });
}

Var op_bias_add(std::span<const Var> in) {
  constexpr OpKind op = OpKind::BiasAdd;
  expect_arity(op, in, 2);
  const Var x = in[0], b = in[1];
  const auto L = channel_layout(op, in, x);
  expect_channel_vector(op, in, b, L.channels);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < L.batch; ++n)
    for (std::size_t c = 0; c < L.channels; ++c)
      for (std::size_t i = 0; i < L.inner; ++i) {
        const std::size_t idx = (n * L.channels + c) * L.inner + i;
        out[idx] = x.value()[idx] + b.value()[c];
      }
  return finish(op, in, std::move(out), [x, b, L] {
    return [x, b, L](const Tensor& g, const Need& need) {
      Grads r(2);
      if (need[0]) r[0] = g;
      if (need[1]) {
        r[1] = Tensor(b.shape());
        for (std::size_t n = 0; n < L.batch; ++n)
          for (std::size_t c = 0; c < L.channels; ++c)
            for (std::size_t i = 0; i < L.inner; ++i) r[1][c] += g[(n * L.channels + c) * L.inner + i];
      }
      return r;
    };
  });
}

Var op_concat(std::span<const Var> in) {
  constexpr OpKind op = OpKind::ConcatChannels;
  if (in.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = in[0].shape();
  if (first.size() < 2) shape_fail(op, in, "expected [N, C, ...] inputs");
  std::size_t total_c = 0;
  std::vector<std::size_t> widths;
  for (const auto& v : in) {
    const Shape& s = v.shape();
    bool ok = s.size() == first.size() && s[0] == first[0];
    for (std::size_t i = 2; ok && i < s.size(); ++i) ok = s[i] == first[i];
    if (!ok) shape_fail(op, in, "inputs differ outside the channel axis");
    total_c += s[1];
    widths.push_back(s[1]);
  }
  std::size_t inner = 1;
  for (std::size_t i = 2; i < first.size(); ++i) inner *= first[i];
  Shape out_shape = first;
  out_shape[1] = total_c;
  Tensor out(out_shape);
  const std::size_t batch = first[0];
  std::size_t offset = 0;
  for (const auto& v : in) {
    const std::size_t c = v.shape()[1];
    for (std::size_t n = 0; n < batch; ++n) {
      const double* src = v.value().data().data() + n * c * inner;
      std::copy(src, src + c * inner, out.data().data() + (n * total_c + offset) * inner);
    }
    offset += c;
  }
  std::vector<Var> inputs(in.begin(), in.end());
  return finish(op, in, std::move(out), [inputs, widths, total_c, inner, batch] {
    return [inputs, widths, total_c, inner, batch](const Tensor& g, const Need& need) {
      Grads r(inputs.size());
      std::size_t offset = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const std::size_t c = widths[k];
        if (need[k]) {
          r[k] = Tensor(inputs[k].shape());
          for (std::size_t n = 0; n < batch; ++n) {
            const double* src = g.data().data() + (n * total_c + offset) * inner;
            std::copy(src, src + c * inner, r[k].data().data() + n * c * inner);
          }
        }
        offset += c;
      }
      return r;
    };
  });
}

Var op_mean_pool(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::MeanPool;
  expect_arity(op, in, 1);
  const Var x = in[0];
  const std::size_t p = attrs.pool;
  if (x.shape().size() != 4) shape_fail(op, in, "expected [N, C, H, W]");
  if (p == 0 || x.shape()[2] < p || x.shape()[3] < p) shape_fail(op, in, "pool window too large");
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t h = x.shape()[2], w = x.shape()[3], oh = h / p, ow = w / p;
  const double area = static_cast<double>(p * p);
  Tensor out({x.shape()[0], x.shape()[1], oh, ow});
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx) acc += x.value()[(pl * h + y * p + dy) * w + xx * p + dx];
        out[(pl * oh + y) * ow + xx] = acc / area;
      }
  return finish(op, in, std::move(out), [x, p, planes, h, w, oh, ow, area] {
    return [x, p, planes, h, w, oh, ow, area](const Tensor& g, const Need&) {
      Tensor gx(x.shape());
      for (std::size_t pl = 0; pl < planes; ++pl)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double v = g[(pl * oh + y) * ow + xx] / area;
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx) gx[(pl * h + y * p + dy) * w + xx * p + dx] = v;
          }
      return Grads{std::move(gx)};
    };
  });
}

Var op_global_mean_pool(std::span<const Var> in) {
  constexpr OpKind op = OpKind::GlobalMeanPool;
  expect_arity(op, in, 1);
  const Var x = in[0];
  if (x.shape().size() != 4) shape_fail(op, in, "expected [N, C, H, W]");
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const std::size_t area = x.shape()[2] * x.shape()[3];
  Tensor out({x.shape()[0], x.shape()[1]});
  for (std::size_t pl = 0; pl < planes; ++pl) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += x.value()[pl * area + i];
    out[pl] = acc / static_cast<double>(area);
  }
  return finish(op, in, std::move(out), [x, planes, area] {
    return [x, planes, area](const Tensor& g, const Need&) {
      Tensor gx(x.shape());
      for (std::size_t pl = 0; pl < planes; ++pl) {
        const double v = g[pl] / static_cast<double>(area);
        for (std::size_t i = 0; i < area; ++i) gx[pl * area + i] = v;
      }
      return Grads{std::move(gx)};
    };
  });
}

Var op_batch_norm(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::BatchNorm;
  expect_arity(op, in, 3);
  const Var x = in[0], gamma = in[1], beta = in[2];
  const auto L = channel_layout(op, in, x);
  expect_channel_vector(op, in, gamma, L.channels);
  expect_channel_vector(op, in, beta, L.channels);
  if (!(attrs.eps > 0.0)) throw ConfigError("batch_norm: eps must be positive");
  const double count = static_cast<double>(L.batch * L.inner);
  Tensor mean({L.channels}), var({L.channels}), inv_std({L.channels});
  auto xhat = std::make_shared<Tensor>(x.shape());
  Tensor out(x.shape());
  for (std::size_t c = 0; c < L.channels; ++c) {
    double acc = 0.0;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t i = 0; i < L.inner; ++i) acc += x.value()[(n * L.channels + c) * L.inner + i];
    mean[c] = acc / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t i = 0; i < L.inner; ++i) {
        const double d = x.value()[(n * L.channels + c) * L.inner + i] - mean[c];
        sq += d * d;
      }
    var[c] = sq / count;
    inv_std[c] = 1.0 / std::sqrt(var[c] + attrs.eps);
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t i = 0; i < L.inner; ++i) {
        const std::size_t idx = (n * L.channels + c) * L.inner + i;
        (*xhat)[idx] = (x.value()[idx] - mean[c]) * inv_std[c];
        out[idx] = gamma.value()[c] * (*xhat)[idx] + beta.value()[c];
      }
  }
  if (attrs.stats) *attrs.stats = BatchStatistics{mean, var};
  return finish(op, in, std::move(out), [x, gamma, beta, L, count, inv_std, xhat] {
    return [x, gamma, beta, L, count, inv_std, xhat](const Tensor& g, const Need& need) {
      Grads r(3);
      if (need[0]) r[0] = Tensor(x.shape());
      if (need[1]) r[1] = Tensor(gamma.shape());
      if (need[2]) r[2] = Tensor(beta.shape());
      for (std::size_t c = 0; c < L.channels; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = 0; n < L.batch; ++n)
          for (std::size_t i = 0; i < L.inner; ++i) {
            const std::size_t idx = (n * L.channels + c) * L.inner + i;
            sum_g += g[idx];
            sum_gx += g[idx] * (*xhat)[idx];
          }
        if (need[1]) r[1][c] = sum_gx;
        if (need[2]) r[2][c] = sum_g;
        if (need[0]) {
          const double gm = gamma.value()[c];
          const double k = gm * inv_std[c] / count;
          for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t i = 0; i < L.inner; ++i) {
              const std::size_t idx = (n * L.channels + c) * L.inner + i;
              r[0][idx] = k * (count * g[idx] - sum_g - (*xhat)[idx] * sum_gx);
            }
        }
      }
      return r;
    };
  });
}

Var op_channel_affine(std::span<const Var> in) {
  constexpr OpKind op = OpKind::ChannelAffine;
  expect_arity(op, in, 3);
  const Var x = in[0], s = in[1], b = in[2];
  const auto L = channel_layout(op, in, x);
  expect_channel_vector(op, in, s, L.channels);
  expect_channel_vector(op, in, b, L.channels);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < L.batch; ++n)
    for (std::size_t c = 0; c < L.channels; ++c)
      for (std::size_t i = 0; i < L.inner; ++i) {
        const std::size_t idx = (n * L.channels + c) * L.inner + i;
        out[idx] = x.value()[idx] * s.value()[c] + b.value()[c];
      }
  return finish(op, in, std::move(out), [x, s, b, L] {
    return [x, s, b, L](const Tensor& g, const Need& need) {
      Grads r(3);
      if (need[0]) r[0] = Tensor(x.shape());
      if (need[1]) r[1] = Tensor(s.shape());
      if (need[2]) r[2] = Tensor(b.shape());
      for (std::size_t n = 0; n < L.batch; ++n)
        for (std::size_t c = 0; c < L.channels; ++c)
          for (std::size_t i = 0; i < L.inner; ++i) {
            const std::size_t idx = (n * L.channels + c) * L.inner + i;
            if (need[0]) r[0][idx] = g[idx] * s.value()[c];
            if (need[1]) r[1][c] += g[idx] * x.value()[idx];
            if (need[2]) r[2][c] += g[idx];
          }
      return r;
    };
  });
}

// Row-wise softmax of a [n, k] matrix.
Tensor softmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out[i * k + j] = std::exp(logits[i * k + j] - mx);
      z += out[i * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }
  return out;
}

void expect_matrix(OpKind op, std::span<const Var> in) {
  if (in[0].shape().size() != 2 || in[0].shape()[1] == 0) shape_fail(op, in, "expected [n, k] logits");
}

Var op_softmax(std::span<const Var> in) {
  constexpr OpKind op = OpKind::Softmax;
  expect_arity(op, in, 1);
  expect_matrix(op, in);
  const Var x = in[0];
  Tensor out = softmax_rows(x.value());
  auto y = std::make_shared<const Tensor>(out);
  return finish(op, in, std::move(out), [y] {
    return [y](const Tensor& g, const Need&) {
      const std::size_t n = y->dim(0), k = y->dim(1);
      Tensor gx(y->shape());
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += g[i * k + j] * (*y)[i * k + j];
        for (std::size_t j = 0; j < k; ++j) gx[i * k + j] = (*y)[i * k + j] * (g[i * k + j] - dot);
      }
      return Grads{std::move(gx)};
    };
  });
}

Var op_log_softmax(std::span<const Var> in) {
  constexpr OpKind op = OpKind::LogSoftmax;
  expect_arity(op, in, 1);
  expect_matrix(op, in);
  const Var x = in[0];
  auto p = std::make_shared<const Tensor>(softmax_rows(x.value()));
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x.value()[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x.value()[i * k + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x.value()[i * k + j] - lse;
  }
  return finish(op, in, std::move(out), [p, n, k] {
    return [p, n, k](const Tensor& g, const Need&) {
      Tensor gx(p->shape());
      for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < k; ++j) total += g[i * k + j];
        for (std::size_t j = 0; j < k; ++j) gx[i * k + j] = g[i * k + j] - (*p)[i * k + j] * total;
      }
      return Grads{std::move(gx)};
    };
  });
}

Var op_softmax_cross_entropy(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::SoftmaxCrossEntropy;
  expect_arity(op, in, 1);
  expect_matrix(op, in);
  const Var x = in[0];
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  if (attrs.labels.size() != n) {
    shape_fail(op, in, std::to_string(attrs.labels.size()) + " labels for " + std::to_string(n) + " rows");
  }
  for (auto label : attrs.labels) {
    if (label >= k) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(label) +
                        " out of range for " + std::to_string(k) + " classes");
    }
  }
  auto p = std::make_shared<const Tensor>(softmax_rows(x.value()));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x.value()[i * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(x.value()[i * k + j] - mx);
    total += mx + std::log(z) - x.value()[i * k + attrs.labels[i]];
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor out = Tensor::scalar(total * inv_n);
  return finish(op, in, std::move(out), [p, n, k, inv_n, labels = attrs.labels] {
    return [p, n, k, inv_n, labels](const Tensor& g, const Need&) {
      Tensor gx(p->shape());
      const double s = g[0] * inv_n;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
          gx[i * k + j] = s * ((*p)[i * k + j] - (j == labels[i] ? 1.0 : 0.0));
      return Grads{std::move(gx)};
    };
  });
}

Var op_reduce(OpKind op, std::span<const Var> in, bool average) {
  expect_arity(op, in, 1);
  const Var x = in[0];
  if (x.value().size() == 0) shape_fail(op, in, "empty tensor");
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const double count = static_cast<double>(x.value().size());
  if (average) acc /= count;
  return finish(op, in, Tensor::scalar(acc), [x, average, count] {
    return [x, average, count](const Tensor& g, const Need&) {
      return Grads{Tensor(x.shape(), average ? g[0] / count : g[0])};
    };
  });
}

Var op_reshape(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::Reshape;
  expect_arity(op, in, 1);
  const Var x = in[0];
  if (shape_numel(attrs.shape) != x.value().size()) {
    shape_fail(op, in, "cannot view as " + shape_str(attrs.shape));
  }
  return finish(op, in, x.value().reshaped(attrs.shape), [x] {
    return [x](const Tensor& g, const Need&) { return Grads{g.reshaped(x.shape())}; };
  });
}

struct Tap {
  std::array<long, 4> index;
  std::array<double, 4> weight;
};

Var op_resample(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::Resample;
  expect_arity(op, in, 1);
  const Var x = in[0];
  if (x.shape().size() != 4) shape_fail(op, in, "expected [N, C, H, W]");
  const std::size_t planes = x.shape()[0] * x.shape()[1];
  const long h = static_cast<long>(x.shape()[2]), w = static_cast<long>(x.shape()[3]);
  const auto& m = attrs.affine;
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(h * w));
  for (long y = 0; y < h; ++y)
    for (long xx = 0; xx < w; ++xx) {
      const double sx = m[0] * xx + m[1] * y + m[2];
      const double sy = m[3] * xx + m[4] * y + m[5];
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      Tap& t = (*taps)[y * w + xx];
      const long xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const long ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      for (int k = 0; k < 4; ++k) {
        const bool inside = xs[k] >= 0 && xs[k] < w && ys[k] >= 0 && ys[k] < h;
        t.index[k] = inside && ws[k] != 0.0 ? ys[k] * w + xs[k] : -1;
        t.weight[k] = ws[k];
      }
    }
  const std::size_t area = static_cast<std::size_t>(h * w);
  Tensor out(x.shape());
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const double* src = x.value().data().data() + pl * area;
    for (std::size_t i = 0; i < area; ++i) {
      const Tap& t = (*taps)[i];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        if (t.index[k] >= 0) acc += t.weight[k] * src[t.index[k]];
      out[pl * area + i] = acc;
    }
  }
  return finish(op, in, std::move(out), [x, taps, planes, area] {
    return [x, taps, planes, area](const Tensor& g, const Need&) {
      Tensor gx(x.shape());
      for (std::size_t pl = 0; pl < planes; ++pl) {
        double* dst = gx.data().data() + pl * area;
        for (std::size_t i = 0; i < area; ++i) {
          const Tap& t = (*taps)[i];
          for (int k = 0; k < 4; ++k)
            if (t.index[k] >= 0) dst[t.index[k]] += t.weight[k] * g[pl * area + i];
        }
      }
      return Grads{std::move(gx)};
    };
  });
}

double positive_softplus(double rho) { return std::max(softplus_scalar(rho), DBL_TRUE_MIN); }

Var op_kl_gaussian(std::span<const Var> in, const OpAttrs& attrs) {
  constexpr OpKind op = OpKind::KLGaussian;
  expect_arity(op, in, 2);
  const Var mu = in[0], rho = in[1];
  if (mu.shape() != rho.shape()) shape_fail(op, in, "mu and rho shapes differ");
  const double sp = attrs.scalar;
  if (!(sp > 0.0)) throw ConfigError("kl_gaussian: prior sigma must be positive");
  const double two_var_p = 2.0 * sp * sp;
  const double log_sp = std::log(sp);
  double total = 0.0;
  for (std::size_t i = 0; i < mu.value().size(); ++i) {
    const double s = positive_softplus(rho.value()[i]);
    const double m = mu.value()[i];
    total += (log_sp - std::log(s)) + ((s * s + m * m) / two_var_p - 0.5);
  }
  total = std::max(total, 0.0);
  return finish(op, in, Tensor::scalar(total), [mu, rho, sp] {
    return [mu, rho, sp](const Tensor& g, const Need& need) {
      Grads r(2);
      const double var_p = sp * sp;
      if (need[0]) {
        r[0] = Tensor(mu.shape());
        for (std::size_t i = 0; i < r[0].size(); ++i) r[0][i] = g[0] * mu.value()[i] / var_p;
      }
      if (need[1]) {
        r[1] = Tensor(rho.shape());
        for (std::size_t i = 0; i < r[1].size(); ++i) {
          const double s = positive_softplus(rho.value()[i]);
          r[1][i] = g[0] * (-1.0 / s + s / var_p) * sigmoid_scalar(rho.value()[i]);
        }
      }
      return r;
    };
  });
}

}  // namespace

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::MeanPool: return "mean_pool";
    case OpKind::GlobalMeanPool: return "global_mean_pool";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::ChannelAffine: return "channel_affine";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Clamp: return "clamp";
    case OpKind::Softplus: return "softplus";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Reshape: return "reshape";
    case OpKind::Resample: return "resample";
    case OpKind::KLGaussian: return "kl_gaussian";
  }
  return "unknown";
}

double softplus_scalar(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var::Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

const Tensor& GradientMap::operator[](const Var& leaf) const {
  if (!leaf.tracked() || leaf.tape() != tape_) throw Error("gradient: variable is not on this tape");
  auto it = grads_.find(leaf.node());
  if (it == grads_.end()) throw Error("gradient: loss does not depend on this variable");
  return it->second;
}

bool GradientMap::contains(const Var& leaf) const {
  return leaf.tracked() && leaf.tape() == tape_ && grads_.count(leaf.node()) > 0;
}

Var Tape::leaf(Tensor value) {
  Var v(std::move(value));
  v.tape_ = this;
  v.node_ = nodes_.size();
  nodes_.push_back(Node{OpKind::Leaf, {}, {}, v.value_, nullptr});
  return v;
}

Var Tape::record(OpKind op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  Node node{op, {}, {}, std::make_shared<const Tensor>(std::move(value)), std::move(backward)};
  for (const auto& in : inputs) {
    if (in.tracked() && in.tape() != this) throw Error("autodiff: input recorded on another tape");
    node.inputs.push_back(in.tracked() ? in.node() : 0);
    node.input_tracked.push_back(in.tracked());
  }
  Var v;
  v.value_ = node.value;
  v.tape_ = this;
  v.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return v;
}

GradientMap Tape::backward(const Var& loss) const {
  if (!loss.tracked() || loss.tape() != this) throw Error("backward: loss is not recorded on this tape");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  GradientMap out;
  out.tape_ = this;
  std::vector<Tensor> grads(loss.node() + 1);
  grads[loss.node()] = Tensor(loss.shape(), 1.0);
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    if (grads[i].empty()) continue;
    Tensor g = std::move(grads[i]);
    const Node& node = nodes_[i];
    ++out.visited_;
    if (node.op == OpKind::Leaf) {
      out.grads_.emplace(i, std::move(g));
      continue;
    }
    Grads gin = node.backward(g, node.input_tracked);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (!node.input_tracked[j] || gin[j].empty()) continue;
      accumulate(grads[node.inputs[j]], std::move(gin[j]));
    }
  }
  return out;
}

NoRecordGuard::NoRecordGuard() : previous_(g_recording) { g_recording = false; }
NoRecordGuard::~NoRecordGuard() { g_recording = previous_; }
bool recording_enabled() { return g_recording; }

Var apply(OpKind op, std::span<const Var> inputs, const OpAttrs& attrs) {
  switch (op) {
    case OpKind::MatMul: return op_matmul(inputs);
    case OpKind::Conv2d: return op_conv2d(inputs, attrs);
    case OpKind::Relu:
      return unary(op, inputs, [](double x) { return x < 0.0 ? 0.0 : x; },
                   [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    case OpKind::Add:
      return binary_same_shape(op, inputs, [](double a, double b) { return a + b; }, false);
    case OpKind::Sub:
      return binary_same_shape(op, inputs, [](double a, double b) { return a - b; }, false);
    case OpKind::Mul:
      return binary_same_shape(op, inputs, [](double a, double b) { return a * b; }, true);
    case OpKind::Scale: {
      const double s = attrs.scalar;
      return unary(op, inputs, [s](double x) { return s * x; }, [s](double, double) { return s; });
    }
    case OpKind::AddScalar: {
      const double s = attrs.scalar;
      return unary(op, inputs, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
    }
    case OpKind::BiasAdd: return op_bias_add(inputs);
    case OpKind::ConcatChannels: return op_concat(inputs);
    case OpKind::MeanPool: return op_mean_pool(inputs, attrs);
    case OpKind::GlobalMeanPool: return op_global_mean_pool(inputs);
    case OpKind::BatchNorm: return op_batch_norm(inputs, attrs);
    case OpKind::ChannelAffine: return op_channel_affine(inputs);
    case OpKind::Softmax: return op_softmax(inputs);
    case OpKind::LogSoftmax: return op_log_softmax(inputs);
    case OpKind::SoftmaxCrossEntropy: return op_softmax_cross_entropy(inputs, attrs);
    case OpKind::Clamp: {
      const double lo = attrs.lo, hi = attrs.hi;
      if (!(lo <= hi)) throw ConfigError("clamp: lo must not exceed hi");
      return unary(op, inputs, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                   [lo, hi](double x, double) { return x >= lo && x <= hi ? 1.0 : 0.0; });
    }
    case OpKind::Softplus:
      return unary(op, inputs, softplus_scalar, [](double x, double) { return sigmoid_scalar(x); });
    case OpKind::Log:
      return unary(op, inputs, [](double x) { return std::log(x); },
                   [](double x, double) { return 1.0 / x; });
    case OpKind::Exp:
      return unary(op, inputs, [](double x) { return std::exp(x); },
                   [](double, double y) { return y; });
    case OpKind::Sum: return op_reduce(op, inputs, false);
    case OpKind::Mean: return op_reduce(op, inputs, true);
    case OpKind::Reshape: return op_reshape(inputs, attrs);
    case OpKind::Resample: return op_resample(inputs, attrs);
    case OpKind::KLGaussian: return op_kl_gaussian(inputs, attrs);
    case OpKind::Leaf: break;
  }
  throw ConfigError("apply: unknown op kind " + std::to_string(static_cast<int>(op)));
}

namespace {
Var apply1(OpKind op, const Var& x, const OpAttrs& attrs = {}) {
  const Var in[] = {x};
  return apply(op, in, attrs);
}
Var apply2(OpKind op, const Var& a, const Var& b, const OpAttrs& attrs = {}) {
  const Var in[] = {a, b};
  return apply(op, in, attrs);
}
}  // namespace

Var matmul(const Var& a, const Var& b) { return apply2(OpKind::MatMul, a, b); }
Var conv2d(const Var& input, const Var& weight, std::size_t pad) {
  OpAttrs attrs;
  attrs.pad = pad;
  return apply2(OpKind::Conv2d, input, weight, attrs);
}
Var relu(const Var& x) { return apply1(OpKind::Relu, x); }
Var add(const Var& a, const Var& b) { return apply2(OpKind::Add, a, b); }
Var sub(const Var& a, const Var& b) { return apply2(OpKind::Sub, a, b); }
Var mul(const Var& a, const Var& b) { return apply2(OpKind::Mul, a, b); }
Var scale(const Var& x, double factor) {
  OpAttrs attrs;
  attrs.scalar = factor;
  return apply1(OpKind::Scale, x, attrs);
}
Var add_scalar(const Var& x, double offset) {
  OpAttrs attrs;
  attrs.scalar = offset;
  return apply1(OpKind::AddScalar, x, attrs);
}
Var bias_add(const Var& x, const Var& bias) { return apply2(OpKind::BiasAdd, x, bias); }
Var concat_channels(std::span<const Var> parts) { return apply(OpKind::ConcatChannels, parts); }
Var mean_pool(const Var& x, std::size_t window) {
  OpAttrs attrs;
  attrs.pool = window;
  return apply1(OpKind::MeanPool, x, attrs);
}
Var global_mean_pool(const Var& x) { return apply1(OpKind::GlobalMeanPool, x); }
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStatistics* stats) {
  OpAttrs attrs;
  attrs.eps = eps;
  attrs.stats = stats;
  const Var in[] = {x, gamma, beta};
  return apply(OpKind::BatchNorm, in, attrs);
}
Var channel_affine(const Var& x, const Var& scale_, const Var& shift) {
  const Var in[] = {x, scale_, shift};
  return apply(OpKind::ChannelAffine, in);
}
Var softmax(const Var& logits) { return apply1(OpKind::Softmax, logits); }
Var log_softmax(const Var& logits) { return apply1(OpKind::LogSoftmax, logits); }
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels) {
  OpAttrs attrs;
  attrs.labels.assign(labels.begin(), labels.end());
  return apply1(OpKind::SoftmaxCrossEntropy, logits, attrs);
}
Var clamp(const Var& x, double lo, double hi) {
  OpAttrs attrs;
  attrs.lo = lo;
  attrs.hi = hi;
  return apply1(OpKind::Clamp, x, attrs);
}
Var softplus(const Var& x) { return apply1(OpKind::Softplus, x); }
Var log(const Var& x) { return apply1(OpKind::Log, x); }
Var exp(const Var& x) { return apply1(OpKind::Exp, x); }
Var sum(const Var& x) { return apply1(OpKind::Sum, x); }
Var mean(const Var& x) { return apply1(OpKind::Mean, x); }
Var reshape(const Var& x, Shape shape) {
  OpAttrs attrs;
  attrs.shape = std::move(shape);
  return apply1(OpKind::Reshape, x, attrs);
}
Var resample(const Var& images, const std::array<double, 6>& affine) {
  OpAttrs attrs;
  attrs.affine = affine;
  return apply1(OpKind::Resample, images, attrs);
}
Var kl_gaussian(const Var& mu, const Var& rho, double prior_sigma) {
  OpAttrs attrs;
  attrs.scalar = prior_sigma;
  return apply2(OpKind::KLGaussian, mu, rho, attrs);
}

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h) {
  if (!(h > 0.0)) throw ConfigError("finite_difference_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace bnnlab
