#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace oracle {

using namespace bnnlab;

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

void avoid_kinks(Tensor& t, std::initializer_list<double> kinks, double margin) {
  for (double& v : t.data())
    for (double k : kinks)
      if (std::abs(v - k) < margin) v = k + (v >= k ? margin : -margin);
}

namespace {

double project(const Tensor& out, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
  return s;
}

double evaluate(const GradCase& c, const std::vector<Tensor>& inputs, const Tensor& r) {
  NoRecordGuard guard;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.emplace_back(t);
  return project(c.fn(vars).value(), r);
}

}  // namespace

double max_relative_error(const std::function<GradCase(Rng&)>& make, std::size_t cases, std::uint64_t seed,
                          double h) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t n = 0; n < cases; ++n) {
    GradCase c = make(rng);
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : c.inputs) leaves.push_back(tape.leaf(t));
    const Var out = c.fn(leaves);
    const Tensor r = random_tensor(rng, out.shape());
    const Var loss = sum(mul(out, Var(r)));
    const GradientMap g = tape.backward(loss);

    double diff2 = 0.0, g2 = 0.0, fd2 = 0.0;
    std::vector<Tensor> x = c.inputs;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const Tensor gk = g.contains(leaves[k]) ? g[leaves[k]] : Tensor(x[k].shape());
      for (std::size_t i = 0; i < x[k].size(); ++i) {
        const double orig = x[k][i];
        x[k][i] = orig + h;
        const double up = evaluate(c, x, r);
        x[k][i] = orig - h;
        const double down = evaluate(c, x, r);
        x[k][i] = orig;
        const double fd = (up - down) / (2.0 * h);
        diff2 += (gk[i] - fd) * (gk[i] - fd);
        g2 += gk[i] * gk[i];
        fd2 += fd * fd;
      }
    }
    const double denom = std::sqrt(std::max({g2, fd2, 1e-300}));
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

std::vector<PrimitiveCheck> check_all_primitives(std::size_t cases, std::uint64_t seed, double h) {
  using Make = std::function<GradCase(Rng&)>;
  auto dim = [](Rng& r, std::size_t lo, std::size_t hi) { return lo + r.below(hi - lo + 1); };
  auto nchw = [&](Rng& r) { return Shape{dim(r, 1, 3), dim(r, 1, 3), dim(r, 3, 5), dim(r, 3, 5)}; };
  auto unary = [&](Var (*f)(const Var&), double lo, double hi, std::initializer_list<double> kinks) -> Make {
    std::vector<double> ks(kinks);
    return [=](Rng& r) {
      Tensor x = random_tensor(r, {dim(r, 1, 4), dim(r, 1, 5)}, lo, hi);
      for (double k : ks) avoid_kinks(x, {k}, 1e-3);
      return GradCase{{x}, [f](const std::vector<Var>& v) { return f(v[0]); }};
    };
  };

  std::vector<std::pair<std::string, Make>> ops;
  ops.emplace_back("matmul", [&](Rng& r) {
    const std::size_t n = dim(r, 1, 4), k = dim(r, 1, 5), m = dim(r, 1, 4);
    return GradCase{{random_tensor(r, {n, k}), random_tensor(r, {k, m})},
                    [](const std::vector<Var>& v) { return matmul(v[0], v[1]); }};
  });
  ops.emplace_back("conv2d", [&](Rng& r) {
    const Shape s = nchw(r);
    const std::size_t k = 1 + 2 * r.below(2), pad = r.below(k / 2 + 1), o = dim(r, 1, 3);
    return GradCase{{random_tensor(r, s), random_tensor(r, {o, s[1], k, k})},
                    [pad](const std::vector<Var>& v) { return conv2d(v[0], v[1], pad); }};
  });
  ops.emplace_back("relu", unary(relu, -1, 1, {0.0}));
  ops.emplace_back("add", [&](Rng& r) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 4)};
    return GradCase{{random_tensor(r, s), random_tensor(r, s)},
                    [](const std::vector<Var>& v) { return add(v[0], v[1]); }};
  });
  ops.emplace_back("sub", [&](Rng& r) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 4)};
    return GradCase{{random_tensor(r, s), random_tensor(r, s)},
                    [](const std::vector<Var>& v) { return sub(v[0], v[1]); }};
  });
  ops.emplace_back("mul", [&](Rng& r) {
    const Shape s{dim(r, 1, 4), dim(r, 1, 4)};
    return GradCase{{random_tensor(r, s), random_tensor(r, s)},
                    [](const std::vector<Var>& v) { return mul(v[0], v[1]); }};
  });
  ops.emplace_back("scale", [&](Rng& r) {
    const double f = r.uniform(-3, 3);
    return GradCase{{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})},
                    [f](const std::vector<Var>& v) { return scale(v[0], f); }};
  });
  ops.emplace_back("add_scalar", [&](Rng& r) {
    const double f = r.uniform(-3, 3);
    return GradCase{{random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})},
                    [f](const std::vector<Var>& v) { return add_scalar(v[0], f); }};
  });
  ops.emplace_back("bias_add", [&](Rng& r) {
    const Shape s = nchw(r);
    return GradCase{{random_tensor(r, s), random_tensor(r, {s[1]})},
                    [](const std::vector<Var>& v) { return bias_add(v[0], v[1]); }};
  });
  ops.emplace_back("concat_channels", [&](Rng& r) {
    const Shape s = nchw(r);
    const std::size_t parts = dim(r, 1, 3);
    GradCase c;
    for (std::size_t p = 0; p < parts; ++p) {
      Shape sp = s;
      sp[1] = dim(r, 1, 3);
      c.inputs.push_back(random_tensor(r, sp));
    }
    c.fn = [](const std::vector<Var>& v) { return concat_channels(v); };
    return c;
  });
  ops.emplace_back("mean_pool", [&](Rng& r) {
    const std::size_t w = dim(r, 1, 2);
    return GradCase{{random_tensor(r, nchw(r))}, [w](const std::vector<Var>& v) { return mean_pool(v[0], w); }};
  });
  ops.emplace_back("global_mean_pool", [&](Rng& r) {
    return GradCase{{random_tensor(r, nchw(r))}, [](const std::vector<Var>& v) { return global_mean_pool(v[0]); }};
  });
  ops.emplace_back("batch_norm", [&](Rng& r) {
    Shape s = nchw(r);
    s[0] = dim(r, 2, 3);
    return GradCase{{random_tensor(r, s, -2, 2), random_tensor(r, {s[1]}, 0.5, 1.5), random_tensor(r, {s[1]})},
                    [](const std::vector<Var>& v) { return batch_norm(v[0], v[1], v[2], 1e-5); }};
  });
  ops.emplace_back("channel_affine", [&](Rng& r) {
    const Shape s = nchw(r);
    return GradCase{{random_tensor(r, s), random_tensor(r, {s[1]}), random_tensor(r, {s[1]})},
                    [](const std::vector<Var>& v) { return channel_affine(v[0], v[1], v[2]); }};
  });
  ops.emplace_back("softmax", unary(softmax, -3, 3, {}));
  ops.emplace_back("log_softmax", unary(log_softmax, -3, 3, {}));
  ops.emplace_back("softmax_cross_entropy", [&](Rng& r) {
    const std::size_t n = dim(r, 1, 4), k = dim(r, 2, 5);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = r.below(k);
    return GradCase{{random_tensor(r, {n, k}, -3, 3)},
                    [labels](const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); }};
  });
  ops.emplace_back("clamp", [&](Rng& r) {
    Tensor x = random_tensor(r, {dim(r, 1, 4), dim(r, 1, 5)});
    avoid_kinks(x, {-0.5, 0.5}, 1e-3);
    return GradCase{{x}, [](const std::vector<Var>& v) { return clamp(v[0], -0.5, 0.5); }};
  });
  ops.emplace_back("softplus", unary(softplus, -4, 4, {}));
  ops.emplace_back("log", unary(bnnlab::log, 0.2, 3, {}));
  ops.emplace_back("exp", unary(bnnlab::exp, -2, 2, {}));
  ops.emplace_back("sum", unary(sum, -1, 1, {}));
  ops.emplace_back("mean", unary(mean, -1, 1, {}));
  ops.emplace_back("reshape", [&](Rng& r) {
    const std::size_t a = dim(r, 1, 4), b = dim(r, 1, 4);
    return GradCase{{random_tensor(r, {a, b})}, [a, b](const std::vector<Var>& v) { return reshape(v[0], {b, a}); }};
  });
  ops.emplace_back("resample", [&](Rng& r) {
    const double th = r.uniform(-0.4, 0.4), c = std::cos(th), s = std::sin(th);
    const std::array<double, 6> m{c, s, r.uniform(-1, 1), -s, c, r.uniform(-1, 1)};
    return GradCase{{random_tensor(r, nchw(r), 0, 1)}, [m](const std::vector<Var>& v) { return resample(v[0], m); }};
  });
  ops.emplace_back("kl_gaussian", [&](Rng& r) {
    const Shape s{dim(r, 1, 3), dim(r, 1, 4)};
    const double prior = r.uniform(0.1, 1.0);
    return GradCase{{random_tensor(r, s), random_tensor(r, s, -3, 1)},
                    [prior](const std::vector<Var>& v) { return kl_gaussian(v[0], v[1], prior); }};
  });

  std::vector<PrimitiveCheck> out;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    out.push_back({ops[i].first, cases, max_relative_error(ops[i].second, cases, derive_seed(seed, i), h)});
  }
  return out;
}

double kl_closed_form(double mu, double sigma, double sigma_p) {
  return std::log(sigma_p / sigma) + (sigma * sigma + mu * mu) / (2.0 * sigma_p * sigma_p) - 0.5;
}

void naive_conv2d(const std::vector<double>& in, const std::vector<double>& w, std::vector<double>& out,
                  std::size_t n, std::size_t c, std::size_t h, std::size_t wd, std::size_t o, std::size_t k,
                  std::size_t pad) {
  const long oh = static_cast<long>(h + 2 * pad) - static_cast<long>(k) + 1;
  const long ow = static_cast<long>(wd + 2 * pad) - static_cast<long>(k) + 1;
  out.assign(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (long y = 0; y < oh; ++y)
        for (long x = 0; x < ow; ++x) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = y + static_cast<long>(ky) - static_cast<long>(pad);
                const long ix = x + static_cast<long>(kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += in[((b * c + ic) * h + iy) * wd + ix] * w[((oc * c + ic) * k + ky) * k + kx];
              }
          out[((b * o + oc) * oh + y) * ow + x] = acc;
        }
}

void naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::vector<double>& c,
                  std::size_t n, std::size_t k, std::size_t m) {
  c.assign(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
      c[i * m + j] = acc;
    }
}

std::string drop_column(const std::string& csv, const std::string& column) {
  std::istringstream in(csv);
  std::string line, out;
  long drop = -1;
  bool header = true;
  while (std::getline(in, line)) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    fields.push_back(cur);
    if (header) {
      for (std::size_t i = 0; i < fields.size(); ++i)
        if (fields[i] == column) drop = static_cast<long>(i);
      header = false;
    }
    std::string kept;
    bool first = true;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (static_cast<long>(i) == drop) continue;
      if (!first) kept += ',';
      kept += fields[i];
      first = false;
    }
    out += kept + "\n";
  }
  return out;
}

}  // namespace oracle
