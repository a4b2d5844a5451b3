#include <cmath>
#include <set>

#include "bnnlab/error.hpp"
#include "bnnlab/kernels.hpp"
#include "bnnlab/rng.hpp"
#include "bnnlab/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bnnlab;

TEST_CASE("tensor construction and access") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t[5] == 1.5);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(all_finite(t));
  t[0] = std::nan("");
  CHECK_FALSE(all_finite(t));
}

TEST_CASE("rng streams are deterministic and seed dependent") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    CHECK(x == b.next());
    differs = differs || x != c.next();
  }
  CHECK(differs);
}

TEST_CASE("derived seeds do not collide for nearby inputs") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(7, i));
  seen.insert(derive_seed(7, "weights"));
  seen.insert(derive_seed(7, "transform"));
  CHECK(seen.size() == 1002);
}

TEST_CASE("rng distributions") {
  Rng r(3);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  bool in_range = true;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    in_range = in_range && u >= 0.0 && u < 1.0;
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  CHECK(in_range);
  const double mean = s / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 3.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) counts[r.below(7)]++;
  for (int c : counts) CHECK(std::abs(c - 10000) < 400);
}

namespace {

std::vector<double> random_vec(Rng& r, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(-1, 1);
  return v;
}

}  // namespace

TEST_CASE("serial conv matches the naive reference") {
  Rng r(5);
  for (int trial = 0; trial < 20; ++trial) {
    kernels::ConvGeometry g{1 + r.below(3), 1 + r.below(3), 3 + r.below(5), 3 + r.below(5), 1 + r.below(4),
                            1 + 2 * r.below(2), 0};
    g.pad = r.below(g.kernel / 2 + 1);
    const auto in = random_vec(r, g.batch * g.in_channels * g.height * g.width);
    const auto w = random_vec(r, g.out_channels * g.in_channels * g.kernel * g.kernel);
    std::vector<double> ref, out(g.batch * g.out_channels * g.out_height() * g.out_width());
    oracle::naive_conv2d(in, w, ref, g.batch, g.in_channels, g.height, g.width, g.out_channels, g.kernel, g.pad);
    kernels::serial::conv2d_forward(g, in, w, out);
    REQUIRE(ref.size() == out.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("serial matmul variants match the naive reference") {
  Rng r(6);
  const std::size_t n = 5, k = 7, m = 3;
  const auto a = random_vec(r, n * k), b = random_vec(r, k * m);
  std::vector<double> ref, c(n * m);
  oracle::naive_matmul(a, b, ref, n, k, m);
  kernels::serial::matmul(a, b, c, n, k, m);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // a[n,k] * b^T where bt[m,k]
  std::vector<double> bt(m * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + i] = b[i * m + j];
  std::vector<double> c2(n * m);
  kernels::serial::matmul_nt(a, bt, c2, n, k, m);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c2[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // at^T * b where at[k,n]
  std::vector<double> at(k * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) at[j * n + i] = a[i * k + j];
  std::vector<double> c3(n * m);
  kernels::serial::matmul_tn(at, b, c3, k, n, m);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c3[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("parallel kernels agree with serial bitwise at every thread count") {
  Rng r(8);
  const int saved = kernels::max_threads();
  for (int threads : {1, 2, 4}) {
    kernels::set_max_threads(threads);
    // Large enough to cross the parallel threshold.
    kernels::ConvGeometry g{4, 6, 12, 12, 8, 3, 1};
    const auto in = random_vec(r, g.batch * g.in_channels * g.height * g.width);
    const auto w = random_vec(r, g.out_channels * g.in_channels * 9);
    const auto go = random_vec(r, g.batch * g.out_channels * g.out_height() * g.out_width());
    std::vector<double> s1(go.size()), p1(go.size()), s2(in.size()), p2(in.size()), s3(w.size()), p3(w.size());
    kernels::serial::conv2d_forward(g, in, w, s1);
    kernels::parallel::conv2d_forward(g, in, w, p1);
    kernels::serial::conv2d_backward_input(g, go, w, s2);
    kernels::parallel::conv2d_backward_input(g, go, w, p2);
    kernels::serial::conv2d_backward_weight(g, in, go, s3);
    kernels::parallel::conv2d_backward_weight(g, in, go, p3);
    CHECK(s1 == p1);
    CHECK(s2 == p2);
    CHECK(s3 == p3);

    const std::size_t n = 64, k = 48, m = 40;
    const auto a = random_vec(r, n * k), b = random_vec(r, k * m), bt = random_vec(r, m * k), at = random_vec(r, k * n);
    std::vector<double> sm(n * m), pm(n * m);
    kernels::serial::matmul(a, b, sm, n, k, m);
    kernels::parallel::matmul(a, b, pm, n, k, m);
    CHECK(sm == pm);
    kernels::serial::matmul_nt(a, bt, sm, n, k, m);
    kernels::parallel::matmul_nt(a, bt, pm, n, k, m);
    CHECK(sm == pm);
    kernels::serial::matmul_tn(at, b, sm, k, n, m);
    kernels::parallel::matmul_tn(at, b, pm, k, n, m);
    CHECK(sm == pm);
  }
  kernels::set_max_threads(saved);
}

TEST_CASE("conv backward kernels are adjoint to the forward kernel") {
  // <conv(x, w), y> == <x, conv_bwd_input(y, w)> == <w, conv_bwd_weight(x, y)>
  Rng r(9);
  kernels::ConvGeometry g{2, 3, 6, 5, 4, 3, 1};
  const auto x = random_vec(r, g.batch * g.in_channels * g.height * g.width);
  const auto w = random_vec(r, g.out_channels * g.in_channels * 9);
  const auto y = random_vec(r, g.batch * g.out_channels * g.out_height() * g.out_width());
  std::vector<double> fx(y.size()), bx(x.size()), bw(w.size());
  kernels::serial::conv2d_forward(g, x, w, fx);
  kernels::serial::conv2d_backward_input(g, y, w, bx);
  kernels::serial::conv2d_backward_weight(g, x, y, bw);
  double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < y.size(); ++i) a += fx[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) b += x[i] * bx[i];
  for (std::size_t i = 0; i < w.size(); ++i) c += w[i] * bw[i];
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK(a == doctest::Approx(c).epsilon(1e-12));
}
