#include <cmath>

#include "bnnlab/error.hpp"
#include "bnnlab/rng.hpp"
#include "bnnlab/variational.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bnnlab;

TEST_CASE("sigma is softplus of rho") {
  Tensor rho = Tensor::vector({-30.0, -2.0, 0.0, 3.0, 40.0});
  Tensor s = sigma_from_rho(rho);
  for (std::size_t i = 0; i < rho.size(); ++i) {
    CHECK(s[i] > 0.0);
    CHECK(s[i] == doctest::Approx(std::log1p(std::exp(rho[i]))).epsilon(1e-14));
  }
}

TEST_CASE("rho from sigma inverts softplus") {
  for (double s : {1e-4, 0.05, 0.15, 1.0, 5.0}) {
    const double expected = std::log(std::expm1(s));
    CHECK(rho_from_sigma(s) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(softplus_scalar(rho_from_sigma(s)) == doctest::Approx(s).epsilon(1e-12));
  }
  CHECK(rho_from_sigma(0.15) == doctest::Approx(-1.82116).epsilon(1e-5));
  CHECK_THROWS_AS(rho_from_sigma(0.0), ConfigError);
  CHECK_THROWS_AS(rho_from_sigma(-1.0), ConfigError);
}

TEST_CASE("reparameterized samples have the posterior moments") {
  const std::size_t n = 100000;
  VariationalParam vp{Tensor({n}, 0.7), Tensor({n}, rho_from_sigma(0.3))};
  Rng rng(4);
  Tensor noise({n});
  rng.fill_normal(noise.data());
  Tensor w = sample_weights(vp, noise);
  double s = 0.0, s2 = 0.0;
  for (double x : w.values()) s += x;
  const double mean = s / n;
  for (double x : w.values()) s2 += (x - mean) * (x - mean);
  const double sd = std::sqrt(s2 / (n - 1));
  CHECK(std::abs(mean - 0.7) < 3.0 * 0.3 / std::sqrt(double(n)));
  CHECK(std::abs(sd - 0.3) < 3.0 * 0.3 / std::sqrt(2.0 * n));
}

TEST_CASE("sample gradient flows to mu and rho") {
  Tape tape;
  auto mu = tape.leaf(Tensor::vector({0.5, -0.2}));
  auto rho = tape.leaf(Tensor::vector({0.0, 1.0}));
  Tensor noise = Tensor::vector({1.5, -0.5});
  auto g = tape.backward(sum(sample_weights(mu, rho, noise)));
  CHECK(g[mu][0] == 1.0);
  CHECK(g[mu][1] == 1.0);
  // d softplus(rho) / d rho = sigmoid(rho)
  CHECK(g[rho][0] == doctest::Approx(1.5 * sigmoid_scalar(0.0)).epsilon(1e-14));
  CHECK(g[rho][1] == doctest::Approx(-0.5 * sigmoid_scalar(1.0)).epsilon(1e-14));
}

TEST_CASE("closed form kl matches the textbook expression") {
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const double mu = rng.uniform(-2, 2), sigma = rng.uniform(0.05, 2), sp = rng.uniform(0.1, 2);
    VariationalParam vp{Tensor::vector({mu}), Tensor::vector({rho_from_sigma(sigma)})};
    const double kl = kl_gaussian(vp, PriorSpec{sp});
    CHECK(kl == doctest::Approx(oracle::kl_closed_form(mu, sigma, sp)).epsilon(1e-10));
    CHECK(kl >= 0.0);
  }
}

TEST_CASE("kl vanishes at the prior and sums over elements") {
  VariationalParam at_prior{Tensor({5}, 0.0), Tensor({5}, rho_from_sigma(0.15))};
  CHECK(std::abs(kl_gaussian(at_prior, PriorSpec{0.15})) < 1e-12);

  VariationalParam two{Tensor::vector({1.0, -1.0}), Tensor::vector({rho_from_sigma(1.0), rho_from_sigma(1.0)})};
  CHECK(kl_gaussian(two, PriorSpec{1.0}) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("unit case gives one half") {
  VariationalParam vp{Tensor::vector({1.0}), Tensor::vector({rho_from_sigma(1.0)})};
  CHECK(kl_gaussian(vp, PriorSpec{1.0}) == 0.5);
}

TEST_CASE("monte carlo kl brackets the closed form") {
  Rng rng(21);
  int within = 0;
  for (int i = 0; i < 10; ++i) {
    const double mu = rng.uniform(-1, 1), sigma = rng.uniform(0.1, 1.5), sp = rng.uniform(0.2, 1.5);
    VariationalParam vp{Tensor::vector({mu}), Tensor::vector({rho_from_sigma(sigma)})};
    const auto mc = mc_kl(vp, PriorSpec{sp}, 20000, 100 + i);
    CHECK(mc.std_error > 0.0);
    if (std::abs(mc.estimate - kl_gaussian(vp, PriorSpec{sp})) < 3.0 * mc.std_error) ++within;
  }
  CHECK(within >= 9);
}

TEST_CASE("elbo combines cross entropy and weighted kl") {
  Var logits(Tensor({2, 2}, 0.0));
  std::vector<std::size_t> labels{0, 1};
  Var kl(Tensor::scalar(3.0));
  CHECK(elbo_loss(logits, labels, kl, 0.1).value().item() == doctest::Approx(std::log(2.0) + 0.3));
  CHECK(elbo_loss(logits, labels, kl, 0.0).value().item() == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(elbo_loss(logits, labels, kl, -0.1), ConfigError);
}

TEST_CASE("kl accumulator") {
  KLAccumulator acc;
  CHECK(acc.empty());
  acc.add(Var(Tensor::scalar(1.5)));
  acc.add(Var(Tensor::scalar(2.0)));
  CHECK_FALSE(acc.empty());
  CHECK(acc.total().value().item() == 3.5);
  acc.reset();
  CHECK(acc.empty());
  CHECK(acc.total().value().item() == 0.0);
}
