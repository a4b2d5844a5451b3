#include <cmath>

#include "bnnlab/autodiff.hpp"
#include "bnnlab/error.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bnnlab;

TEST_CASE("every primitive matches central differences") {
  const auto checks = oracle::check_all_primitives(20, 17);
  CHECK(checks.size() == 26);
  for (const auto& c : checks) {
    INFO(c.op);
    CHECK(c.cases == 20);
    CHECK(c.max_rel_error < 1e-6);
  }
}

TEST_CASE("relu subgradient at zero is zero") {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({-1.0, 0.0, 2.0}));
  auto g = tape.backward(sum(relu(x)));
  CHECK(g[x].values() == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("clamp passes gradient only strictly inside the interval") {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({-0.5, 0.0, 0.5, 1.0, 1.5}));
  auto g = tape.backward(sum(clamp(x, 0.0, 1.0)));
  CHECK(g[x][0] == 0.0);
  CHECK(g[x][2] == 1.0);
  CHECK(g[x][4] == 0.0);
}

TEST_CASE("gradients accumulate over reused inputs") {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({2.0, -3.0}));
  // d/dx sum(x*x + 3x) = 2x + 3
  auto y = add(mul(x, x), scale(x, 3.0));
  auto g = tape.backward(sum(y));
  CHECK(g[x][0] == doctest::Approx(7.0));
  CHECK(g[x][1] == doctest::Approx(-3.0));
}

TEST_CASE("leaves unused by the loss get no gradient entry") {
  Tape tape;
  auto a = tape.leaf(Tensor::vector({1.0}));
  auto b = tape.leaf(Tensor::vector({1.0}));
  auto g = tape.backward(sum(scale(a, 2.0)));
  CHECK(g.contains(a));
  CHECK_FALSE(g.contains(b));
}

TEST_CASE("backward rejects non-scalar and foreign losses") {
  Tape tape, other;
  auto x = tape.leaf(Tensor::vector({1.0, 2.0}));
  CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ShapeError);
  auto y = other.leaf(Tensor::scalar(1.0));
  CHECK_THROWS_AS(tape.backward(mul(y, y)), Error);
  CHECK_THROWS_AS(tape.backward(Var(Tensor::scalar(1.0))), Error);
}

TEST_CASE("no-record guard yields untracked results") {
  Tape tape;
  auto x = tape.leaf(Tensor::vector({1.0}));
  {
    NoRecordGuard guard;
    CHECK_FALSE(recording_enabled());
    CHECK_FALSE(scale(x, 2.0).tracked());
  }
  CHECK(recording_enabled());
  CHECK(scale(x, 2.0).tracked());
}

TEST_CASE("shape mismatches are reported") {
  Var a(Tensor({2, 3}, 1.0)), b(Tensor({4, 2}, 1.0));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  Var logits(Tensor({2, 3}, 0.0));
  std::vector<std::size_t> bad{0, 3};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, bad), Error);
  std::vector<std::size_t> short_labels{0};
  CHECK_THROWS_AS(softmax_cross_entropy(logits, short_labels), ShapeError);
}

TEST_CASE("generic apply rejects leaf and wrong arity") {
  Var a(Tensor::vector({1.0}));
  std::vector<Var> one{a};
  CHECK_THROWS_AS(bnnlab::apply(OpKind::Leaf, one), Error);
  CHECK_THROWS_AS(bnnlab::apply(OpKind::MatMul, one), Error);
}

TEST_CASE("softmax cross entropy value") {
  // Uniform logits over k classes give log k.
  Var logits(Tensor({3, 4}, 0.25));
  std::vector<std::size_t> labels{0, 1, 3};
  CHECK(softmax_cross_entropy(logits, labels).value().item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("finite difference helper on a quadratic") {
  auto f = [](const Tensor& t) { return t[0] * t[0] + 3.0 * t[1]; };
  auto g = finite_difference_grad(f, Tensor::vector({1.0, 2.0}), 1e-5);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(3.0).epsilon(1e-8));
}

TEST_CASE("relu propagates nan") {
  Var x(Tensor::vector({std::nan(""), -1.0}));
  auto y = relu(x).value();
  CHECK(std::isnan(y[0]));
  CHECK(y[1] == 0.0);
}
