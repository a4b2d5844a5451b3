#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bnnlab/error.hpp"
#include "bnnlab/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bnnlab;
namespace fs = std::filesystem;

namespace {

ModelSpec small_spec(bool bayesian) {
  ModelSpec s;
  s.channels = 1;
  s.height = 5;
  s.width = 5;
  s.classes = 2;
  s.layers = {LayerSpec::conv(2, 3, bayesian), LayerSpec::relu(), LayerSpec::global_pool(),
              LayerSpec::linear(2, bayesian)};
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "bnnlab_test_model";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("parameter counts") {
  // conv 2x1x3x3 + 2, linear 2x2 + 2
  CHECK(build_model(small_spec(false), 1).parameter_count() == 26);
  // Bayesian tensors carry mu and rho.
  CHECK(build_model(small_spec(true), 1).parameter_count() == 52);
  CHECK(bayesian_scalar_count(build_model(small_spec(true), 1)) == 26);
  CHECK(bayesian_scalar_count(build_model(small_spec(false), 1)) == 0);
}

TEST_CASE("dense blocks concatenate every unit output") {
  ModelSpec s;
  s.channels = 1;
  s.height = s.width = 6;
  s.classes = 3;
  s.layers = {LayerSpec::conv(4),
              LayerSpec::dense_block(3, {LayerSpec::norm(), LayerSpec::relu(), LayerSpec::conv(2)}),
              LayerSpec::global_pool(), LayerSpec::linear(3)};
  Model m = build_model(s, 3);
  std::vector<Shape> conv_weights;
  for (const auto& p : m.parameters())
    if (p.mu.rank() == 4) conv_weights.push_back(p.mu.shape());
  REQUIRE(conv_weights.size() == 4);
  // Unit d sees the stem plus d earlier units.
  for (std::size_t d = 0; d < 3; ++d) CHECK(conv_weights[d + 1] == Shape{2, 4 + 2 * d, 3, 3});
  CHECK(m.parameters()[m.parameters().size() - 2].mu.shape() == Shape{10, 3});
  CHECK(m.norm_buffers().size() == 3);
}

TEST_CASE("preset architectures build and classify") {
  for (bool bayes : {false, true}) {
    Model plain = build_model(plain_cnn_spec(1, 8, 4, bayes, {8, 6, 2, 1}), 1);
    Model dense = build_model(mini_dense_spec(3, 8, 4, bayes, {8, 6, 2, 2}), 1);
    CHECK(plain.is_bayesian() == bayes);
    CHECK(dense.is_bayesian() == bayes);
    Rng r(2);
    auto x1 = oracle::random_tensor(r, {3, 1, 8, 8}, 0, 1);
    auto x3 = oracle::random_tensor(r, {3, 3, 8, 8}, 0, 1);
    CHECK(forward(plain, x1, SamplingMode::mean_only()).logits.shape() == Shape{3, 4});
    CHECK(forward(dense, x3, SamplingMode::mean_only()).logits.shape() == Shape{3, 4});
    CHECK_THROWS_AS(forward(plain, x3, SamplingMode::mean_only()), ShapeError);
  }
}

TEST_CASE("builds are seed deterministic") {
  auto a = build_model(small_spec(true), 9), b = build_model(small_spec(true), 9),
       c = build_model(small_spec(true), 10);
  CHECK(a.parameters()[0].mu == b.parameters()[0].mu);
  CHECK_FALSE(a.parameters()[0].mu == c.parameters()[0].mu);
  for (const auto& p : a.parameters()) {
    const Tensor sigma = sigma_from_rho(*p.rho);
    for (double s : sigma.values()) CHECK(s == doctest::Approx(0.15).epsilon(1e-12));
  }
}

TEST_CASE("sampled forward passes are reproducible and vary with the seed") {
  Model m = build_model(small_spec(true), 4);
  Rng r(5);
  auto x = oracle::random_tensor(r, {4, 1, 5, 5}, 0, 1);
  auto a = forward(m, x, SamplingMode::sample(1)).logits;
  CHECK(a == forward(m, x, SamplingMode::sample(1)).logits);
  CHECK_FALSE(a == forward(m, x, SamplingMode::sample(2)).logits);
  CHECK(forward(m, x, SamplingMode::sample(1)).kl_total == doctest::Approx(model_kl(m)));
}

TEST_CASE("ensemble prediction") {
  Model m = build_model(small_spec(true), 4);
  Rng r(6);
  auto x = oracle::random_tensor(r, {5, 1, 5, 5}, 0, 1);
  auto one = predict_ensemble(m, x, 1, 77);
  auto logits = forward(m, x, SamplingMode::sample(77)).logits;
  CHECK(one == softmax(Var(logits)).value());
  auto many = predict_ensemble(m, x, 16, 77);
  for (std::size_t i = 0; i < 5; ++i) CHECK(many[2 * i] + many[2 * i + 1] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(predict_ensemble(m, x, 0, 1), ConfigError);

  Model det = build_model(small_spec(false), 4);
  CHECK(predict_ensemble(det, x, 1, 1) == predict_ensemble(det, x, 9, 2));
}

TEST_CASE("invalid specs are rejected") {
  auto s = small_spec(false);
  s.classes = 3;
  CHECK_THROWS_AS(build_model(s, 1), ShapeError);
  s = small_spec(false);
  s.layers.insert(s.layers.begin() + 1, LayerSpec::relu());
  s.layers[1].bayesian = true;
  CHECK_THROWS_AS(build_model(s, 1), ConfigError);
  s = small_spec(false);
  s.layers[0].kernel = 9;
  s.layers[0].pad = 0;
  CHECK_THROWS_AS(build_model(s, 1), ShapeError);
  s = small_spec(false);
  s.layers.clear();
  CHECK_THROWS_AS(build_model(s, 1), ConfigError);
  s = small_spec(false);
  s.prior.sigma = 0.0;
  CHECK_THROWS_AS(build_model(s, 1), ConfigError);
}

TEST_CASE("spec json round trip and unknown keys") {
  auto s = mini_dense_spec(3, 8, 4, true, {8, 6, 2, 2});
  auto j = to_json(s);
  CHECK(to_json(model_spec_from_json(j)) == j);
  auto bad = j;
  bad["layers"][0]["stride"] = 2;
  CHECK_THROWS_AS(model_spec_from_json(bad), ConfigError);
  bad = j;
  bad["colour"] = true;
  CHECK_THROWS_AS(model_spec_from_json(bad), ConfigError);
}

TEST_CASE("checkpoint round trip is exact") {
  Model m = build_model(mini_dense_spec(1, 8, 3, true, {6, 4, 2, 1}), 8);
  m.buffers()[0].value[0] = 0.125;
  m.metadata()["note"] = "x";
  const auto path = scratch("rt.bnnl");
  save_checkpoint(m, path.string());
  Model back = load_checkpoint(path.string());
  CHECK(to_json(back.spec()) == to_json(m.spec()));
  CHECK(back.metadata()["note"] == "x");
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK(back.parameters()[i].mu == m.parameters()[i].mu);
    CHECK(*back.parameters()[i].rho == *m.parameters()[i].rho);
  }
  for (std::size_t i = 0; i < m.buffers().size(); ++i) CHECK(back.buffers()[i].value == m.buffers()[i].value);
  // Saving the reloaded model reproduces the same bytes.
  const auto again = scratch("rt2.bnnl");
  save_checkpoint(back, again.string());
  CHECK(slurp(path) == slurp(again));
}

TEST_CASE("damaged checkpoints are rejected") {
  Model m = build_model(small_spec(true), 8);
  const auto path = scratch("dmg.bnnl");
  save_checkpoint(m, path.string());
  const std::string good = slurp(path);
  const auto bad = scratch("bad.bnnl");

  spit(bad, good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(bad.string()), FormatError);

  std::string flipped = good;
  flipped[flipped.size() - 20] ^= 0x01;
  spit(bad, flipped);
  CHECK_THROWS_AS(load_checkpoint(bad.string()), FormatError);

  std::string version = good;
  version[4] = 9;
  spit(bad, version);
  try {
    load_checkpoint(bad.string());
    FAIL("expected a version error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version") != std::string::npos);
  }

  std::string magic = good;
  magic[0] = 'X';
  spit(bad, magic);
  CHECK_THROWS_AS(load_checkpoint(bad.string()), FormatError);
  CHECK_THROWS_AS(load_checkpoint(scratch("absent.bnnl").string()), Error);
}

TEST_CASE("parameter gradients through sampled weights match finite differences") {
  // No relu, so the loss is smooth in every parameter.
  ModelSpec s;
  s.channels = 1;
  s.height = s.width = 4;
  s.classes = 3;
  s.layers = {LayerSpec::conv(2, 3, true), LayerSpec::global_pool(), LayerSpec::linear(3, true)};
  Model m = build_model(s, 2);
  Rng r(3);
  auto x = oracle::random_tensor(r, {3, 1, 4, 4}, 0, 1);
  std::vector<std::size_t> labels{0, 2, 1};

  auto loss_at = [&](const Model& model, GradientMap* grads, TrainableWeights* out) {
    Tape tape;
    Rng draw(55);
    auto tw = trainable_weights(model, tape, &draw);
    auto loss = add(softmax_cross_entropy(model.run(tw.weights, Var(x)), labels), scale(model_kl(model, tw), 0.01));
    if (grads) *grads = tape.backward(loss);
    if (out) *out = tw;
    return loss.value().item();
  };
  GradientMap g;
  TrainableWeights tw;
  loss_at(m, &g, &tw);
  const double h = 1e-6;
  for (std::size_t k = 0; k < m.parameters().size(); ++k) {
    for (bool rho : {false, true}) {
      const Tensor& analytic = g[rho ? tw.rho[k] : tw.mu[k]];
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        Model plus = m, minus = m;
        auto& tp = rho ? *plus.parameters()[k].rho : plus.parameters()[k].mu;
        auto& tm = rho ? *minus.parameters()[k].rho : minus.parameters()[k].mu;
        tp[i] += h;
        tm[i] -= h;
        const double fd = (loss_at(plus, nullptr, nullptr) - loss_at(minus, nullptr, nullptr)) / (2 * h);
        CHECK(analytic[i] == doctest::Approx(fd).epsilon(1e-6).scale(1e-3));
      }
    }
  }
}
