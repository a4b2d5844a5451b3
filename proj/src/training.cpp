#include "bnnlab/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "bnnlab/error.hpp"

namespace bnnlab {

AdamState::AdamState(AdamConfig cfg, std::span<const Tensor* const> params) : config(cfg) {
  for (const Tensor* p : params) {
    m.emplace_back(p->shape());
    v.emplace_back(p->shape());
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter and gradient counts differ");
  if (state.m.empty() && !params.empty()) state = AdamState(state.config, params);
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  const AdamConfig& c = state.config;
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    const Tensor& g = grads[p];
    Tensor& m = state.m[p];
    Tensor& v = state.v[p];
    if (g.shape() != theta.shape() || m.shape() != theta.shape())
      throw ShapeError("adam_step: shape mismatch at parameter " + std::to_string(p));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(adam.lr > 0.0)) throw ConfigError("train: lr must be > 0");
  if (!(beta_kl >= 0.0)) throw ConfigError("train: beta_kl must be >= 0");
  if (adversarial) adversarial->validate();
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = {{"epochs", cfg.epochs},
                      {"batch_size", cfg.batch_size},
                      {"lr", cfg.adam.lr},
                      {"beta_kl", cfg.beta_kl},
                      {"kl_reduction", cfg.kl_reduction == KlReduction::Mean ? "mean" : "sum"}};
  if (cfg.adversarial) j["adversarial"] = to_json(*cfg.adversarial);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "epochs" && key != "batch_size" && key != "lr" && key != "beta_kl" && key != "kl_reduction" &&
        key != "adversarial")
      throw ConfigError("train: unknown key '" + key + "'");
  }
  try {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.beta_kl = j.value("beta_kl", c.beta_kl);
    const std::string red = j.value("kl_reduction", std::string("mean"));
    if (red == "sum") {
      c.kl_reduction = KlReduction::Sum;
    } else if (red != "mean") {
      throw ConfigError("train: kl_reduction must be 'mean' or 'sum'");
    }
    if (j.contains("adversarial") && !j.at("adversarial").is_null())
      c.adversarial = attack_config_from_json(j.at("adversarial"));
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
}

std::string TrainReport::to_csv(bool with_time) const {
  std::string out = with_time ? "epoch,loss,acc,kl,seconds\n" : "epoch,loss,acc,kl\n";
  char buf[160];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g", e.epoch, e.loss, e.accuracy, e.kl);
    out += buf;
    if (with_time) {
      std::snprintf(buf, sizeof buf, ",%.3f", e.seconds);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

std::vector<std::size_t> argmax_rows(const Tensor& probs) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (probs[i * k + j] > probs[i * k + best]) best = j;
    out[i] = best;
  }
  return out;
}

namespace {

constexpr std::size_t kEvalChunk = 256;

std::vector<std::size_t> chunk_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

Tensor predict_dataset(const Model& model, const Dataset& data, std::size_t n_samples, std::uint64_t seed) {
  if (data.size() == 0) throw ConfigError("predict: empty dataset");
  const std::size_t k = model.spec().classes;
  Tensor out({data.size(), k});
  for (std::size_t begin = 0, c = 0; begin < data.size(); begin += kEvalChunk, ++c) {
    const auto idx = chunk_indices(begin, std::min(begin + kEvalChunk, data.size()));
    const Tensor p = predict_ensemble(model, data.gather(idx), n_samples, derive_seed(seed, c));
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + begin * k);
  }
  return out;
}

double evaluate(const Model& model, const Dataset& data, const AttackConfig* attack, std::size_t n_samples,
                std::uint64_t seed, std::uint64_t attack_seed) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  std::size_t correct = 0;
  for (std::size_t begin = 0, c = 0; begin < data.size(); begin += kEvalChunk, ++c) {
    const auto idx = chunk_indices(begin, std::min(begin + kEvalChunk, data.size()));
    Tensor x = data.gather(idx);
    const auto y = data.gather_labels(idx);
    if (attack) x = run_attack(model, x, y, *attack, derive_seed(attack_seed, c)).x_adv;
    const auto pred = argmax_rows(predict_ensemble(model, x, n_samples, derive_seed(seed, c)));
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainReport train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("train: empty dataset");
  model.check_input(data.images.shape());
  if (data.class_count != model.spec().classes)
    throw ConfigError("train: dataset has " + std::to_string(data.class_count) + " classes, model expects " +
                      std::to_string(model.spec().classes));

  auto& params = model.parameters();
  std::vector<Tensor*> slots;
  for (auto& p : params) {
    slots.push_back(&p.mu);
    if (p.bayesian()) slots.push_back(&*p.rho);
  }
  AdamState adam(cfg.adam, slots);
  const bool bayesian = model.is_bayesian();
  const double kl_scale =
      cfg.kl_reduction == KlReduction::Mean && bayesian
          ? 1.0 / static_cast<double>(bayesian_scalar_count(model))
          : 1.0;
  const double momentum = model.spec().norm_momentum;
  const std::uint64_t shuffle_seed = derive_seed(cfg.seed, "shuffle");
  const std::uint64_t draw_seed = derive_seed(cfg.seed, "draw");
  const std::uint64_t attack_seed = derive_seed(cfg.seed, "attack");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport report;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(shuffle_seed, epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0, b = 0; begin < order.size(); begin += cfg.batch_size, ++b) {
      const std::span<const std::size_t> idx(order.data() + begin, std::min(cfg.batch_size, order.size() - begin));
      Tensor x = data.gather(idx);
      const auto y = data.gather_labels(idx);
      const std::uint64_t batch_key = derive_seed(epoch, b);
      if (cfg.adversarial) x = run_attack(model, x, y, *cfg.adversarial, derive_seed(attack_seed, batch_key)).x_adv;

      Tape tape;
      Rng draw(derive_seed(draw_seed, batch_key));
      const TrainableWeights tw = trainable_weights(model, tape, bayesian ? &draw : nullptr);
      std::vector<BatchStatistics> stats;
      const Var logits = model.run(tw.weights, Var(x), PassOptions{NormMode::Batch, &stats});
      const Var kl = bayesian ? scale(model_kl(model, tw), kl_scale) : Var(Tensor::scalar(0.0));
      const Var loss = elbo_loss(logits, y, kl, cfg.beta_kl);
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b));
      }
      const GradientMap g = tape.backward(loss);
      std::vector<Tensor> grads;
      for (std::size_t p = 0; p < params.size(); ++p) {
        grads.push_back(g.contains(tw.mu[p]) ? g[tw.mu[p]] : Tensor(params[p].mu.shape()));
        if (params[p].bayesian())
          grads.push_back(g.contains(tw.rho[p]) ? g[tw.rho[p]] : Tensor(params[p].mu.shape()));
      }
      adam_step(slots, grads, adam);

      auto& buffers = model.buffers();
      for (std::size_t l = 0; l < stats.size(); ++l) {
        const auto [mi, vi] = model.norm_buffers()[l];
        Tensor& rm = buffers[mi].value;
        Tensor& rv = buffers[vi].value;
        for (std::size_t c = 0; c < rm.size(); ++c) {
          rm[c] = (1.0 - momentum) * rm[c] + momentum * stats[l].mean[c];
          rv[c] = (1.0 - momentum) * rv[c] + momentum * stats[l].var[c];
        }
      }
      loss_sum += lv;
      ++batches;
    }
    EpochStats e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(batches);
    e.accuracy = evaluate(model, data, nullptr, 4, derive_seed(cfg.seed, "epoch-eval"));
    e.kl = model_kl(model);
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(e);
  }
  return report;
}

}  // namespace bnnlab
