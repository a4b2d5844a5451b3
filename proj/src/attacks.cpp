#include "bnnlab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>

#include "bnnlab/error.hpp"

namespace bnnlab {

std::string_view attack_kind_name(AttackKind k) { return k == AttackKind::Fgsm ? "fgsm" : "pgd"; }
std::string_view norm_name(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

AttackConfig AttackConfig::fgsm(double eps, std::size_t grad_samples) {
  AttackConfig c;
  c.kind = AttackKind::Fgsm;
  c.norm = Norm::Linf;
  c.eps = eps;
  c.iters = 1;
  c.grad_samples = grad_samples;
  return c;
}

AttackConfig AttackConfig::pgd(Norm norm, double eps, std::size_t iters, std::size_t grad_samples) {
  AttackConfig c;
  c.norm = norm;
  c.eps = eps;
  c.iters = iters;
  c.grad_samples = grad_samples;
  return c;
}

double AttackConfig::step_size() const {
  if (kind == AttackKind::Fgsm) return eps;
  return alpha.value_or(2.5 * eps / static_cast<double>(std::max<std::size_t>(iters, 1)));
}

void AttackConfig::validate() const {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("attack: eps must be finite and >= 0");
  if (iters < 1) throw ConfigError("attack: iters must be >= 1");
  if (grad_samples < 1) throw ConfigError("attack: grad_samples must be >= 1");
  if (alpha && !(*alpha > 0.0)) throw ConfigError("attack: alpha must be > 0");
  if (kind == AttackKind::Fgsm) {
    if (norm != Norm::Linf) throw ConfigError("attack: fgsm is defined for the linf norm only");
    if (iters != 1) throw ConfigError("attack: fgsm takes exactly one step");
    if (alpha && *alpha != eps) throw ConfigError("attack: fgsm step size is eps");
  }
  if (eot) {
    if (eot->ensemble < 1) throw ConfigError("attack: eot ensemble must be >= 1");
    if (!(eot->rotation_deg >= 0.0) || !(eot->translation_px >= 0.0))
      throw ConfigError("attack: eot ranges must be >= 0");
  }
}

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace

nlohmann::json to_json(const AttackConfig& cfg) {
  nlohmann::json j = {{"kind", attack_kind_name(cfg.kind)},
                      {"norm", norm_name(cfg.norm)},
                      {"eps", cfg.eps},
                      {"iters", cfg.iters},
                      {"random_start", cfg.random_start},
                      {"grad_samples", cfg.grad_samples},
                      {"freeze_draws", cfg.freeze_draws}};
  if (cfg.alpha) j["alpha"] = *cfg.alpha;
  if (cfg.eot) {
    j["eot"] = {{"ensemble", cfg.eot->ensemble},
                {"rotation_deg", cfg.eot->rotation_deg},
                {"translation_px", cfg.eot->translation_px}};
  }
  return j;
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"kind", "norm", "eps", "alpha", "iters", "random_start", "grad_samples", "freeze_draws", "eot"},
             "attack");
  try {
    AttackConfig c;
    const std::string kind = j.value("kind", "pgd");
    if (kind == "fgsm") {
      c = AttackConfig::fgsm(j.value("eps", c.eps));
    } else if (kind != "pgd") {
      throw ConfigError("attack: unknown kind '" + kind + "'");
    }
    const std::string norm = j.value("norm", "linf");
    if (norm == "l2") {
      c.norm = Norm::L2;
    } else if (norm != "linf") {
      throw ConfigError("attack: unknown norm '" + norm + "'");
    }
    c.eps = j.value("eps", c.eps);
    c.iters = j.value("iters", c.iters);
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    c.random_start = j.value("random_start", c.random_start);
    c.grad_samples = j.value("grad_samples", c.grad_samples);
    c.freeze_draws = j.value("freeze_draws", c.freeze_draws);
    if (j.contains("eot")) {
      const auto& e = j.at("eot");
      check_keys(e, {"ensemble", "rotation_deg", "translation_px"}, "attack.eot");
      EotConfig eot;
      eot.ensemble = e.value("ensemble", eot.ensemble);
      eot.rotation_deg = e.value("rotation_deg", eot.rotation_deg);
      eot.translation_px = e.value("translation_px", eot.translation_px);
      c.eot = eot;
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
}

// ---------------------------------------------------------------- transforms

Transform sample_transform(const EotConfig& cfg, Rng& rng) {
  Transform t;
  if (cfg.rotation_deg > 0.0) t.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  const auto shift = static_cast<std::uint64_t>(std::floor(cfg.translation_px));
  if (shift > 0) {
    t.dx = static_cast<double>(rng.below(2 * shift + 1)) - static_cast<double>(shift);
    t.dy = static_cast<double>(rng.below(2 * shift + 1)) - static_cast<double>(shift);
  }
  return t;
}

std::array<double, 6> transform_affine(const Transform& t, std::size_t height, std::size_t width) {
  const double theta = t.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  // source = R(theta) (dest - shift - center) + center
  return {c, s, cx - c * (t.dx + cx) - s * (t.dy + cy), -s, c, cy + s * (t.dx + cx) - c * (t.dy + cy)};
}

Var apply_transform(const Var& x, const Transform& t) {
  if (t.identity()) return x;
  if (x.shape().size() != 4) throw ShapeError("apply_transform: expected [N, C, H, W], got " + shape_str(x.shape()));
  return clamp(resample(x, transform_affine(t, x.shape()[2], x.shape()[3])), 0.0, 1.0);
}

Tensor apply_transform(const Tensor& x, const Transform& t) {
  if (t.identity()) return x;
  NoRecordGuard guard;
  return apply_transform(Var(x), t).value();
}

// ---------------------------------------------------------------- projection

namespace {

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

void project_l2_inplace(std::span<double> v, double eps) {
  const double n = l2_norm(v);
  if (n <= eps) return;
  const double f = eps / n;
  for (double& x : v) x *= f;
}

}  // namespace

Tensor project_l2(const Tensor& delta, double eps) {
  if (!(eps >= 0.0)) throw ConfigError("project_l2: eps must be >= 0");
  Tensor out = delta;
  if (out.empty()) return out;
  const std::size_t rows = out.rank() <= 1 ? 1 : out.dim(0);
  const std::size_t per = out.size() / rows;
  for (std::size_t r = 0; r < rows; ++r) project_l2_inplace(out.data().subspan(r * per, per), eps);
  return out;
}

// ---------------------------------------------------------------- gradients

namespace {

struct Streams {
  std::uint64_t weights_seed;
  Rng weights;
  Rng transform;
  Rng start;

  Streams(std::uint64_t seed, std::size_t example)
      : weights_seed(derive_seed(derive_seed(seed, example), "weights")),
        weights(weights_seed),
        transform(derive_seed(derive_seed(seed, example), "transform")),
        start(derive_seed(derive_seed(seed, example), "start")) {}
};

struct GradientContext {
  const Model& model;
  std::vector<Var> mean;  // shared posterior-mean weights
  std::vector<Tensor> sigmas;
  bool bayesian;
  std::size_t draws;
  const EotConfig* eot;

  GradientContext(const Model& m, std::size_t draws, const EotConfig* eot)
      : model(m), mean(mean_weights(m)), sigmas(posterior_sigmas(m)), bayesian(m.is_bayesian()), draws(draws), eot(eot) {
    const bool trivial_eot = !eot || (eot->rotation_deg == 0.0 && std::floor(eot->translation_px) == 0.0);
    // Identical members would all give the same gradient.
    if (!bayesian && trivial_eot) this->draws = 1;
  }

  // d CE(model(t(x)), y) / dx for one [1, C, H, W] example, averaged over
  // members.
  Tensor operator()(const Tensor& xi, std::size_t label, Streams& s) const {
    Tensor total;
    for (std::size_t k = 0; k < draws; ++k) {
      Tape tape;
      const Var x = tape.leaf(xi);
      Var input = x;
      if (eot) input = apply_transform(x, sample_transform(*eot, s.transform));
      const Var logits = bayesian ? model.run(sampled_weights(model, sigmas, s.weights), input) : model.run(mean, input);
      const Var loss = softmax_cross_entropy(logits, std::span<const std::size_t>(&label, 1));
      const GradientMap g = tape.backward(loss);
      Tensor gi = g.contains(x) ? g[x] : Tensor(xi.shape());
      if (k == 0) {
        total = std::move(gi);
      } else {
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += gi[i];
      }
    }
    if (draws > 1) {
      const double n = static_cast<double>(draws);
      for (double& v : total.data()) v /= n;
    }
    return total;
  }
};

Shape example_shape(const Tensor& x) {
  Shape s = x.shape();
  s[0] = 1;
  return s;
}

Tensor slice(const Tensor& x, std::size_t i) {
  const std::size_t per = x.size() / x.dim(0);
  return Tensor(example_shape(x), std::vector<double>(x.data().begin() + i * per, x.data().begin() + (i + 1) * per));
}

void check_batch(const Model& model, const Tensor& x, std::span<const std::size_t> labels) {
  model.check_input(x.shape());
  if (labels.size() != x.dim(0))
    throw ShapeError("attack: " + std::to_string(labels.size()) + " labels for " + std::to_string(x.dim(0)) +
                     " examples");
  for (auto y : labels)
    if (y >= model.spec().classes) throw ConfigError("attack: label " + std::to_string(y) + " out of range");
}

// Runs body(i) for every example, in parallel; rethrows the first failure.
template <class Body>
void for_each_example(std::size_t n, Body&& body) {
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(bnnlab_attack_failure)
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
}

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t k = t.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (t[row * k + j] > t[row * k + best]) best = j;
  return best;
}

AdvBatch finish(const Model& model, const Tensor& x, Tensor x_adv, Norm norm) {
  AdvBatch out;
  const std::size_t n = x.dim(0), per = x.size() / n;
  out.norms.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double d = std::abs(x_adv[j] - x[j]);
      acc = norm == Norm::Linf ? std::max(acc, d) : acc + d * d;
    }
    out.norms[i] = norm == Norm::Linf ? acc : std::sqrt(acc);
  }
  const Tensor clean = forward(model, x, SamplingMode::mean_only()).logits;
  const Tensor adv = forward(model, x_adv, SamplingMode::mean_only()).logits;
  out.success.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.success[i] = argmax_row(clean, i) != argmax_row(adv, i);
  out.x_adv = std::move(x_adv);
  return out;
}

AdvBatch attack_impl(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                     const AttackConfig& cfg, std::uint64_t seed, const EotConfig* eot) {
  cfg.validate();
  check_batch(model, x, labels);
  const std::size_t n = x.dim(0);
  if (cfg.eps == 0.0) return finish(model, x, x, cfg.norm);
  const std::size_t per = x.size() / n;
  const GradientContext grad(model, eot ? eot->ensemble : cfg.grad_samples, eot);
  const double eps = cfg.eps, alpha = cfg.step_size();
  Tensor x_adv(x.shape());

  for_each_example(n, [&](std::size_t i) {
    Streams s(seed, i);
    const Tensor x0 = slice(x, i);
    Tensor xt = x0;
    if (cfg.kind == AttackKind::Fgsm) {
      const Tensor g = grad(x0, labels[i], s);
      for (std::size_t j = 0; j < per; ++j) xt[j] = std::clamp(x0[j] + eps * sign(g[j]), 0.0, 1.0);
    } else {
      if (cfg.random_start) {
        if (cfg.norm == Norm::Linf) {
          for (std::size_t j = 0; j < per; ++j) xt[j] = std::clamp(x0[j] + s.start.uniform(-eps, eps), 0.0, 1.0);
        } else {
          std::vector<double> dir(per);
          s.start.fill_normal(dir);
          const double dn = l2_norm(dir);
          const double radius = eps * std::pow(s.start.uniform(), 1.0 / static_cast<double>(per));
          for (std::size_t j = 0; j < per; ++j)
            xt[j] = std::clamp(x0[j] + (dn > 0.0 ? dir[j] * radius / dn : 0.0), 0.0, 1.0);
        }
      }
      std::vector<double> delta(per);
      for (std::size_t t = 0; t < cfg.iters; ++t) {
        if (cfg.freeze_draws) s.weights = Rng(s.weights_seed);
        const Tensor g = grad(xt, labels[i], s);
        if (cfg.norm == Norm::Linf) {
          for (std::size_t j = 0; j < per; ++j) {
            const double stepped = std::clamp(xt[j] + alpha * sign(g[j]), x0[j] - eps, x0[j] + eps);
            xt[j] = std::clamp(stepped, 0.0, 1.0);
          }
        } else {
          const double gn = l2_norm(g.data());
          if (gn == 0.0) continue;
          for (std::size_t j = 0; j < per; ++j) delta[j] = xt[j] + alpha * (g[j] / gn) - x0[j];
          project_l2_inplace(delta, eps);
          for (std::size_t j = 0; j < per; ++j) xt[j] = std::clamp(x0[j] + delta[j], 0.0, 1.0);
        }
      }
    }
    std::copy(xt.data().begin(), xt.data().end(), x_adv.data().begin() + i * per);
  });
  return finish(model, x, std::move(x_adv), cfg.norm);
}

}  // namespace

Tensor input_gradient(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                      std::size_t grad_samples, std::uint64_t seed) {
  if (grad_samples < 1) throw ConfigError("input_gradient: grad_samples must be >= 1");
  check_batch(model, x, labels);
  const std::size_t n = x.dim(0), per = x.size() / n;
  const GradientContext grad(model, grad_samples, nullptr);
  Tensor out(x.shape());
  for_each_example(n, [&](std::size_t i) {
    Streams s(seed, i);
    const Tensor g = grad(slice(x, i), labels[i], s);
    for (std::size_t j = 0; j < per; ++j) out[i * per + j] = g[j] / static_cast<double>(n);
  });
  return out;
}

AdvBatch fgsm(const Model& model, const Tensor& x, std::span<const std::size_t> labels, double eps,
              std::size_t grad_samples, std::uint64_t seed) {
  return attack_impl(model, x, labels, AttackConfig::fgsm(eps, grad_samples), seed, nullptr);
}

AdvBatch pgd(const Model& model, const Tensor& x, std::span<const std::size_t> labels, const AttackConfig& cfg,
             std::uint64_t seed) {
  if (cfg.kind != AttackKind::Pgd) throw ConfigError("pgd: config kind is not pgd");
  return attack_impl(model, x, labels, cfg, seed, nullptr);
}

AdvBatch eot_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackConfig& cfg, std::uint64_t seed) {
  if (!cfg.eot) throw ConfigError("eot_attack: config has no eot settings");
  return attack_impl(model, x, labels, cfg, seed, &*cfg.eot);
}

AdvBatch run_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackConfig& cfg, std::uint64_t seed) {
  if (cfg.eot) return eot_attack(model, x, labels, cfg, seed);
  if (cfg.kind == AttackKind::Fgsm) return fgsm(model, x, labels, cfg.eps, cfg.grad_samples, seed);
  return pgd(model, x, labels, cfg, seed);
}

}  // namespace bnnlab
