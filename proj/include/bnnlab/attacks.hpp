#pragma once

// White-box gradient attacks: FGSM, l-inf / l2 PGD and EOT variants.
//
// Every example runs on its own stream family derived from (seed, example
// index), so results do not depend on thread count or batch composition.
// Against Bayesian models each gradient averages several posterior draws.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnlab/model.hpp"
#include "bnnlab/rng.hpp"
#include "bnnlab/tensor.hpp"
#include "json.hpp"

namespace bnnlab {

enum class AttackKind { Fgsm, Pgd };
enum class Norm { Linf, L2 };

std::string_view attack_kind_name(AttackKind k);
std::string_view norm_name(Norm n);

struct EotConfig {
  std::size_t ensemble = 30;
  double rotation_deg = 10.0;   // uniform in [-r, r]
  double translation_px = 2.0;  // uniform integer shift in [-floor(t), floor(t)] per axis
};

struct AttackConfig {
  AttackKind kind = AttackKind::Pgd;
  Norm norm = Norm::Linf;
  double eps = 0.03;
  std::optional<double> alpha;  // default 2.5 * eps / iters
  std::size_t iters = 10;
  bool random_start = false;
  std::size_t grad_samples = 10;
  // Reuse the same posterior draws at every step instead of fresh ones.
  bool freeze_draws = false;
  std::optional<EotConfig> eot;

  static AttackConfig fgsm(double eps, std::size_t grad_samples = 10);
  static AttackConfig pgd(Norm norm, double eps, std::size_t iters, std::size_t grad_samples = 10);

  double step_size() const;
  // Throws ConfigError on eps < 0, alpha <= 0, iters < 1, grad_samples < 1,
  // non-l-inf FGSM, or an empty EOT ensemble.
  void validate() const;
};

nlohmann::json to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

struct AdvBatch {
  Tensor x_adv;
  std::vector<double> norms;  // attack-norm distance to the clean input
  std::vector<bool> success;  // posterior-mean prediction changed
};

// Gradient of the mean cross-entropy over the batch w.r.t. x, each example's
// term averaged over grad_samples posterior draws.
Tensor input_gradient(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                      std::size_t grad_samples, std::uint64_t seed);

AdvBatch fgsm(const Model& model, const Tensor& x, std::span<const std::size_t> labels, double eps,
              std::size_t grad_samples, std::uint64_t seed);
AdvBatch pgd(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
             const AttackConfig& cfg, std::uint64_t seed);
// Requires cfg.eot; each gradient is averaged over `ensemble` pairs of
// (random transform, posterior draw). The budget applies to the
// untransformed image.
AdvBatch eot_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackConfig& cfg, std::uint64_t seed);
// Dispatches on cfg.kind and cfg.eot.
AdvBatch run_attack(const Model& model, const Tensor& x, std::span<const std::size_t> labels,
                    const AttackConfig& cfg, std::uint64_t seed);

// delta * min(1, eps / ||delta||_2). A rank-1 tensor is one vector; otherwise
// each slice along the leading axis is projected separately.
Tensor project_l2(const Tensor& delta, double eps);

struct Transform {
  double rotation_deg = 0.0;
  double dx = 0.0;
  double dy = 0.0;

  bool identity() const { return rotation_deg == 0.0 && dx == 0.0 && dy == 0.0; }
};

Transform sample_transform(const EotConfig& cfg, Rng& rng);
// Inverse-mapping coefficients for the resample op: rotation about the
// image center followed by the shift.
std::array<double, 6> transform_affine(const Transform& t, std::size_t height, std::size_t width);
// Bilinear resampling with zero fill of [N, C, H, W] images; identity
// transforms return the input unchanged.
Tensor apply_transform(const Tensor& x, const Transform& t);
Var apply_transform(const Var& x, const Transform& t);

}  // namespace bnnlab
