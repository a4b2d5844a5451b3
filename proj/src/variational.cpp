#include "bnnlab/variational.hpp"

#include <cfloat>
#include <cmath>

#include "bnnlab/error.hpp"
#include "bnnlab/rng.hpp"

namespace bnnlab {

Tensor sigma_from_rho(const Tensor& rho) {
  Tensor out(rho.shape());
  for (std::size_t i = 0; i < rho.size(); ++i) out[i] = std::max(softplus_scalar(rho[i]), DBL_TRUE_MIN);
  return out;
}

Var sigma_from_rho(const Var& rho) { return softplus(rho); }

double rho_from_sigma(double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("rho_from_sigma: sigma must be positive");
  // log(exp(s) - 1), rearranged to stay accurate for large s.
  return sigma + std::log(-std::expm1(-sigma));
}

Var sample_weights(const Var& mu, const Var& rho, const Tensor& noise) {
  if (mu.shape() != rho.shape() || noise.shape() != mu.shape()) {
    throw ShapeError("sample_weights: mu " + shape_str(mu.shape()) + ", rho " + shape_str(rho.shape()) +
                     " and noise " + shape_str(noise.shape()) + " must match");
  }
  return add(mu, mul(sigma_from_rho(rho), Var(noise)));
}

Tensor sample_weights(const VariationalParam& vp, const Tensor& noise) {
  return sample_weights(Var(vp.mu), Var(vp.rho), noise).value();
}

double kl_gaussian(const VariationalParam& vp, const PriorSpec& prior) {
  return kl_gaussian(Var(vp.mu), Var(vp.rho), prior).value().item();
}

Var kl_gaussian(const Var& mu, const Var& rho, const PriorSpec& prior) {
  return bnnlab::kl_gaussian(mu, rho, prior.sigma);
}

McEstimate mc_kl(const VariationalParam& vp, const PriorSpec& prior, std::size_t n_samples,
                 std::uint64_t seed) {
  if (n_samples < 2) throw ConfigError("mc_kl: need at least 2 samples");
  if (!(prior.sigma > 0.0)) throw ConfigError("mc_kl: prior sigma must be positive");
  if (vp.mu.shape() != vp.rho.shape()) throw ShapeError("mc_kl: mu and rho shapes differ");
  const Tensor sigma = sigma_from_rho(vp.rho);
  const double log_sp = std::log(prior.sigma);
  const double var_p = prior.sigma * prior.sigma;
  Rng rng(seed);
  double mean = 0.0, m2 = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    double log_ratio = 0.0;
    for (std::size_t i = 0; i < vp.size(); ++i) {
      const double z = rng.normal();
      const double w = vp.mu[i] + sigma[i] * z;
      const double log_q = -std::log(sigma[i]) - 0.5 * z * z;
      const double log_p = -log_sp - 0.5 * w * w / var_p;
      log_ratio += log_q - log_p;
    }
    // Welford update.
    const double delta = log_ratio - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (log_ratio - mean);
  }
  const double n = static_cast<double>(n_samples);
  const double variance = m2 / (n - 1.0);
  return {mean, std::sqrt(variance / n)};
}

Var elbo_loss(const Var& logits, std::span<const std::size_t> labels, const Var& kl_total,
              double beta) {
  if (!(beta >= 0.0)) throw ConfigError("elbo_loss: beta must be nonnegative");
  if (kl_total.value().size() != 1) throw ShapeError("elbo_loss: kl_total must be a scalar");
  const Var ce = softmax_cross_entropy(logits, labels);
  return add(ce, reshape(scale(kl_total, beta), ce.shape()));
}

void KLAccumulator::reset() {
  total_ = Var(Tensor::scalar(0.0));
  has_value_ = false;
}

void KLAccumulator::add(const Var& kl) {
  total_ = has_value_ ? bnnlab::add(total_, reshape(kl, {})) : reshape(kl, {});
  has_value_ = true;
}

Var KLAccumulator::total() const { return total_; }

}  // namespace bnnlab
