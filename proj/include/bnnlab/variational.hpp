#pragma once

// Gaussian variational posteriors over weight tensors: sigma = softplus(rho),
// reparameterized sampling w = mu + sigma * noise, closed-form KL against a
// zero-mean Gaussian prior, and a Monte-Carlo KL estimator used as an oracle.

#include <cstdint>
#include <span>

#include "bnnlab/autodiff.hpp"
#include "bnnlab/tensor.hpp"

namespace bnnlab {

struct PriorSpec {
  double sigma = 0.15;
};

struct VariationalParam {
  Tensor mu;
  Tensor rho;

  const Shape& shape() const { return mu.shape(); }
  std::size_t size() const { return mu.size(); }
};

// Elementwise softplus, floored at the smallest positive double.
Tensor sigma_from_rho(const Tensor& rho);
Var sigma_from_rho(const Var& rho);
// Inverse of softplus: the rho for which sigma_from_rho(rho) == sigma.
double rho_from_sigma(double sigma);

// w = mu + softplus(rho) * noise; differentiable through mu and rho.
Var sample_weights(const Var& mu, const Var& rho, const Tensor& noise);
Tensor sample_weights(const VariationalParam& vp, const Tensor& noise);

double kl_gaussian(const VariationalParam& vp, const PriorSpec& prior);
Var kl_gaussian(const Var& mu, const Var& rho, const PriorSpec& prior);

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

// (1/N) sum_i [log q(w_i) - log p(w_i)] with w_i ~ q, plus its standard error.
McEstimate mc_kl(const VariationalParam& vp, const PriorSpec& prior, std::size_t n_samples,
                 std::uint64_t seed);

// Mean cross-entropy + beta * kl_total.
Var elbo_loss(const Var& logits, std::span<const std::size_t> labels, const Var& kl_total,
              double beta);

// Running sum of per-layer KL terms over one forward pass.
class KLAccumulator {
 public:
  void reset();
  void add(const Var& kl);
  Var total() const;
  bool empty() const { return !has_value_; }

 private:
  Var total_{Tensor::scalar(0.0)};
  bool has_value_ = false;
};

}  // namespace bnnlab
