#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnlab/attacks.hpp"
#include "bnnlab/data.hpp"
#include "bnnlab/model.hpp"
#include "json.hpp"

namespace bnnlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(AdamConfig config, std::span<const Tensor* const> params);
};

// One bias-corrected Adam update of every parameter in place. A fresh state
// is sized on first use.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

enum class KlReduction {
  Sum,   // beta * summed KL
  Mean,  // beta * KL / number of Bayesian weights
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  AdamConfig adam;
  double beta_kl = 0.1;
  KlReduction kl_reduction = KlReduction::Mean;
  std::optional<AttackConfig> adversarial;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
// `seed` is not part of the document; callers derive it.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean batch loss
  double accuracy = 0.0;  // clean training accuracy after the epoch (4-draw ensemble)
  double kl = 0.0;        // summed closed-form KL after the epoch
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;

  // epoch,loss,acc,kl,seconds
  std::string to_csv(bool with_time = true) const;
};

// Trains in place. Throws DivergenceError if a batch loss is not finite.
TrainReport train(Model& model, const Dataset& data, const TrainConfig& cfg);

// Ensemble-averaged class probabilities over the whole dataset, in chunks.
Tensor predict_dataset(const Model& model, const Dataset& data, std::size_t n_samples, std::uint64_t seed);

// Fraction of examples whose predict_ensemble argmax matches the label, on
// clean inputs or on inputs perturbed by `attack` (seeded by attack_seed).
double evaluate(const Model& model, const Dataset& data, const AttackConfig* attack, std::size_t n_samples,
                std::uint64_t seed, std::uint64_t attack_seed = 0);

std::vector<std::size_t> argmax_rows(const Tensor& probs);

}  // namespace bnnlab
