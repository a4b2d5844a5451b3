#pragma once

// Layer-stack architectures (deterministic or Bayesian) and their forward
// passes. Bayesian conv, norm and linear layers hold a VariationalParam per
// weight tensor; everything else is shared with the deterministic path.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bnnlab/autodiff.hpp"
#include "bnnlab/rng.hpp"
#include "bnnlab/variational.hpp"
#include "json.hpp"

namespace bnnlab {

enum class LayerKind { Conv, Norm, Relu, Pool, DenseBlock, Linear };

std::string_view layer_kind_name(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::size_t out = 0;               // conv: output channels; linear: output features
  std::size_t kernel = 3;            // conv
  std::optional<std::size_t> pad;    // conv; defaults to kernel / 2
  std::size_t window = 2;            // pool; 0 selects a global mean
  std::size_t depth = 0;             // dense block: number of dense layers
  std::vector<LayerSpec> unit;       // dense block: layers of one dense layer
  bool bayesian = false;             // conv, norm and linear only

  static LayerSpec conv(std::size_t out, std::size_t kernel = 3, bool bayesian = false);
  static LayerSpec norm(bool bayesian = false);
  static LayerSpec relu();
  static LayerSpec pool(std::size_t window = 2);
  static LayerSpec global_pool();
  static LayerSpec linear(std::size_t out, bool bayesian = false);
  static LayerSpec dense_block(std::size_t depth, std::vector<LayerSpec> unit);

  std::size_t padding() const { return pad.value_or(kernel / 2); }
};

struct InitSpec {
  double posterior_sigma = 0.15;
};

struct ModelSpec {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t classes = 2;
  std::vector<LayerSpec> layers;
  PriorSpec prior;
  InitSpec init;
  double norm_eps = 1e-5;
  double norm_momentum = 0.1;
};

nlohmann::json to_json(const ModelSpec& spec);
// Rejects unknown keys and malformed values.
ModelSpec model_spec_from_json(const nlohmann::json& j);

// Widths for the preset architectures.
struct ArchOptions {
  std::size_t width = 16;   // plain: first stage channels; dense: stem channels
  std::size_t growth = 12;  // dense
  std::size_t depth = 4;    // dense: layers per block
  std::size_t blocks = 2;   // dense
};

// VGG-like: two conv-relu-conv-relu stages, pooling, linear classifier.
ModelSpec plain_cnn_spec(std::size_t channels, std::size_t size, std::size_t classes, bool bayesian,
                         const ArchOptions& options = {});
// DenseNet-like: stem conv, dense blocks of norm-relu-conv units joined by
// norm-relu-conv1x1-pool transitions, global pooling, linear classifier.
ModelSpec mini_dense_spec(std::size_t channels, std::size_t size, std::size_t classes, bool bayesian,
                          const ArchOptions& options = {});

struct Parameter {
  std::string name;
  Tensor mu;                  // the value itself for deterministic parameters
  std::optional<Tensor> rho;  // present iff Bayesian

  bool bayesian() const { return rho.has_value(); }
  std::size_t scalar_count() const { return mu.size() * (bayesian() ? 2 : 1); }
};

struct Buffer {
  std::string name;
  Tensor value;
};

struct SamplingMode {
  enum class Kind { MeanOnly, Sample };
  Kind kind = Kind::MeanOnly;
  std::uint64_t seed = 0;

  static SamplingMode mean_only() { return {}; }
  static SamplingMode sample(std::uint64_t seed) { return {Kind::Sample, seed}; }
};

enum class NormMode { Running, Batch };

struct PassOptions {
  NormMode norm = NormMode::Running;
  // Batch mode: receives one entry per norm layer, in network order.
  std::vector<BatchStatistics>* batch_stats = nullptr;
};

class Model {
 public:
  struct Node;

  Model();
  ~Model();
  Model(const Model&);
  Model& operator=(const Model&);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Buffer>& buffers() { return buffers_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  // Indices into buffers() of (running mean, running var) per norm layer.
  const std::vector<std::pair<std::size_t, std::size_t>>& norm_buffers() const { return norm_buffers_; }

  std::size_t parameter_count() const;
  bool is_bayesian() const;

  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  // Runs the layer stack with concrete weights (one Var per parameter).
  Var run(std::span<const Var> weights, const Var& input, const PassOptions& options = {}) const;

  void check_input(const Shape& batch_shape) const;

 private:
  friend Model build_model(const ModelSpec& spec, std::uint64_t seed);

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<Buffer> buffers_;
  std::vector<std::pair<std::size_t, std::size_t>> norm_buffers_;
  std::vector<Node> nodes_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

// Validates the spec (shape composition, flags) and initializes parameters:
// fan-in scaled Gaussian for weights and Bayesian means, zero biases,
// rho such that sigma = spec.init.posterior_sigma.
Model build_model(const ModelSpec& spec, std::uint64_t seed);

// Concrete weights as constants.
std::vector<Var> mean_weights(const Model& model);
std::vector<Var> sampled_weights(const Model& model, Rng& rng);
// Same draws as above with softplus(rho) precomputed by posterior_sigmas.
std::vector<Tensor> posterior_sigmas(const Model& model);
std::vector<Var> sampled_weights(const Model& model, std::span<const Tensor> sigmas, Rng& rng);

// Weights as a differentiable function of tape leaves; `rng` null means
// posterior means. weights[i] is mu[i] itself for deterministic parameters.
struct TrainableWeights {
  std::vector<Var> mu;
  std::vector<Var> rho;  // untracked placeholders for deterministic parameters
  std::vector<Var> weights;
};
TrainableWeights trainable_weights(const Model& model, Tape& tape, Rng* rng);

// Sum of closed-form KL terms over Bayesian parameters (zero otherwise).
Var model_kl(const Model& model, const TrainableWeights& weights);
double model_kl(const Model& model);
std::size_t bayesian_scalar_count(const Model& model);

struct ForwardResult {
  Tensor logits;
  double kl_total = 0.0;
};

ForwardResult forward(const Model& model, const Tensor& batch, SamplingMode mode);

// Mean of softmax outputs over n_samples posterior draws taken sequentially
// from one stream seeded with `seed`.
Tensor predict_ensemble(const Model& model, const Tensor& batch, std::size_t n_samples,
                        std::uint64_t seed);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace bnnlab
