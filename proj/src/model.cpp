#include "bnnlab/model.hpp"

#include <cmath>
#include <set>

#include "bnnlab/error.hpp"

namespace bnnlab {

struct Model::Node {
  LayerKind kind;
  std::size_t weight = 0;  // parameter indices (conv, linear: weight/bias; norm: gamma/beta)
  std::size_t bias = 0;
  std::size_t norm_index = 0;
  std::size_t pad = 0;
  std::size_t window = 0;
  bool flatten = false;  // linear applied to a [N, C, H, W] input
  std::vector<std::vector<Node>> units;
};

Model::Model() = default;
Model::~Model() = default;
Model::Model(const Model&) = default;
Model& Model::operator=(const Model&) = default;
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;

std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Norm: return "norm";
    case LayerKind::Relu: return "relu";
    case LayerKind::Pool: return "pool";
    case LayerKind::DenseBlock: return "dense_block";
    case LayerKind::Linear: return "linear";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(std::size_t out, std::size_t kernel, bool bayesian) {
  LayerSpec s;
  s.kind = LayerKind::Conv;
  s.out = out;
  s.kernel = kernel;
  s.bayesian = bayesian;
  return s;
}
LayerSpec LayerSpec::norm(bool bayesian) {
  LayerSpec s;
  s.kind = LayerKind::Norm;
  s.bayesian = bayesian;
  return s;
}
LayerSpec LayerSpec::relu() { return LayerSpec{}; }
LayerSpec LayerSpec::pool(std::size_t window) {
  LayerSpec s;
  s.kind = LayerKind::Pool;
  s.window = window;
  return s;
}
LayerSpec LayerSpec::global_pool() { return pool(0); }
LayerSpec LayerSpec::linear(std::size_t out, bool bayesian) {
  LayerSpec s;
  s.kind = LayerKind::Linear;
  s.out = out;
  s.bayesian = bayesian;
  return s;
}
LayerSpec LayerSpec::dense_block(std::size_t depth, std::vector<LayerSpec> unit) {
  LayerSpec s;
  s.kind = LayerKind::DenseBlock;
  s.depth = depth;
  s.unit = std::move(unit);
  return s;
}

// ---------------------------------------------------------------- JSON

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

LayerKind kind_from_name(const std::string& name) {
  for (LayerKind k : {LayerKind::Conv, LayerKind::Norm, LayerKind::Relu, LayerKind::Pool,
                      LayerKind::DenseBlock, LayerKind::Linear}) {
    if (layer_kind_name(k) == name) return k;
  }
  throw ConfigError("layer: unknown kind '" + name + "'");
}

json layer_to_json(const LayerSpec& l) {
  json j;
  j["kind"] = std::string(layer_kind_name(l.kind));
  switch (l.kind) {
    case LayerKind::Conv:
      j["out"] = l.out;
      j["kernel"] = l.kernel;
      j["pad"] = l.padding();
      j["bayesian"] = l.bayesian;
      break;
    case LayerKind::Linear:
      j["out"] = l.out;
      j["bayesian"] = l.bayesian;
      break;
    case LayerKind::Norm: j["bayesian"] = l.bayesian; break;
    case LayerKind::Pool: j["window"] = l.window; break;
    case LayerKind::DenseBlock: {
      j["depth"] = l.depth;
      json unit = json::array();
      for (const auto& u : l.unit) unit.push_back(layer_to_json(u));
      j["unit"] = unit;
      break;
    }
    case LayerKind::Relu: break;
  }
  return j;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

LayerSpec layer_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("kind")) throw ConfigError(where + ": layer needs a 'kind'");
  LayerSpec l;
  l.kind = kind_from_name(j.at("kind").get<std::string>());
  switch (l.kind) {
    case LayerKind::Conv:
      check_keys(j, {"kind", "out", "kernel", "pad", "bayesian"}, where);
      l.out = j.at("out").get<std::size_t>();
      l.kernel = get_or<std::size_t>(j, "kernel", 3);
      if (j.contains("pad")) l.pad = j.at("pad").get<std::size_t>();
      l.bayesian = get_or(j, "bayesian", false);
      break;
    case LayerKind::Linear:
      check_keys(j, {"kind", "out", "bayesian"}, where);
      l.out = j.at("out").get<std::size_t>();
      l.bayesian = get_or(j, "bayesian", false);
      break;
    case LayerKind::Norm:
      check_keys(j, {"kind", "bayesian"}, where);
      l.bayesian = get_or(j, "bayesian", false);
      break;
    case LayerKind::Pool:
      check_keys(j, {"kind", "window"}, where);
      l.window = get_or<std::size_t>(j, "window", 2);
      break;
    case LayerKind::DenseBlock: {
      check_keys(j, {"kind", "depth", "unit"}, where);
      l.depth = j.at("depth").get<std::size_t>();
      const json& unit = j.at("unit");
      if (!unit.is_array()) throw ConfigError(where + ": 'unit' must be an array");
      for (std::size_t i = 0; i < unit.size(); ++i) {
        l.unit.push_back(layer_from_json(unit[i], where + ".unit[" + std::to_string(i) + "]"));
      }
      break;
    }
    case LayerKind::Relu:
      check_keys(j, {"kind", "bayesian"}, where);
      l.bayesian = get_or(j, "bayesian", false);
      break;
  }
  return l;
}

}  // namespace

nlohmann::json to_json(const ModelSpec& spec) {
  json j;
  j["input"] = {spec.channels, spec.height, spec.width};
  j["classes"] = spec.classes;
  j["prior_sigma"] = spec.prior.sigma;
  j["init_sigma"] = spec.init.posterior_sigma;
  j["norm_eps"] = spec.norm_eps;
  j["norm_momentum"] = spec.norm_momentum;
  json layers = json::array();
  for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
  j["layers"] = layers;
  return j;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  try {
    check_keys(j, {"input", "classes", "prior_sigma", "init_sigma", "norm_eps", "norm_momentum", "layers"},
               "model spec");
    ModelSpec spec;
    const auto input = j.at("input").get<std::vector<std::size_t>>();
    if (input.size() != 3) throw ConfigError("model spec: 'input' must be [channels, height, width]");
    spec.channels = input[0];
    spec.height = input[1];
    spec.width = input[2];
    spec.classes = j.at("classes").get<std::size_t>();
    spec.prior.sigma = get_or(j, "prior_sigma", spec.prior.sigma);
    spec.init.posterior_sigma = get_or(j, "init_sigma", spec.init.posterior_sigma);
    spec.norm_eps = get_or(j, "norm_eps", spec.norm_eps);
    spec.norm_momentum = get_or(j, "norm_momentum", spec.norm_momentum);
    const json& layers = j.at("layers");
    if (!layers.is_array()) throw ConfigError("model spec: 'layers' must be an array");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      spec.layers.push_back(layer_from_json(layers[i], "layers[" + std::to_string(i) + "]"));
    }
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model spec: ") + e.what());
  }
}

// ---------------------------------------------------------------- presets

ModelSpec plain_cnn_spec(std::size_t channels, std::size_t size, std::size_t classes, bool bayesian,
                         const ArchOptions& options) {
  ModelSpec spec;
  spec.channels = channels;
  spec.height = spec.width = size;
  spec.classes = classes;
  const std::size_t w1 = options.width, w2 = 2 * options.width;
  spec.layers = {LayerSpec::conv(w1, 3, bayesian), LayerSpec::relu(),
                 LayerSpec::conv(w1, 3, bayesian), LayerSpec::relu(),
                 LayerSpec::pool(2),
                 LayerSpec::conv(w2, 3, bayesian), LayerSpec::relu(),
                 LayerSpec::conv(w2, 3, bayesian), LayerSpec::relu(),
                 LayerSpec::global_pool(),
                 LayerSpec::linear(classes, bayesian)};
  return spec;
}

ModelSpec mini_dense_spec(std::size_t channels, std::size_t size, std::size_t classes, bool bayesian,
                          const ArchOptions& options) {
  ModelSpec spec;
  spec.channels = channels;
  spec.height = spec.width = size;
  spec.classes = classes;
  const std::vector<LayerSpec> unit = {LayerSpec::norm(bayesian), LayerSpec::relu(),
                                       LayerSpec::conv(options.growth, 3, bayesian)};
  spec.layers.push_back(LayerSpec::conv(options.width, 3, bayesian));
  std::size_t c = options.width;
  for (std::size_t b = 0; b < options.blocks; ++b) {
    spec.layers.push_back(LayerSpec::dense_block(options.depth, unit));
    c += options.depth * options.growth;
    if (b + 1 < options.blocks) {
      c = std::max<std::size_t>(c / 2, 1);
      spec.layers.push_back(LayerSpec::norm(bayesian));
      spec.layers.push_back(LayerSpec::relu());
      spec.layers.push_back(LayerSpec::conv(c, 1, bayesian));
      spec.layers.push_back(LayerSpec::pool(2));
    }
  }
  spec.layers.push_back(LayerSpec::norm(bayesian));
  spec.layers.push_back(LayerSpec::relu());
  spec.layers.push_back(LayerSpec::global_pool());
  spec.layers.push_back(LayerSpec::linear(classes, bayesian));
  return spec;
}

// ---------------------------------------------------------------- build

namespace {

struct FeatureShape {
  bool flat = false;
  std::size_t c = 0, h = 0, w = 0;
  std::size_t features() const { return flat ? c : c * h * w; }
};

std::string describe(const FeatureShape& s) {
  if (s.flat) return "[" + std::to_string(s.c) + "]";
  return "[" + std::to_string(s.c) + "," + std::to_string(s.h) + "," + std::to_string(s.w) + "]";
}

class Builder {
 public:
  Builder(Model& model, std::vector<Parameter>& params, std::vector<Buffer>& buffers,
          std::vector<std::pair<std::size_t, std::size_t>>& norm_buffers, const ModelSpec& spec,
          std::uint64_t seed)
      : params_(params), buffers_(buffers), norm_buffers_(norm_buffers), spec_(spec), rng_(seed),
        init_rho_(rho_from_sigma(spec.init.posterior_sigma)) {
    (void)model;
  }

  std::vector<Model::Node> compile(const std::vector<LayerSpec>& layers, FeatureShape& shape,
                                   const std::string& prefix, const std::string& where) {
    std::vector<Model::Node> nodes;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string loc = where + std::to_string(i);
      try {
        nodes.push_back(compile_one(layers[i], shape, prefix + std::to_string(i)));
      } catch (const ShapeError& e) {
        throw ShapeError("layer " + loc + " (" + std::string(layer_kind_name(layers[i].kind)) + "): " + e.what());
      } catch (const ConfigError& e) {
        throw ConfigError("layer " + loc + " (" + std::string(layer_kind_name(layers[i].kind)) + "): " + e.what());
      }
    }
    return nodes;
  }

 private:
  std::size_t add_param(const std::string& name, Shape shape, bool bayesian, double init_std,
                        double init_mean) {
    Parameter p;
    p.name = name;
    p.mu = Tensor(shape, init_mean);
    if (init_std > 0.0) {
      for (auto& v : p.mu.data()) v = init_mean + init_std * rng_.normal();
    }
    if (bayesian) p.rho = Tensor(shape, init_rho_);
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Model::Node compile_one(const LayerSpec& l, FeatureShape& shape, const std::string& name) {
    Model::Node node{};
    node.kind = l.kind;
    if (l.bayesian && l.kind != LayerKind::Conv && l.kind != LayerKind::Norm && l.kind != LayerKind::Linear) {
      throw ConfigError("only conv, norm and linear layers can be Bayesian");
    }
    switch (l.kind) {
      case LayerKind::Conv: {
        if (shape.flat) throw ShapeError("conv needs a spatial input, got " + describe(shape));
        if (l.out == 0 || l.kernel == 0) throw ConfigError("conv needs positive out and kernel");
        const std::size_t pad = l.padding();
        if (shape.h + 2 * pad < l.kernel || shape.w + 2 * pad < l.kernel) {
          throw ShapeError("kernel " + std::to_string(l.kernel) + " larger than padded input " + describe(shape));
        }
        const std::size_t fan_in = shape.c * l.kernel * l.kernel;
        node.weight = add_param(name + ".weight", {l.out, shape.c, l.kernel, l.kernel}, l.bayesian,
                                std::sqrt(2.0 / static_cast<double>(fan_in)), 0.0);
        node.bias = add_param(name + ".bias", {l.out}, l.bayesian, 0.0, 0.0);
        node.pad = pad;
        shape = {false, l.out, shape.h + 2 * pad - l.kernel + 1, shape.w + 2 * pad - l.kernel + 1};
        break;
      }
      case LayerKind::Norm: {
        node.weight = add_param(name + ".gamma", {shape.c}, l.bayesian, 0.0, 1.0);
        node.bias = add_param(name + ".beta", {shape.c}, l.bayesian, 0.0, 0.0);
        buffers_.push_back({name + ".running_mean", Tensor({shape.c}, 0.0)});
        buffers_.push_back({name + ".running_var", Tensor({shape.c}, 1.0)});
        norm_buffers_.emplace_back(buffers_.size() - 2, buffers_.size() - 1);
        node.norm_index = norm_buffers_.size() - 1;
        break;
      }
      case LayerKind::Relu: break;
      case LayerKind::Pool: {
        if (shape.flat) throw ShapeError("pool needs a spatial input, got " + describe(shape));
        node.window = l.window;
        if (l.window == 0) {
          shape = {true, shape.c, 0, 0};
        } else {
          if (shape.h < l.window || shape.w < l.window) {
            throw ShapeError("pool window " + std::to_string(l.window) + " larger than input " + describe(shape));
          }
          shape = {false, shape.c, shape.h / l.window, shape.w / l.window};
        }
        break;
      }
      case LayerKind::Linear: {
        if (l.out == 0) throw ConfigError("linear needs positive out");
        const std::size_t in = shape.features();
        node.flatten = !shape.flat;
        node.weight = add_param(name + ".weight", {in, l.out}, l.bayesian,
                                std::sqrt(2.0 / static_cast<double>(in)), 0.0);
        node.bias = add_param(name + ".bias", {l.out}, l.bayesian, 0.0, 0.0);
        shape = {true, l.out, 0, 0};
        break;
      }
      case LayerKind::DenseBlock: {
        if (shape.flat) throw ShapeError("dense block needs a spatial input, got " + describe(shape));
        if (l.depth == 0 || l.unit.empty()) throw ConfigError("dense block needs depth >= 1 and a unit");
        FeatureShape total = shape;
        std::optional<std::size_t> growth;
        for (std::size_t d = 0; d < l.depth; ++d) {
          FeatureShape s = total;
          node.units.push_back(compile(l.unit, s, name + ".unit" + std::to_string(d) + ".",
                                       "unit " + std::to_string(d) + " layer "));
          if (s.flat || s.h != shape.h || s.w != shape.w) {
            throw ShapeError("dense unit must preserve spatial size " + describe(shape) + ", got " + describe(s));
          }
          if (growth && *growth != s.c) throw ShapeError("dense units must all emit the same channel count");
          growth = s.c;
          total.c += s.c;
        }
        shape = total;
        break;
      }
    }
    return node;
  }

  std::vector<Parameter>& params_;
  std::vector<Buffer>& buffers_;
  std::vector<std::pair<std::size_t, std::size_t>>& norm_buffers_;
  const ModelSpec& spec_;
  Rng rng_;
  double init_rho_;
};

}  // namespace

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw ConfigError("model spec: need at least 2 classes");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) {
    throw ConfigError("model spec: input extents must be positive");
  }
  if (!(spec.prior.sigma > 0.0)) throw ConfigError("model spec: prior sigma must be positive");
  if (!(spec.init.posterior_sigma > 0.0)) throw ConfigError("model spec: init sigma must be positive");
  if (spec.layers.empty()) throw ConfigError("model spec: no layers");
  Model model;
  model.spec_ = spec;
  Builder builder(model, model.params_, model.buffers_, model.norm_buffers_, spec, seed);
  FeatureShape shape{false, spec.channels, spec.height, spec.width};
  model.nodes_ = builder.compile(spec.layers, shape, "layers.", "");
  if (!shape.flat || shape.c != spec.classes) {
    throw ShapeError("model output " + describe(shape) + " does not match " + std::to_string(spec.classes) +
                     " classes (last layer must produce flat class scores)");
  }
  return model;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.scalar_count();
  return n;
}

bool Model::is_bayesian() const {
  for (const auto& p : params_)
    if (p.bayesian()) return true;
  return false;
}

void Model::check_input(const Shape& s) const {
  if (s.size() != 4 || s[1] != spec_.channels || s[2] != spec_.height || s[3] != spec_.width || s[0] == 0) {
    throw ShapeError("forward: batch shape " + shape_str(s) + " does not match model input [N," +
                     std::to_string(spec_.channels) + "," + std::to_string(spec_.height) + "," +
                     std::to_string(spec_.width) + "]");
  }
}

// ---------------------------------------------------------------- forward

namespace {

struct Runner {
  const Model& model;
  std::span<const Var> weights;
  const PassOptions& options;

  Var run(const std::vector<Model::Node>& nodes, Var x) const {
    for (const auto& node : nodes) x = step(node, x);
    return x;
  }

  Var step(const Model::Node& node, const Var& x) const {
    switch (node.kind) {
      case LayerKind::Conv:
        return bias_add(conv2d(x, weights[node.weight], node.pad), weights[node.bias]);
      case LayerKind::Linear: {
        Var flat = node.flatten ? reshape(x, {x.shape()[0], shape_numel(x.shape()) / x.shape()[0]}) : x;
        return bias_add(matmul(flat, weights[node.weight]), weights[node.bias]);
      }
      case LayerKind::Relu: return relu(x);
      case LayerKind::Pool: return node.window == 0 ? global_mean_pool(x) : mean_pool(x, node.window);
      case LayerKind::Norm: return norm(node, x);
      case LayerKind::DenseBlock: {
        std::vector<Var> features{x};
        for (const auto& unit : node.units) {
          Var input = features.size() == 1 ? features[0] : concat_channels(features);
          features.push_back(run(unit, input));
        }
        return concat_channels(features);
      }
    }
    throw Error("forward: corrupt layer table");
  }

  Var norm(const Model::Node& node, const Var& x) const {
    const Var& gamma = weights[node.weight];
    const Var& beta = weights[node.bias];
    const double eps = model.spec().norm_eps;
    if (options.norm == NormMode::Batch) {
      BatchStatistics stats;
      Var y = batch_norm(x, gamma, beta, eps, &stats);
      if (options.batch_stats) options.batch_stats->push_back(std::move(stats));
      return y;
    }
    const auto [mean_idx, var_idx] = model.norm_buffers()[node.norm_index];
    const Tensor& rm = model.buffers()[mean_idx].value;
    const Tensor& rv = model.buffers()[var_idx].value;
    Tensor inv(rm.shape()), neg_mean_inv(rm.shape());
    for (std::size_t c = 0; c < rm.size(); ++c) {
      inv[c] = 1.0 / std::sqrt(rv[c] + eps);
      neg_mean_inv[c] = -rm[c] * inv[c];
    }
    // gamma * (x - m) * inv + beta == x * (gamma * inv) + (beta + gamma * (-m * inv))
    const Var s = mul(gamma, Var(inv));
    const Var b = add(beta, mul(gamma, Var(neg_mean_inv)));
    return channel_affine(x, s, b);
  }
};

}  // namespace

Var Model::run(std::span<const Var> weights, const Var& input, const PassOptions& options) const {
  if (weights.size() != params_.size()) {
    throw ShapeError("forward: expected " + std::to_string(params_.size()) + " weight tensors, got " +
                     std::to_string(weights.size()));
  }
  check_input(input.shape());
  return Runner{*this, weights, options}.run(nodes_, input);
}

std::vector<Var> mean_weights(const Model& model) {
  std::vector<Var> out;
  out.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) out.emplace_back(p.mu);
  return out;
}

std::vector<Tensor> posterior_sigmas(const Model& model) {
  std::vector<Tensor> out;
  for (const auto& p : model.parameters()) out.push_back(p.bayesian() ? sigma_from_rho(*p.rho) : Tensor());
  return out;
}

std::vector<Var> sampled_weights(const Model& model, std::span<const Tensor> sigmas, Rng& rng) {
  std::vector<Var> out;
  out.reserve(model.parameters().size());
  for (std::size_t k = 0; k < model.parameters().size(); ++k) {
    const auto& p = model.parameters()[k];
    if (!p.bayesian()) {
      out.emplace_back(p.mu);
      continue;
    }
    const Tensor& sigma = sigmas[k];
    Tensor w(p.mu.shape());
    rng.fill_normal(w.data());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = p.mu[i] + sigma[i] * w[i];
    out.emplace_back(std::move(w));
  }
  return out;
}

std::vector<Var> sampled_weights(const Model& model, Rng& rng) {
  const auto sigmas = posterior_sigmas(model);
  return sampled_weights(model, sigmas, rng);
}

TrainableWeights trainable_weights(const Model& model, Tape& tape, Rng* rng) {
  TrainableWeights tw;
  for (const auto& p : model.parameters()) {
    Var mu = tape.leaf(p.mu);
    tw.mu.push_back(mu);
    if (!p.bayesian()) {
      tw.rho.emplace_back();
      tw.weights.push_back(mu);
      continue;
    }
    Var rho = tape.leaf(*p.rho);
    tw.rho.push_back(rho);
    if (rng) {
      Tensor noise(p.mu.shape());
      rng->fill_normal(noise.data());
      tw.weights.push_back(sample_weights(mu, rho, noise));
    } else {
      tw.weights.push_back(mu);
    }
  }
  return tw;
}

Var model_kl(const Model& model, const TrainableWeights& weights) {
  KLAccumulator acc;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    if (!model.parameters()[i].bayesian()) continue;
    acc.add(kl_gaussian(weights.mu[i], weights.rho[i], model.spec().prior));
  }
  return acc.total();
}

double model_kl(const Model& model) {
  double total = 0.0;
  for (const auto& p : model.parameters()) {
    if (p.bayesian()) total += kl_gaussian(VariationalParam{p.mu, *p.rho}, model.spec().prior);
  }
  return total;
}

std::size_t bayesian_scalar_count(const Model& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters())
    if (p.bayesian()) n += p.mu.size();
  return n;
}

ForwardResult forward(const Model& model, const Tensor& batch, SamplingMode mode) {
  NoRecordGuard guard;
  std::vector<Var> weights;
  if (mode.kind == SamplingMode::Kind::Sample) {
    Rng rng(mode.seed);
    weights = sampled_weights(model, rng);
  } else {
    weights = mean_weights(model);
  }
  ForwardResult r;
  r.logits = model.run(weights, Var(batch)).value();
  r.kl_total = model_kl(model);
  return r;
}

Tensor predict_ensemble(const Model& model, const Tensor& batch, std::size_t n_samples,
                        std::uint64_t seed) {
  if (n_samples == 0) throw ConfigError("predict_ensemble: n_samples must be >= 1");
  NoRecordGuard guard;
  if (!model.is_bayesian()) return softmax(model.run(mean_weights(model), Var(batch))).value();
  Rng rng(seed);
  Tensor total;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const auto weights = sampled_weights(model, rng);
    Tensor p = softmax(model.run(weights, Var(batch))).value();
    if (s == 0) {
      total = std::move(p);
    } else {
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += p[i];
    }
  }
  if (n_samples > 1) {
    const double inv = static_cast<double>(n_samples);
    for (auto& v : total.data()) v /= inv;
  }
  return total;
}

}  // namespace bnnlab
