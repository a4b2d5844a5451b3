#pragma once

// Tape-based reverse-mode automatic differentiation over Tensor values.
//
// A Var is a Tensor value optionally bound to a node of a Tape. Ops on
// untracked Vars are plain functions; as soon as one input is tracked the op
// appends a node to that input's tape. A Tape belongs to one thread.

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bnnlab/tensor.hpp"

namespace bnnlab {

enum class OpKind : int {
  Leaf = 0,
  MatMul,
  Conv2d,
  Relu,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  BiasAdd,
  ConcatChannels,
  MeanPool,
  GlobalMeanPool,
  BatchNorm,
  ChannelAffine,
  Softmax,
  LogSoftmax,
  SoftmaxCrossEntropy,
  Clamp,
  Softplus,
  Log,
  Exp,
  Sum,
  Mean,
  Reshape,
  Resample,
  KLGaussian,
};

std::string_view op_name(OpKind op);

// Per-channel statistics a batch-statistics normalization computed.
struct BatchStatistics {
  Tensor mean;
  Tensor var;
};

struct OpAttrs {
  std::size_t pad = 0;                  // conv2d
  std::size_t pool = 2;                 // mean_pool window and stride
  double lo = 0.0;                      // clamp
  double hi = 1.0;                      // clamp
  double scalar = 0.0;                  // scale, add_scalar, kl prior sigma
  double eps = 1e-5;                    // batch_norm
  Shape shape;                          // reshape
  std::vector<std::size_t> labels;      // softmax_cross_entropy
  // Resample: source pixel (sx, sy) for destination (x, y) is
  //   sx = m[0] x + m[1] y + m[2],  sy = m[3] x + m[4] y + m[5].
  std::array<double, 6> affine{1, 0, 0, 0, 1, 0};
  BatchStatistics* stats = nullptr;     // batch_norm: optional output sink
};

class Tape;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value);

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape(); }
  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t node() const { return node_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_ = std::make_shared<const Tensor>();
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Gradients of one backward pass, keyed by leaf.
class GradientMap {
 public:
  const Tensor& operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const;
  std::size_t size() const { return grads_.size(); }
  // Number of graph nodes whose backward rule ran.
  std::size_t nodes_visited() const { return visited_; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::unordered_map<std::size_t, Tensor> grads_;
  std::size_t visited_ = 0;
};

class Tape {
 public:
  // Returns gradients for every input the op needs (empty Tensor otherwise).
  using BackwardFn =
      std::function<std::vector<Tensor>(const Tensor& grad_out, const std::vector<bool>& need)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // A tensor that requires gradients.
  Var leaf(Tensor value);

  // dLoss/dLeaf for every leaf the loss depends on. The loss must be a
  // scalar recorded on this tape.
  GradientMap backward(const Var& loss) const;

  std::size_t size() const { return nodes_.size(); }

  Var record(OpKind op, std::span<const Var> inputs, Tensor value, BackwardFn backward);

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    std::vector<bool> input_tracked;
    std::shared_ptr<const Tensor> value;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// While alive, ops on this thread record nothing and return untracked Vars.
class NoRecordGuard {
 public:
  NoRecordGuard();
  ~NoRecordGuard();
  NoRecordGuard(const NoRecordGuard&) = delete;
  NoRecordGuard& operator=(const NoRecordGuard&) = delete;

 private:
  bool previous_;
};

bool recording_enabled();

// Generic entry point; the typed helpers below route through it.
Var apply(OpKind op, std::span<const Var> inputs, const OpAttrs& attrs = {});

Var matmul(const Var& a, const Var& b);
Var conv2d(const Var& input, const Var& weight, std::size_t pad);
Var relu(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
// x[N, C, ...] + bias[C]
Var bias_add(const Var& x, const Var& bias);
Var concat_channels(std::span<const Var> parts);
Var mean_pool(const Var& x, std::size_t window);
Var global_mean_pool(const Var& x);
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, double eps,
               BatchStatistics* stats = nullptr);
// x[N, C, ...] * scale[C] + shift[C]
Var channel_affine(const Var& x, const Var& scale, const Var& shift);
Var softmax(const Var& logits);
Var log_softmax(const Var& logits);
// Mean cross-entropy of rows of logits against integer labels.
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> labels);
Var clamp(const Var& x, double lo, double hi);
Var softplus(const Var& x);
Var log(const Var& x);
Var exp(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, Shape shape);
Var resample(const Var& images, const std::array<double, 6>& affine);
// Closed-form KL( N(mu, softplus(rho)^2) || N(0, prior_sigma^2) ), summed.
Var kl_gaussian(const Var& mu, const Var& rho, double prior_sigma);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h);

// Scalar helpers shared with oracles.
double softplus_scalar(double x);
double sigmoid_scalar(double x);

}  // namespace bnnlab
