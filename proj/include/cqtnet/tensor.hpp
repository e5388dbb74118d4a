#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cqtnet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  // Empty until something is accumulated into it.
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(TensorNode&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Dense row-major array that participates in reverse-mode differentiation.
// Copies are shallow: two handles refer to the same node.
template <typename T>
class BasicTensor {
 public:
  using Node = TensorNode<T>;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Leaf copy of the current values, disconnected from any graph.
  BasicTensor detach() const;
  // Same values viewed under a new shape with identity gradient.
  BasicTensor reshape(Shape shape) const;

  const char* op() const { return node_->op; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// While a guard with enabled=false is alive on this thread, ops do not record
// graph edges, so intermediates are released as soon as they go out of scope.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

  static bool enabled();

 private:
  bool previous_;
};

// Nodes reachable from `root`, inputs before consumers; every node appears
// once.
template <typename T>
std::vector<TensorNode<T>*> topological_order(const BasicTensor<T>& root);

// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every reachable
// node that requires them. `loss` must hold exactly one element.
template <typename T>
void backward(const BasicTensor<T>& loss);

struct Conv2dOptions {
  std::int64_t stride_h = 1, stride_w = 1;
  std::int64_t dilation_h = 1, dilation_w = 1;
};

// Valid (unpadded) cross-correlation. input N*C*H*W, weight Co*C*kH*kW,
// bias Co (may be undefined).
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, const Conv2dOptions& options = {});

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel,
                              std::int64_t stride, std::int64_t dilation);

// Gradient goes to the first maximum in row-major window order.
template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, std::int64_t kernel_h,
                         std::int64_t kernel_w, std::int64_t stride_h,
                         std::int64_t stride_w);

std::int64_t pool_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride);

// Global average over H and W: N*C*H*W -> N*C*1*1.
template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& input);

// input N*F, weight F'*F, bias F' (may be undefined) -> N*F'.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

enum class Mode { kTrain, kEval };

template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  bool initialized = false;

  explicit BatchNormStats(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel normalisation over (N, H, W). Train mode uses batch statistics
// and updates `stats`; eval mode uses the running statistics.
template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormStats<T>& stats,
                           Mode mode);

// Mean over the batch of -log softmax(logits)[target].
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> targets);

// Scalar sum_i input_i * weights_i; used to reduce tensors to a loss in tests
// and gradient checks.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> weights);

// Adam with bias correction.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(std::vector<Tensor> params, Options options);

  // Applies one update using the params' current grads. Params without a
  // grad are left untouched but still count towards the step number.
  void step();
  void zero_grad();

  const Options& options() const { return options_; }
  std::int64_t step_count() const { return step_; }
  std::vector<Tensor>& params() { return params_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  void set_step_count(std::int64_t step) { step_ = step; }

 private:
  std::vector<Tensor> params_;
  Options options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t step_ = 0;
};

}  // namespace cqtnet
