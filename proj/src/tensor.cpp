#include "cqtnet/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

#include "cqtnet/errors.hpp"

namespace cqtnet {

namespace {

thread_local bool t_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void check_finite(const TensorNode<T>& node) {
  for (T v : node.value) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::kNumeric, std::string("non-finite value produced by ") + node.op);
    }
  }
}

// Creates the output node of an op and wires it into the graph when any
// input needs gradients and grad mode is on.
template <typename T>
NodePtr<T> make_output(const char* op, Shape shape,
                       std::initializer_list<NodePtr<T>> inputs) {
  auto node = std::make_shared<TensorNode<T>>();
  node->op = op;
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
  node->shape = std::move(shape);
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in && in->requires_grad) node->requires_grad = true;
    }
    if (node->requires_grad) {
      for (const auto& in : inputs) {
        if (in) node->inputs.push_back(in);
      }
    }
  }
  return node;
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta, float* c,
          int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

struct ConvGeometry {
  std::int64_t channels, height, width;
  std::int64_t kernel_h, kernel_w;
  std::int64_t out_h, out_w;
  Conv2dOptions opt;

  std::int64_t col_rows() const { return channels * kernel_h * kernel_w; }
  std::int64_t col_cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kernel_h; ++i) {
      for (std::int64_t j = 0; j < g.kernel_w; ++j) {
        T* dst = col + ((c * g.kernel_h + i) * g.kernel_w + j) * cols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const T* src = x + (c * g.height + oh * g.opt.stride_h + i * g.opt.dilation_h) * g.width +
                         j * g.opt.dilation_w;
          T* out = dst + oh * g.out_w;
          if (g.opt.stride_w == 1) {
            std::memcpy(out, src, sizeof(T) * static_cast<std::size_t>(g.out_w));
          } else {
            for (std::int64_t ow = 0; ow < g.out_w; ++ow) out[ow] = src[ow * g.opt.stride_w];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::int64_t cols = g.col_cols();
  for (std::int64_t c = 0; c < g.channels; ++c) {
    for (std::int64_t i = 0; i < g.kernel_h; ++i) {
      for (std::int64_t j = 0; j < g.kernel_w; ++j) {
        const T* src = col + ((c * g.kernel_h + i) * g.kernel_w + j) * cols;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          T* dst = dx + (c * g.height + oh * g.opt.stride_h + i * g.opt.dilation_h) * g.width +
                   j * g.opt.dilation_w;
          const T* in = src + oh * g.out_w;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) dst[ow * g.opt.stride_w] += in[ow];
        }
      }
    }
  }
}

void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorKind::kShape, message);
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- BasicTensor -----------------------------------------------------------

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (auto d : shape) {
    if (d < 0) fail(ErrorKind::kShape, "negative dimension in " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
    fail(ErrorKind::kShape, std::to_string(values.size()) + " values for shape " +
                                shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return BasicTensor(std::move(node));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::kShape, "item() on tensor of shape " + shape_string(node_->shape));
  }
  return node_->value[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from(node_->shape, node_->value, false);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    fail(ErrorKind::kShape, "cannot reshape " + shape_string(node_->shape) + " to " +
                                shape_string(shape));
  }
  auto out = make_output<T>("reshape", std::move(shape), {node_});
  out->value = node_->value;
  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [](Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return BasicTensor(std::move(out));
}

// ---- graph -----------------------------------------------------------------

GradModeGuard::GradModeGuard(bool enabled) : previous_(t_grad_enabled) {
  t_grad_enabled = enabled;
}

GradModeGuard::~GradModeGuard() { t_grad_enabled = previous_; }

bool GradModeGuard::enabled() { return t_grad_enabled; }

template <typename T>
std::vector<TensorNode<T>*> topological_order(const BasicTensor<T>& root) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<const TensorNode<T>*> visited;
  // Iterative post-order DFS; second tuple element is the next input index.
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<T>* child = node->inputs[next++].get();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.numel() != 1) {
    fail(ErrorKind::kShape, "backward() needs a scalar loss, got " +
                                shape_string(loss.shape()));
  }
  auto order = topological_order(loss);
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---- conv2d ----------------------------------------------------------------

std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel,
                              std::int64_t stride, std::int64_t dilation) {
  const std::int64_t span = (kernel - 1) * dilation + 1;
  if (in < span) return 0;
  return (in - span) / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, const Conv2dOptions& options) {
  require(input.rank() == 4, "conv2d input must be N*C*H*W, got " + shape_string(input.shape()));
  require(weight.rank() == 4, "conv2d weight must be Co*C*kH*kW, got " + shape_string(weight.shape()));
  require(options.stride_h > 0 && options.stride_w > 0 && options.dilation_h > 0 &&
              options.dilation_w > 0,
          "conv2d stride and dilation must be positive");
  const std::int64_t batch = input.dim(0);
  ConvGeometry g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                 0, 0, options};
  const std::int64_t out_channels = weight.dim(0);
  require(weight.dim(1) == g.channels,
          "conv2d channel mismatch: input " + shape_string(input.shape()) + ", weight " +
              shape_string(weight.shape()));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == out_channels, "conv2d bias must have Co entries");
  }
  g.out_h = conv_output_size(g.height, g.kernel_h, options.stride_h, options.dilation_h);
  g.out_w = conv_output_size(g.width, g.kernel_w, options.stride_w, options.dilation_w);
  require(g.out_h > 0 && g.out_w > 0,
          "conv2d kernel " + shape_string(weight.shape()) + " does not fit input " +
              shape_string(input.shape()));

  auto out = make_output<T>("conv2d", {batch, out_channels, g.out_h, g.out_w},
                            {input.node(), weight.node(), bias.defined() ? bias.node() : nullptr});
  const int m = static_cast<int>(out_channels);
  const int n = static_cast<int>(g.col_cols());
  const int k = static_cast<int>(g.col_rows());
  const std::int64_t in_stride = g.channels * g.height * g.width;
  const std::int64_t out_stride = out_channels * g.out_h * g.out_w;
  std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
  const T* w = weight.values().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    im2col(input.values().data() + b * in_stride, g, col.data());
    T* y = out->value.data() + b * out_stride;
    if (bias.defined()) {
      for (std::int64_t c = 0; c < out_channels; ++c) {
        std::fill(y + c * n, y + (c + 1) * n, bias.values()[static_cast<std::size_t>(c)]);
      }
    }
    gemm(false, false, m, n, k, T(1), w, k, col.data(), n, bias.defined() ? T(1) : T(0), y, n);
  }

  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [g, batch, out_channels, in_stride, out_stride](TensorNode<T>& self) {
      auto& in = *self.inputs[0];
      auto& wt = *self.inputs[1];
      TensorNode<T>* bs = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
      const int m = static_cast<int>(out_channels);
      const int n = static_cast<int>(g.col_cols());
      const int k = static_cast<int>(g.col_rows());
      std::vector<T> col(static_cast<std::size_t>(g.col_rows() * g.col_cols()));
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* dy = self.grad.data() + b * out_stride;
        if (wt.requires_grad) {
          im2col(in.value.data() + b * in_stride, g, col.data());
          gemm(false, true, m, k, n, T(1), dy, n, col.data(), n, T(1),
               wt.ensure_grad().data(), k);
        }
        if (bs && bs->requires_grad) {
          auto& gb = bs->ensure_grad();
          for (std::int64_t c = 0; c < out_channels; ++c) {
            T acc = 0;
            for (int p = 0; p < n; ++p) acc += dy[c * n + p];
            gb[static_cast<std::size_t>(c)] += acc;
          }
        }
        if (in.requires_grad) {
          gemm(true, false, k, n, m, T(1), wt.value.data(), k, dy, n, T(0), col.data(), n);
          col2im_add(col.data(), g, in.ensure_grad().data() + b * in_stride);
        }
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- maxpool2d -------------------------------------------------------------

std::int64_t pool_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride) {
  if (in < kernel) return 0;
  return (in - kernel) / stride + 1;
}

template <typename T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, std::int64_t kernel_h,
                         std::int64_t kernel_w, std::int64_t stride_h,
                         std::int64_t stride_w) {
  require(input.rank() == 4, "maxpool2d input must be N*C*H*W");
  require(kernel_h > 0 && kernel_w > 0 && stride_h > 0 && stride_w > 0,
          "maxpool2d kernel and stride must be positive");
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t h = input.dim(2), w = input.dim(3);
  require(h >= kernel_h && w >= kernel_w,
          "maxpool2d kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
              " larger than input " + shape_string(input.shape()));
  const std::int64_t oh = pool_output_size(h, kernel_h, stride_h);
  const std::int64_t ow = pool_output_size(w, kernel_w, stride_w);
  auto out = make_output<T>("maxpool2d", {input.dim(0), input.dim(1), oh, ow}, {input.node()});
  std::vector<std::int64_t> argmax(out->value.size());
  const T* x = input.values().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t i = 0; i < oh; ++i) {
      for (std::int64_t j = 0; j < ow; ++j) {
        std::int64_t best = (p * h + i * stride_h) * w + j * stride_w;
        T best_v = x[best];
        for (std::int64_t a = 0; a < kernel_h; ++a) {
          for (std::int64_t b = 0; b < kernel_w; ++b) {
            const std::int64_t idx = (p * h + i * stride_h + a) * w + j * stride_w + b;
            if (x[idx] > best_v) {
              best_v = x[idx];
              best = idx;
            }
          }
        }
        const std::size_t o = static_cast<std::size_t>((p * oh + i) * ow + j);
        out->value[o] = best_v;
        argmax[o] = best;
      }
    }
  }
  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [argmax = std::move(argmax)](TensorNode<T>& self) {
      auto& in = *self.inputs[0];
      auto& g = in.ensure_grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) {
        g[static_cast<std::size_t>(argmax[o])] += self.grad[o];
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- adaptive_avg_pool2d ---------------------------------------------------

template <typename T>
BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>& input) {
  require(input.rank() == 4, "adaptive_avg_pool2d input must be N*C*H*W");
  const std::int64_t planes = input.dim(0) * input.dim(1);
  const std::int64_t area = input.dim(2) * input.dim(3);
  require(area > 0, "adaptive_avg_pool2d on empty spatial map");
  auto out = make_output<T>("adaptive_avg_pool2d", {input.dim(0), input.dim(1), 1, 1},
                            {input.node()});
  const T* x = input.values().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::int64_t i = 0; i < area; ++i) acc += x[p * area + i];
    out->value[static_cast<std::size_t>(p)] = acc / static_cast<T>(area);
  }
  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [planes, area](TensorNode<T>& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::int64_t p = 0; p < planes; ++p) {
        const T share = self.grad[static_cast<std::size_t>(p)] / static_cast<T>(area);
        for (std::int64_t i = 0; i < area; ++i) g[static_cast<std::size_t>(p * area + i)] += share;
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- linear ----------------------------------------------------------------

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require(input.rank() == 2 && weight.rank() == 2, "linear expects N*F input and F'*F weight");
  const std::int64_t batch = input.dim(0), in_f = input.dim(1), out_f = weight.dim(0);
  require(weight.dim(1) == in_f, "linear dimension mismatch: input " +
                                     shape_string(input.shape()) + ", weight " +
                                     shape_string(weight.shape()));
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == out_f, "linear bias must have F' entries");
  }
  auto out = make_output<T>("linear", {batch, out_f},
                            {input.node(), weight.node(), bias.defined() ? bias.node() : nullptr});
  if (bias.defined()) {
    for (std::int64_t b = 0; b < batch; ++b) {
      std::copy(bias.values().begin(), bias.values().end(), out->value.begin() + b * out_f);
    }
  }
  gemm(false, true, static_cast<int>(batch), static_cast<int>(out_f), static_cast<int>(in_f), T(1),
       input.values().data(), static_cast<int>(in_f), weight.values().data(),
       static_cast<int>(in_f), bias.defined() ? T(1) : T(0), out->value.data(),
       static_cast<int>(out_f));
  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [batch, in_f, out_f](TensorNode<T>& self) {
      auto& in = *self.inputs[0];
      auto& wt = *self.inputs[1];
      TensorNode<T>* bs = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
      const int n = static_cast<int>(batch), fi = static_cast<int>(in_f),
                fo = static_cast<int>(out_f);
      if (in.requires_grad) {
        gemm(false, false, n, fi, fo, T(1), self.grad.data(), fo, wt.value.data(), fi, T(1),
             in.ensure_grad().data(), fi);
      }
      if (wt.requires_grad) {
        gemm(true, false, fo, fi, n, T(1), self.grad.data(), fo, in.value.data(), fi, T(1),
             wt.ensure_grad().data(), fi);
      }
      if (bs && bs->requires_grad) {
        auto& gb = bs->ensure_grad();
        for (int b = 0; b < n; ++b) {
          for (int o = 0; o < fo; ++o) gb[static_cast<std::size_t>(o)] += self.grad[static_cast<std::size_t>(b * fo + o)];
        }
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- relu ------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  auto out = make_output<T>("relu", input.shape(), {input.node()});
  const auto x = input.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->value[i] = x[i] < T(0) ? T(0) : x[i];
  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [](TensorNode<T>& self) {
      auto& in = *self.inputs[0];
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (in.value[i] > T(0)) g[i] += self.grad[i];
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- batchnorm2d -----------------------------------------------------------

template <typename T>
BasicTensor<T> batchnorm2d(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                           const BasicTensor<T>& beta, BatchNormStats<T>& stats, Mode mode) {
  require(input.rank() == 4, "batchnorm2d input must be N*C*H*W");
  const std::int64_t batch = input.dim(0), channels = input.dim(1);
  const std::int64_t area = input.dim(2) * input.dim(3);
  require(gamma.numel() == channels && beta.numel() == channels,
          "batchnorm2d affine parameters must have C entries");
  require(static_cast<std::int64_t>(stats.running_mean.size()) == channels &&
              static_cast<std::int64_t>(stats.running_var.size()) == channels,
          "batchnorm2d running statistics must have C entries");
  const std::int64_t count = batch * area;
  const T eps = static_cast<T>(kBatchNormEpsilon);

  std::vector<T> mean(static_cast<std::size_t>(channels));
  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  if (mode == Mode::kTrain) {
    if (count <= 1) {
      fail(ErrorKind::kShape, "batchnorm2d training needs more than one value per channel");
    }
    const T* x = input.values().data();
    const T momentum = static_cast<T>(kBatchNormMomentum);
    for (std::int64_t c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* p = x + (b * channels + c) * area;
        for (std::int64_t i = 0; i < area; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* p = x + (b * channels + c) * area;
        for (std::int64_t i = 0; i < area; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = static_cast<T>(mu);
      inv_std[ci] = static_cast<T>(1.0 / std::sqrt(var + kBatchNormEpsilon));
      const double unbiased = sq / static_cast<double>(count - 1);
      stats.running_mean[ci] = (T(1) - momentum) * stats.running_mean[ci] + momentum * static_cast<T>(mu);
      stats.running_var[ci] = (T(1) - momentum) * stats.running_var[ci] + momentum * static_cast<T>(unbiased);
    }
    stats.initialized = true;
  } else {
    if (!stats.initialized) {
      fail(ErrorKind::kUninitializedStats, "batchnorm2d eval mode before any training step");
    }
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = stats.running_mean[ci];
      inv_std[ci] = T(1) / std::sqrt(stats.running_var[ci] + eps);
    }
  }

  auto out = make_output<T>("batchnorm2d", input.shape(),
                            {input.node(), gamma.node(), beta.node()});
  // Normalised input is kept for the backward pass.
  std::vector<T> xhat(out->value.size());
  const T* x = input.values().data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const T gm = gamma.values()[ci], bt = beta.values()[ci];
      const std::int64_t base = (b * channels + c) * area;
      for (std::int64_t i = 0; i < area; ++i) {
        const auto idx = static_cast<std::size_t>(base + i);
        xhat[idx] = (x[idx] - mean[ci]) * inv_std[ci];
        out->value[idx] = gm * xhat[idx] + bt;
      }
    }
  }

  check_finite(*out);
  if (out->requires_grad) {
    out->backward = [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels,
                     area, count, mode](TensorNode<T>& self) {
      auto& in = *self.inputs[0];
      auto& gm = *self.inputs[1];
      auto& bt = *self.inputs[2];
      for (std::int64_t c = 0; c < channels; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::int64_t base = (b * channels + c) * area;
          for (std::int64_t i = 0; i < area; ++i) {
            const auto idx = static_cast<std::size_t>(base + i);
            sum_dy += self.grad[idx];
            sum_dy_xhat += static_cast<double>(self.grad[idx]) * xhat[idx];
          }
        }
        if (gm.requires_grad) gm.ensure_grad()[ci] += static_cast<T>(sum_dy_xhat);
        if (bt.requires_grad) bt.ensure_grad()[ci] += static_cast<T>(sum_dy);
        if (!in.requires_grad) continue;
        auto& gx = in.ensure_grad();
        const T g = gm.value[ci];
        const T scale = g * inv_std[ci];
        if (mode == Mode::kEval) {
          for (std::int64_t b = 0; b < batch; ++b) {
            const std::int64_t base = (b * channels + c) * area;
            for (std::int64_t i = 0; i < area; ++i) {
              const auto idx = static_cast<std::size_t>(base + i);
              gx[idx] += scale * self.grad[idx];
            }
          }
        } else {
          const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(count));
          const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(count));
          for (std::int64_t b = 0; b < batch; ++b) {
            const std::int64_t base = (b * channels + c) * area;
            for (std::int64_t i = 0; i < area; ++i) {
              const auto idx = static_cast<std::size_t>(base + i);
              gx[idx] += scale * (self.grad[idx] - mean_dy - xhat[idx] * mean_dy_xhat);
            }
          }
        }
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- softmax_cross_entropy -------------------------------------------------

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  require(logits.rank() == 2, "softmax_cross_entropy expects N*K logits");
  const std::int64_t batch = logits.dim(0), classes = logits.dim(1);
  require(static_cast<std::int64_t>(targets.size()) == batch,
          "softmax_cross_entropy needs one target per row");
  for (int t : targets) {
    if (t < 0 || t >= classes) {
      fail(ErrorKind::kIndex, "target " + std::to_string(t) + " outside [0, " +
                                  std::to_string(classes) + ")");
    }
  }
  auto out = make_output<T>("softmax_cross_entropy", {}, {logits.node()});
  std::vector<T> probs(static_cast<std::size_t>(batch * classes));
  const T* z = logits.values().data();
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    const T peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) denom += std::exp(static_cast<double>(row[k] - peak));
    for (std::int64_t k = 0; k < classes; ++k) {
      probs[static_cast<std::size_t>(b * classes + k)] =
          static_cast<T>(std::exp(static_cast<double>(row[k] - peak)) / denom);
    }
    const auto t = targets[static_cast<std::size_t>(b)];
    total += std::log(denom) - static_cast<double>(row[t] - peak);
  }
  out->value[0] = static_cast<T>(total / static_cast<double>(batch));
  check_finite(*out);
  if (out->requires_grad) {
    std::vector<int> labels(targets.begin(), targets.end());
    out->backward = [probs = std::move(probs), labels = std::move(labels), batch,
                     classes](TensorNode<T>& self) {
      auto& g = self.inputs[0]->ensure_grad();
      const T scale = self.grad[0] / static_cast<T>(batch);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t k = 0; k < classes; ++k) {
          const auto idx = static_cast<std::size_t>(b * classes + k);
          const T onehot = k == labels[static_cast<std::size_t>(b)] ? T(1) : T(0);
          g[idx] += scale * (probs[idx] - onehot);
        }
      }
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- weighted_sum ----------------------------------------------------------

template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& input, std::span<const T> weights) {
  require(static_cast<std::int64_t>(weights.size()) == input.numel(),
          "weighted_sum needs one weight per element");
  auto out = make_output<T>("weighted_sum", {}, {input.node()});
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += input.values()[i] * weights[i];
  out->value[0] = acc;
  check_finite(*out);
  if (out->requires_grad) {
    std::vector<T> w(weights.begin(), weights.end());
    out->backward = [w = std::move(w)](TensorNode<T>& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < w.size(); ++i) g[i] += self.grad[0] * w[i];
    };
  }
  return BasicTensor<T>(std::move(out));
}

// ---- Adam ------------------------------------------------------------------

Adam::Adam(std::vector<Tensor> params, Options options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0f);
  }
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  const auto b1 = static_cast<float>(options_.beta1);
  const auto b2 = static_cast<float>(options_.beta2);
  const auto step_size = static_cast<float>(options_.lr / bc1);
  const auto inv_bc2_sqrt = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(options_.epsilon);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    auto values = p.values();
    auto grads = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const float g = grads[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      values[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_bc2_sqrt + eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

// ---- instantiations --------------------------------------------------------

#define CQTNET_INSTANTIATE(T)                                                              \
  template class BasicTensor<T>;                                                           \
  template std::vector<TensorNode<T>*> topological_order(const BasicTensor<T>&);          \
  template void backward(const BasicTensor<T>&);                                           \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                 const BasicTensor<T>&, const Conv2dOptions&);             \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, std::int64_t, std::int64_t,     \
                                    std::int64_t, std::int64_t);                           \
  template BasicTensor<T> adaptive_avg_pool2d(const BasicTensor<T>&);                      \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                 const BasicTensor<T>&);                                   \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                     \
  template BasicTensor<T> batchnorm2d(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                      const BasicTensor<T>&, BatchNormStats<T>&, Mode);    \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>); \
  template BasicTensor<T> weighted_sum(const BasicTensor<T>&, std::span<const T>);

CQTNET_INSTANTIATE(float)
CQTNET_INSTANTIATE(double)

#undef CQTNET_INSTANTIATE

}  // namespace cqtnet
