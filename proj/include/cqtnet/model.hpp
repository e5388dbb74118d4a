#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cqtnet/cqt.hpp"
#include "cqtnet/tensor.hpp"

namespace cqtnet {

// Convolutions always use stride 1x1 and no padding.
struct ConvSpec {
  int kernel_h = 3;
  int kernel_w = 3;
  int channels = 64;
  int dilation_h = 1;
  int dilation_w = 1;

  bool operator==(const ConvSpec&) const = default;
};

struct PoolSpec {
  int kernel_h = 1;
  int kernel_w = 2;
  int stride_h = 1;
  int stride_w = 2;

  bool operator==(const PoolSpec&) const = default;
};

using LayerSpec = std::variant<ConvSpec, PoolSpec>;

struct ModelConfig {
  std::vector<LayerSpec> layers;
  int input_height = kCqtBins;
  int embedding_dim = 300;
  int num_classes = 4611;
  bool use_batchnorm = true;

  bool operator==(const ModelConfig&) const = default;
};

// Conv1..Conv10 with Pool1..Pool4 after Conv2, Conv4, Conv6 and Conv8. All
// pools have vertical stride 1; the first three kernels are 12, 13 and 13
// bins tall.
ModelConfig default_config(int num_classes = 4611);

// default_config with the listed pools (ids in {2,3,4}) replaced by 2x2
// kernels with 2x2 stride.
ModelConfig ablation_config(const std::set<int>& pools_to_widen, int num_classes = 4611);

// Same topology with every conv's channel count divided by `divisor`
// (rounded up). Used for CPU-sized experiments.
ModelConfig narrow_config(ModelConfig config, int divisor);

// Throws a config error for non-positive sizes or a zero-size feature map at
// the configured input height.
void validate_config(const ModelConfig& config);

std::size_t conv_count(const ModelConfig& config);
std::size_t pool_count(const ModelConfig& config);

struct ReceptiveField {
  std::int64_t height = 1;
  std::int64_t width = 1;
};

// Receptive field of units after the first `convs` convolutions (and every
// pool before the next one).
ReceptiveField receptive_field(const ModelConfig& config, std::size_t convs);

// Product of vertical strides over all layers.
std::int64_t total_vertical_stride(const ModelConfig& config);

// Feature-map height after the last layer for the configured input height;
// 0 if some layer does not fit.
std::int64_t output_height(const ModelConfig& config);

// Spatial size after every layer for an input of input_height x frames; the
// vector is empty if a layer does not fit.
std::vector<std::pair<std::int64_t, std::int64_t>> layer_shapes(const ModelConfig& config,
                                                                std::int64_t frames);

// Smallest number of frames for which every layer output has width >= 1.
std::int64_t min_input_length(const ModelConfig& config);

std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);
ModelConfig load_config(const std::filesystem::path& path);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// CQT-Net parameter store. theta holds every conv block and FC0; lambda
// holds FC1.
class CqtNet {
 public:
  CqtNet(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // batch is N x 1 x input_height x T. Returns N x embedding_dim.
  Tensor forward_embedding(const Tensor& batch, Mode mode);
  // FC1 applied to the embedding; N x num_classes.
  Tensor forward_logits(const Tensor& batch, Mode mode);
  // Both outputs from one pass.
  std::pair<Tensor, Tensor> forward(const Tensor& batch, Mode mode);

  std::vector<NamedTensor> theta() const;
  std::vector<NamedTensor> lambda() const;
  std::vector<NamedTensor> parameters() const;
  std::vector<Tensor> parameter_tensors() const;

  std::vector<BatchNormStats<float>>& batchnorm_stats() { return bn_stats_; }
  const std::vector<BatchNormStats<float>>& batchnorm_stats() const { return bn_stats_; }

  // Running mean 0 and variance 1 for every batchnorm layer, marked as
  // initialised.
  void reset_batchnorm_stats();
  // Zeroes FC1 weights and bias so logits are uniform.
  void zero_classifier();

 private:
  struct ConvBlock {
    ConvSpec spec;
    Tensor weight, bias, gamma, beta;
  };

  ModelConfig config_;
  std::vector<ConvBlock> convs_;
  std::vector<BatchNormStats<float>> bn_stats_;
  Tensor fc0_weight_, fc0_bias_, fc1_weight_, fc1_bias_;
};

// Stacks equally wide CQT matrices into an N x 1 x rows x cols tensor.
Tensor make_batch(std::span<const CqtMatrix> items);

struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<float>> first_moments;
  std::map<std::string, std::vector<float>> second_moments;
};

AdamState capture_adam_state(const CqtNet& net, Adam& optimizer);
void restore_adam_state(const CqtNet& net, const AdamState& state, Adam& optimizer);

struct Checkpoint {
  CqtNet net;
  std::optional<AdamState> optimizer;
};

// "CQNT" version 1: JSON header with the config, then named float tensors.
void save_checkpoint(const std::filesystem::path& path, const CqtNet& net,
                     const AdamState* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cqtnet
