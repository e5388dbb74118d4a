#include "cqtnet/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "cqtnet/errors.hpp"
#include "cqtnet/rng.hpp"

namespace cqtnet {

using nlohmann::json;

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

ConvSpec conv(int kh, int kw, int channels, int dw) {
  return ConvSpec{kh, kw, channels, 1, dw};
}

PoolSpec time_pool() { return PoolSpec{1, 2, 1, 2}; }

Tensor kaiming_uniform(Rng& rng, Shape shape, std::int64_t fan_in) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(values), true);
}

void check_positive(int value, const char* what) {
  if (value <= 0) fail(ErrorKind::kConfig, std::string(what) + " must be positive");
}

}  // namespace

ModelConfig default_config(int num_classes) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.layers = {
      conv(12, 3, 32, 1),  conv(13, 3, 64, 2),  time_pool(),
      conv(13, 3, 64, 1),  conv(3, 3, 64, 2),   time_pool(),
      conv(3, 3, 128, 1),  conv(3, 3, 128, 2),  time_pool(),
      conv(3, 3, 256, 1),  conv(3, 3, 256, 2),  time_pool(),
      conv(3, 3, 512, 1),  conv(3, 3, 512, 1),
  };
  return c;
}

ModelConfig ablation_config(const std::set<int>& pools_to_widen, int num_classes) {
  ModelConfig c = default_config(num_classes);
  for (int id : pools_to_widen) {
    if (id < 2 || id > static_cast<int>(pool_count(c))) {
      fail(ErrorKind::kConfig, "invalid pool id " + std::to_string(id));
    }
  }
  int pool_id = 0;
  for (auto& layer : c.layers) {
    if (auto* pool = std::get_if<PoolSpec>(&layer)) {
      ++pool_id;
      if (pools_to_widen.contains(pool_id)) *pool = PoolSpec{2, 2, 2, 2};
    }
  }
  return c;
}

ModelConfig narrow_config(ModelConfig config, int divisor) {
  check_positive(divisor, "channel divisor");
  for (auto& layer : config.layers) {
    if (auto* c = std::get_if<ConvSpec>(&layer)) {
      c->channels = (c->channels + divisor - 1) / divisor;
    }
  }
  return config;
}

std::size_t conv_count(const ModelConfig& config) {
  return static_cast<std::size_t>(std::count_if(
      config.layers.begin(), config.layers.end(),
      [](const LayerSpec& l) { return std::holds_alternative<ConvSpec>(l); }));
}

std::size_t pool_count(const ModelConfig& config) {
  return config.layers.size() - conv_count(config);
}

void validate_config(const ModelConfig& config) {
  if (conv_count(config) == 0) fail(ErrorKind::kConfig, "config has no convolution");
  if (!std::holds_alternative<ConvSpec>(config.layers.front())) {
    fail(ErrorKind::kConfig, "first layer must be a convolution");
  }
  check_positive(config.input_height, "input_height");
  check_positive(config.embedding_dim, "embedding_dim");
  check_positive(config.num_classes, "num_classes");
  for (const auto& layer : config.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      check_positive(c->kernel_h, "conv kernel height");
      check_positive(c->kernel_w, "conv kernel width");
      check_positive(c->channels, "conv channels");
      check_positive(c->dilation_h, "conv dilation");
      check_positive(c->dilation_w, "conv dilation");
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      check_positive(p.kernel_h, "pool kernel height");
      check_positive(p.kernel_w, "pool kernel width");
      check_positive(p.stride_h, "pool stride");
      check_positive(p.stride_w, "pool stride");
    }
  }
  if (output_height(config) < 1) {
    fail(ErrorKind::kConfig, "feature map height collapses to zero for input height " +
                                 std::to_string(config.input_height));
  }
}

ReceptiveField receptive_field(const ModelConfig& config, std::size_t convs) {
  ReceptiveField rf;
  std::int64_t jump_h = 1, jump_w = 1;
  std::size_t seen = 0;
  for (const auto& layer : config.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      if (seen == convs) break;
      ++seen;
      rf.height += static_cast<std::int64_t>(c->kernel_h - 1) * c->dilation_h * jump_h;
      rf.width += static_cast<std::int64_t>(c->kernel_w - 1) * c->dilation_w * jump_w;
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      rf.height += (p.kernel_h - 1) * jump_h;
      rf.width += (p.kernel_w - 1) * jump_w;
      jump_h *= p.stride_h;
      jump_w *= p.stride_w;
    }
  }
  return rf;
}

std::int64_t total_vertical_stride(const ModelConfig& config) {
  std::int64_t stride = 1;
  for (const auto& layer : config.layers) {
    if (const auto* p = std::get_if<PoolSpec>(&layer)) stride *= p->stride_h;
  }
  return stride;
}

std::vector<std::pair<std::int64_t, std::int64_t>> layer_shapes(const ModelConfig& config,
                                                                std::int64_t frames) {
  std::vector<std::pair<std::int64_t, std::int64_t>> shapes;
  std::int64_t h = config.input_height, w = frames;
  for (const auto& layer : config.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      h = conv_output_size(h, c->kernel_h, 1, c->dilation_h);
      w = conv_output_size(w, c->kernel_w, 1, c->dilation_w);
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      h = pool_output_size(h, p.kernel_h, p.stride_h);
      w = pool_output_size(w, p.kernel_w, p.stride_w);
    }
    if (h < 1 || w < 1) return {};
    shapes.emplace_back(h, w);
  }
  return shapes;
}

std::int64_t output_height(const ModelConfig& config) {
  std::int64_t h = config.input_height;
  for (const auto& layer : config.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      h = conv_output_size(h, c->kernel_h, 1, c->dilation_h);
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      h = pool_output_size(h, p.kernel_h, p.stride_h);
    }
    if (h < 1) return 0;
  }
  return h;
}

std::int64_t min_input_length(const ModelConfig& config) {
  // Walk backwards from a single output column to the smallest input that
  // produces it.
  std::int64_t width = 1;
  for (auto it = config.layers.rbegin(); it != config.layers.rend(); ++it) {
    if (const auto* c = std::get_if<ConvSpec>(&*it)) {
      width = width + static_cast<std::int64_t>(c->kernel_w - 1) * c->dilation_w;
    } else {
      const auto& p = std::get<PoolSpec>(*it);
      width = (width - 1) * p.stride_w + p.kernel_w;
    }
  }
  return width;
}

std::string config_to_json(const ModelConfig& config) {
  json layers = json::array();
  for (const auto& layer : config.layers) {
    if (const auto* c = std::get_if<ConvSpec>(&layer)) {
      layers.push_back({{"type", "conv"},
                        {"kernel", {c->kernel_h, c->kernel_w}},
                        {"channels", c->channels},
                        {"dilation", {c->dilation_h, c->dilation_w}}});
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      layers.push_back({{"type", "pool"},
                        {"kernel", {p.kernel_h, p.kernel_w}},
                        {"stride", {p.stride_h, p.stride_w}}});
    }
  }
  json j = {{"layers", layers},
            {"input_height", config.input_height},
            {"embedding_dim", config.embedding_dim},
            {"num_classes", config.num_classes},
            {"use_batchnorm", config.use_batchnorm}};
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  ModelConfig config;
  try {
    const json j = json::parse(text);
    for (const auto& l : j.at("layers")) {
      const std::string type = l.at("type");
      if (type == "conv") {
        ConvSpec c;
        c.kernel_h = l.at("kernel").at(0);
        c.kernel_w = l.at("kernel").at(1);
        c.channels = l.at("channels");
        c.dilation_h = l.value("dilation", json::array({1, 1})).at(0);
        c.dilation_w = l.value("dilation", json::array({1, 1})).at(1);
        if (l.contains("stride") && (l["stride"].at(0) != 1 || l["stride"].at(1) != 1)) {
          fail(ErrorKind::kConfig, "convolution strides must be 1x1");
        }
        config.layers.emplace_back(c);
      } else if (type == "pool") {
        PoolSpec p;
        p.kernel_h = l.at("kernel").at(0);
        p.kernel_w = l.at("kernel").at(1);
        p.stride_h = l.at("stride").at(0);
        p.stride_w = l.at("stride").at(1);
        config.layers.emplace_back(p);
      } else {
        fail(ErrorKind::kConfig, "unknown layer type '" + type + "'");
      }
    }
    config.input_height = j.value("input_height", kCqtBins);
    config.embedding_dim = j.value("embedding_dim", 300);
    config.num_classes = j.value("num_classes", 4611);
    config.use_batchnorm = j.value("use_batchnorm", true);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed model config: ") + e.what());
  }
  validate_config(config);
  return config;
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return config_from_json(buffer.str());
}

// ---- CqtNet ----------------------------------------------------------------

CqtNet::CqtNet(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  validate_config(config_);
  Rng rng(seed);
  std::int64_t in_channels = 1;
  for (const auto& layer : config_.layers) {
    const auto* spec = std::get_if<ConvSpec>(&layer);
    if (!spec) continue;
    ConvBlock block;
    block.spec = *spec;
    const std::int64_t fan_in = in_channels * spec->kernel_h * spec->kernel_w;
    block.weight = kaiming_uniform(rng, {spec->channels, in_channels, spec->kernel_h, spec->kernel_w},
                                   fan_in);
    block.bias = Tensor::zeros({spec->channels}, true);
    block.gamma = Tensor::full({spec->channels}, 1.0f, true);
    block.beta = Tensor::zeros({spec->channels}, true);
    convs_.push_back(std::move(block));
    bn_stats_.emplace_back(static_cast<std::size_t>(spec->channels));
    in_channels = spec->channels;
  }
  fc0_weight_ = kaiming_uniform(rng, {config_.embedding_dim, in_channels}, in_channels);
  fc0_bias_ = Tensor::zeros({config_.embedding_dim}, true);
  fc1_weight_ = kaiming_uniform(rng, {config_.num_classes, config_.embedding_dim},
                                config_.embedding_dim);
  fc1_bias_ = Tensor::zeros({config_.num_classes}, true);
}

std::pair<Tensor, Tensor> CqtNet::forward(const Tensor& batch, Mode mode) {
  if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != config_.input_height) {
    fail(ErrorKind::kShape, "expected N x 1 x " + std::to_string(config_.input_height) +
                                " x T input, got " + shape_string(batch.shape()));
  }
  const std::int64_t minimum = min_input_length(config_);
  if (batch.dim(3) < minimum) {
    fail(ErrorKind::kTooShort, "input has " + std::to_string(batch.dim(3)) +
                                   " frames; minimum input length is " +
                                   std::to_string(minimum));
  }
  Tensor h = batch;
  std::size_t block = 0;
  for (const auto& layer : config_.layers) {
    if (std::holds_alternative<ConvSpec>(layer)) {
      ConvBlock& b = convs_[block];
      Conv2dOptions opt;
      opt.dilation_h = b.spec.dilation_h;
      opt.dilation_w = b.spec.dilation_w;
      h = conv2d(h, b.weight, b.bias, opt);
      if (config_.use_batchnorm) h = batchnorm2d(h, b.gamma, b.beta, bn_stats_[block], mode);
      h = relu(h);
      ++block;
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      h = maxpool2d(h, p.kernel_h, p.kernel_w, p.stride_h, p.stride_w);
    }
  }
  h = adaptive_avg_pool2d(h);
  h = h.reshape({h.dim(0), h.dim(1)});
  Tensor embedding = linear(h, fc0_weight_, fc0_bias_);
  Tensor logits = linear(embedding, fc1_weight_, fc1_bias_);
  return {embedding, logits};
}

Tensor CqtNet::forward_embedding(const Tensor& batch, Mode mode) {
  return forward(batch, mode).first;
}

Tensor CqtNet::forward_logits(const Tensor& batch, Mode mode) {
  return forward(batch, mode).second;
}

std::vector<NamedTensor> CqtNet::theta() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const std::string idx = std::to_string(i + 1);
    out.push_back({"conv" + idx + ".weight", convs_[i].weight});
    out.push_back({"conv" + idx + ".bias", convs_[i].bias});
    if (config_.use_batchnorm) {
      out.push_back({"bn" + idx + ".gamma", convs_[i].gamma});
      out.push_back({"bn" + idx + ".beta", convs_[i].beta});
    }
  }
  out.push_back({"fc0.weight", fc0_weight_});
  out.push_back({"fc0.bias", fc0_bias_});
  return out;
}

std::vector<NamedTensor> CqtNet::lambda() const {
  return {{"fc1.weight", fc1_weight_}, {"fc1.bias", fc1_bias_}};
}

std::vector<NamedTensor> CqtNet::parameters() const {
  auto all = theta();
  for (auto& t : lambda()) all.push_back(std::move(t));
  return all;
}

std::vector<Tensor> CqtNet::parameter_tensors() const {
  std::vector<Tensor> out;
  for (auto& p : parameters()) out.push_back(p.tensor);
  return out;
}

void CqtNet::reset_batchnorm_stats() {
  for (auto& s : bn_stats_) {
    std::fill(s.running_mean.begin(), s.running_mean.end(), 0.0f);
    std::fill(s.running_var.begin(), s.running_var.end(), 1.0f);
    s.initialized = true;
  }
}

void CqtNet::zero_classifier() {
  for (auto& v : fc1_weight_.values()) v = 0.0f;
  for (auto& v : fc1_bias_.values()) v = 0.0f;
}

Tensor make_batch(std::span<const CqtMatrix> items) {
  if (items.empty()) fail(ErrorKind::kInvalidInput, "empty batch");
  const int rows = items[0].rows, cols = items[0].cols;
  std::vector<float> values;
  values.reserve(items.size() * static_cast<std::size_t>(rows) * cols);
  for (const auto& m : items) {
    if (m.rows != rows || m.cols != cols) {
      fail(ErrorKind::kShape, "batch items must share a shape");
    }
    values.insert(values.end(), m.data.begin(), m.data.end());
  }
  return Tensor::from({static_cast<std::int64_t>(items.size()), 1, rows, cols},
                      std::move(values), false);
}

// ---- optimizer state -------------------------------------------------------

AdamState capture_adam_state(const CqtNet& net, Adam& optimizer) {
  AdamState state;
  state.step = optimizer.step_count();
  const auto params = net.parameters();
  if (params.size() != optimizer.params().size()) {
    fail(ErrorKind::kInvalidInput, "optimizer does not match network parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.first_moments[params[i].name] = optimizer.first_moments()[i];
    state.second_moments[params[i].name] = optimizer.second_moments()[i];
  }
  return state;
}

void restore_adam_state(const CqtNet& net, const AdamState& state, Adam& optimizer) {
  const auto params = net.parameters();
  if (params.size() != optimizer.params().size()) {
    fail(ErrorKind::kInvalidInput, "optimizer does not match network parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto m = state.first_moments.find(params[i].name);
    const auto v = state.second_moments.find(params[i].name);
    if (m == state.first_moments.end() || v == state.second_moments.end()) {
      fail(ErrorKind::kFormat, "optimizer state missing tensor " + params[i].name);
    }
    if (m->second.size() != optimizer.first_moments()[i].size() ||
        v->second.size() != optimizer.second_moments()[i].size()) {
      fail(ErrorKind::kFormat, "optimizer state shape mismatch for " + params[i].name);
    }
    optimizer.first_moments()[i] = m->second;
    optimizer.second_moments()[i] = v->second;
  }
  optimizer.set_step_count(state.step);
}

// ---- checkpoint ------------------------------------------------------------

namespace {

void write_tensor(detail::ByteWriter& w, const std::string& name, const Shape& shape,
                  std::span<const float> values) {
  w.short_string(name);
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  for (float v : values) w.f32(v);
}

struct RawTensor {
  Shape shape;
  std::vector<float> values;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CqtNet& net,
                     const AdamState* optimizer) {
  json header = {{"config", json::parse(config_to_json(net.config()))}};
  json initialized = json::array();
  for (const auto& s : net.batchnorm_stats()) initialized.push_back(s.initialized);
  header["batchnorm_initialized"] = initialized;
  if (optimizer) header["optimizer"] = {{"step", optimizer->step}};
  const std::string header_text = header.dump();

  detail::ByteWriter w;
  w.tag("CQNT");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(header_text.size()));
  w.raw(header_text);
  for (const auto& p : net.parameters()) {
    write_tensor(w, p.name, p.tensor.shape(), p.tensor.values());
  }
  if (net.config().use_batchnorm) {
    const auto& stats = net.batchnorm_stats();
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const std::string idx = std::to_string(i + 1);
      const Shape shape{static_cast<std::int64_t>(stats[i].running_mean.size())};
      write_tensor(w, "bn" + idx + ".running_mean", shape, stats[i].running_mean);
      write_tensor(w, "bn" + idx + ".running_var", shape, stats[i].running_var);
    }
  }
  if (optimizer) {
    for (const auto& p : net.parameters()) {
      const auto m = optimizer->first_moments.find(p.name);
      const auto v = optimizer->second_moments.find(p.name);
      if (m == optimizer->first_moments.end() || v == optimizer->second_moments.end()) {
        fail(ErrorKind::kInvalidInput, "optimizer state missing tensor " + p.name);
      }
      write_tensor(w, "adam.m." + p.name, p.tensor.shape(), m->second);
      write_tensor(w, "adam.v." + p.name, p.tensor.shape(), v->second);
    }
  }
  detail::write_file(path, w.bytes());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  r.expect_tag("CQNT");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  }
  json header;
  try {
    header = json::parse(r.raw(r.u32()));
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed checkpoint header: ") + e.what());
  }
  ModelConfig config = config_from_json(header.at("config").dump());

  std::map<std::string, RawTensor> tensors;
  while (!r.at_end()) {
    std::string name = r.short_string();
    RawTensor t;
    const std::uint8_t rank = r.u8();
    for (std::uint8_t i = 0; i < rank; ++i) t.shape.push_back(r.u32());
    t.values.resize(static_cast<std::size_t>(shape_numel(t.shape)));
    r.f32_array(t.values.data(), t.values.size());
    if (!tensors.emplace(name, std::move(t)).second) {
      fail(ErrorKind::kFormat, "duplicate tensor " + name);
    }
  }

  auto take = [&](const std::string& name, const Shape& expected) -> std::vector<float> {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorKind::kFormat, "checkpoint is missing tensor " + name);
    if (it->second.shape != expected) {
      fail(ErrorKind::kFormat, "tensor " + name + " has shape " + shape_string(it->second.shape) +
                                   ", config expects " + shape_string(expected));
    }
    auto values = std::move(it->second.values);
    tensors.erase(it);
    return values;
  };

  CqtNet net(config, 0);
  for (auto& p : net.parameters()) {
    auto values = take(p.name, p.tensor.shape());
    std::copy(values.begin(), values.end(), p.tensor.values().begin());
  }
  if (config.use_batchnorm) {
    auto& stats = net.batchnorm_stats();
    const json initialized = header.value("batchnorm_initialized", json::array());
    for (std::size_t i = 0; i < stats.size(); ++i) {
      const std::string idx = std::to_string(i + 1);
      const Shape shape{static_cast<std::int64_t>(stats[i].running_mean.size())};
      stats[i].running_mean = take("bn" + idx + ".running_mean", shape);
      stats[i].running_var = take("bn" + idx + ".running_var", shape);
      stats[i].initialized = i < initialized.size() && initialized[i].get<bool>();
    }
  }
  std::optional<AdamState> optimizer;
  if (header.contains("optimizer")) {
    AdamState state;
    state.step = header["optimizer"].value("step", std::int64_t{0});
    for (const auto& p : net.parameters()) {
      state.first_moments[p.name] = take("adam.m." + p.name, p.tensor.shape());
      state.second_moments[p.name] = take("adam.v." + p.name, p.tensor.shape());
    }
    optimizer = std::move(state);
  }
  if (!tensors.empty()) {
    fail(ErrorKind::kFormat, "unexpected tensor " + tensors.begin()->first);
  }
  return Checkpoint{std::move(net), std::move(optimizer)};
}

}  // namespace cqtnet
