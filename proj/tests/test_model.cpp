#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "cqtnet/model.hpp"
#include "support.hpp"

using namespace cqtnet;
using testing::error_kind;

namespace {

// Walks the layer list with the textbook size formulas; true when every
// layer leaves at least one row and one column.
bool fits(const ModelConfig& c, std::int64_t frames) {
  std::int64_t h = c.input_height;
  std::int64_t w = frames;
  for (const auto& layer : c.layers) {
    if (const auto* conv = std::get_if<ConvSpec>(&layer)) {
      h -= (conv->kernel_h - 1) * conv->dilation_h;
      w -= (conv->kernel_w - 1) * conv->dilation_w;
    } else {
      const auto& p = std::get<PoolSpec>(layer);
      if (h < p.kernel_h || w < p.kernel_w) return false;
      h = (h - p.kernel_h) / p.stride_h + 1;
      w = (w - p.kernel_w) / p.stride_w + 1;
    }
    if (h < 1 || w < 1) return false;
  }
  return true;
}

std::int64_t scan_min_length(const ModelConfig& c) {
  for (std::int64_t t = 1; t <= 400; ++t) {
    if (fits(c, t)) return t;
  }
  return -1;
}

Tensor batch_of(std::int64_t n, std::int64_t frames, float seed) {
  std::vector<float> v(static_cast<std::size_t>(n * 84 * frames));
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::abs(std::sin(seed + 0.37f * static_cast<float>(i % 9973)));
  }
  return Tensor::from({n, 1, 84, frames}, std::move(v));
}

// Splits a checkpoint into its header bytes and named tensor records.
struct Record {
  std::string name;
  std::vector<unsigned char> bytes;
};

struct CheckpointFile {
  std::vector<unsigned char> head;
  std::vector<Record> records;

  static CheckpointFile read(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::vector<unsigned char> b{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    auto u32 = [&](std::size_t at) {
      std::uint32_t v;
      std::memcpy(&v, b.data() + at, 4);
      return v;
    };
    CheckpointFile f;
    std::size_t pos = 12 + u32(8);
    f.head.assign(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(pos));
    while (pos < b.size()) {
      const std::size_t start = pos;
      std::uint16_t len;
      std::memcpy(&len, b.data() + pos, 2);
      Record r;
      r.name.assign(reinterpret_cast<const char*>(b.data() + pos + 2), len);
      pos += 2 + len;
      const unsigned rank = b[pos++];
      std::size_t numel = 1;
      for (unsigned i = 0; i < rank; ++i, pos += 4) numel *= u32(pos);
      pos += 4 * numel;
      r.bytes.assign(b.begin() + static_cast<std::ptrdiff_t>(start),
                     b.begin() + static_cast<std::ptrdiff_t>(pos));
      f.records.push_back(std::move(r));
    }
    return f;
  }

  void write(const std::filesystem::path& p) const {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
    for (const auto& r : records) {
      out.write(reinterpret_cast<const char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size()));
    }
  }
};

ModelConfig small_config(int classes = 5) { return narrow_config(default_config(classes), 16); }

}  // namespace

TEST_CASE("default layer table") {
  const ModelConfig c = default_config();
  CHECK(conv_count(c) == 10);
  CHECK(pool_count(c) == 4);
  CHECK(c.embedding_dim == 300);
  CHECK(c.num_classes == 4611);
  std::vector<ConvSpec> convs;
  for (const auto& l : c.layers) {
    if (const auto* conv = std::get_if<ConvSpec>(&l)) convs.push_back(*conv);
    else CHECK(std::get<PoolSpec>(l).stride_h == 1);
  }
  CHECK(convs[0].kernel_h == 12);
  CHECK(convs[1].kernel_h == 13);
  CHECK(convs[2].kernel_h == 13);
  const std::vector<int> channels{32, 64, 64, 64, 128, 128, 256, 256, 512, 512};
  for (std::size_t i = 0; i < convs.size(); ++i) CHECK(convs[i].channels == channels[i]);
  validate_config(c);
}

TEST_CASE("receptive field and vertical stride") {
  const ModelConfig c = default_config();
  CHECK(receptive_field(c, 3).height == 12 + (13 - 1) + (13 - 1));
  CHECK(receptive_field(c, 3).height == 36);
  CHECK(receptive_field(c, 1).height == 12);
  CHECK(receptive_field(c, 1).width == 3);
  // Conv2 has time dilation 2; Pool1 follows it and doubles the jump for Conv3.
  CHECK(receptive_field(c, 2).width == 3 + 4 + 1);
  CHECK(receptive_field(c, 3).width == 3 + 4 + 1 + 2 * 2);
  CHECK(total_vertical_stride(c) == 1);
}

TEST_CASE("ablation configs") {
  CHECK(total_vertical_stride(ablation_config({4})) == 2);
  CHECK(total_vertical_stride(ablation_config({3, 4})) == 4);
  CHECK(total_vertical_stride(ablation_config({2, 3, 4})) == 8);
  CHECK(ablation_config({}) == default_config());
  CHECK(error_kind([] { ablation_config({5}); }) == ErrorKind::kConfig);
  CHECK(error_kind([] { ablation_config({0}); }) == ErrorKind::kConfig);
  CHECK(error_kind([] { ablation_config({1}); }) == ErrorKind::kConfig);
  validate_config(ablation_config({4}));
  validate_config(ablation_config({3, 4}));
  // Without padding the height reaches 2 rows before Conv9's 3-row kernel.
  CHECK(output_height(ablation_config({2, 3, 4})) == 0);
  CHECK(error_kind([] { validate_config(ablation_config({2, 3, 4})); }) == ErrorKind::kConfig);
}

TEST_CASE("minimum input length") {
  CHECK(min_input_length(default_config()) == 170);
  CHECK(scan_min_length(default_config()) == 170);
  CHECK(min_input_length(ablation_config({4})) == scan_min_length(ablation_config({4})));
  CHECK(min_input_length(ablation_config({3, 4})) == scan_min_length(ablation_config({3, 4})));
  CHECK(min_input_length(small_config()) == 170);

  ModelConfig one;
  one.layers = {ConvSpec{12, 3, 8, 1, 1}};
  CHECK(min_input_length(one) == 3);

  for (std::int64_t t : {169, 170, 171, 300}) {
    CHECK(layer_shapes(default_config(), t).empty() == !fits(default_config(), t));
  }
  const auto shapes = layer_shapes(default_config(), 200);
  REQUIRE(shapes.size() == default_config().layers.size());
  CHECK(shapes[0] == std::pair<std::int64_t, std::int64_t>{73, 198});
  CHECK(shapes[1] == std::pair<std::int64_t, std::int64_t>{61, 194});
  CHECK(shapes[2] == std::pair<std::int64_t, std::int64_t>{61, 97});
}

TEST_CASE("embeddings are 300-d for every admissible length") {
  CqtNet net(default_config(8), 1);
  net.reset_batchnorm_stats();
  for (std::int64_t t : {170, 207, 200, 300, 400, 517}) {
    const Tensor e = net.forward_embedding(batch_of(1, t, 0.1f), Mode::kEval);
    CHECK(e.shape() == Shape{1, 300});
    for (float v : e.values()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("too-short inputs name the minimum") {
  CqtNet net(small_config(), 2);
  net.reset_batchnorm_stats();
  try {
    net.forward_embedding(batch_of(1, 169, 0.0f), Mode::kEval);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTooShort);
    CHECK(std::string(e.what()).find("170") != std::string::npos);
  }
  CHECK(error_kind([&] { net.forward_embedding(Tensor::zeros({1, 1, 80, 200}), Mode::kEval); }) ==
        ErrorKind::kShape);
}

TEST_CASE("eval forward is deterministic and finite") {
  CqtNet net(small_config(30), 3);
  net.reset_batchnorm_stats();
  const Tensor zeros = Tensor::zeros({1, 1, 84, 200});
  const Tensor ez = net.forward_embedding(zeros, Mode::kEval);
  for (float v : ez.values()) CHECK(std::isfinite(v));

  const Tensor x = batch_of(1, 230, 0.5f);
  const Tensor a = net.forward_embedding(x, Mode::kEval);
  const Tensor b = net.forward_embedding(x, Mode::kEval);
  CHECK(std::vector<float>(a.values().begin(), a.values().end()) ==
        std::vector<float>(b.values().begin(), b.values().end()));

  // Duplicated rows give identical logits.
  std::vector<float> two(x.values().begin(), x.values().end());
  two.insert(two.end(), x.values().begin(), x.values().end());
  const Tensor logits = net.forward_logits(Tensor::from({2, 1, 84, 230}, two), Mode::kEval);
  CHECK(logits.shape() == Shape{2, 30});
  for (int k = 0; k < 30; ++k) CHECK(logits.values()[static_cast<std::size_t>(k)] == logits.values()[static_cast<std::size_t>(30 + k)]);
}

TEST_CASE("eval before any statistics is rejected") {
  CqtNet net(small_config(), 4);
  CHECK(error_kind([&] { net.forward_embedding(batch_of(1, 200, 0.0f), Mode::kEval); }) ==
        ErrorKind::kUninitializedStats);
  net.forward_embedding(batch_of(2, 200, 0.0f), Mode::kTrain);
  net.forward_embedding(batch_of(1, 200, 0.0f), Mode::kEval);
}

TEST_CASE("theta and lambda partition the parameters") {
  CqtNet net(default_config(4611), 5);
  std::set<std::string> theta, lambda, all;
  for (const auto& p : net.theta()) theta.insert(p.name);
  for (const auto& p : net.lambda()) lambda.insert(p.name);
  for (const auto& p : net.parameters()) CHECK(all.insert(p.name).second);
  CHECK(theta.size() + lambda.size() == all.size());
  for (const auto& n : lambda) CHECK_FALSE(theta.contains(n));
  std::set<std::string> both = theta;
  both.insert(lambda.begin(), lambda.end());
  CHECK(both == all);
  CHECK(lambda == std::set<std::string>{"fc1.weight", "fc1.bias"});
  CHECK(theta.contains("fc0.weight"));
  CHECK(theta.contains("conv10.weight"));
  for (const auto& p : net.parameters()) {
    if (p.name == "fc0.weight") CHECK(p.tensor.shape() == Shape{300, 512});
    if (p.name == "fc1.weight") CHECK(p.tensor.shape() == Shape{4611, 300});
    if (p.name == "conv1.weight") CHECK(p.tensor.shape() == Shape{32, 1, 12, 3});
  }
  CHECK(net.parameter_tensors().size() == all.size());
}

TEST_CASE("initialisation") {
  CqtNet net(small_config(), 6);
  for (const auto& p : net.parameters()) {
    const auto& s = p.tensor.shape();
    if (p.name.ends_with(".weight") && s.size() >= 2) {
      std::int64_t fan_in = 1;
      for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (float v : p.tensor.values()) CHECK(std::abs(v) <= bound);
    } else if (p.name.ends_with(".bias") || p.name.ends_with(".beta")) {
      for (float v : p.tensor.values()) CHECK(v == 0.0f);
    } else if (p.name.ends_with(".gamma")) {
      for (float v : p.tensor.values()) CHECK(v == 1.0f);
    }
  }
  CqtNet same(small_config(), 6);
  CHECK(std::vector<float>(same.parameters()[0].tensor.values().begin(), same.parameters()[0].tensor.values().end()) ==
        std::vector<float>(net.parameters()[0].tensor.values().begin(), net.parameters()[0].tensor.values().end()));
}

TEST_CASE("zeroed classifier gives uniform logits") {
  CqtNet net(small_config(7), 7);
  net.reset_batchnorm_stats();
  net.zero_classifier();
  const Tensor logits = net.forward_logits(batch_of(2, 200, 1.0f), Mode::kEval);
  for (float v : logits.values()) CHECK(v == 0.0f);
}

TEST_CASE("config JSON") {
  for (const auto& c : {default_config(12), ablation_config({3, 4}, 3), small_config()}) {
    CHECK(config_from_json(config_to_json(c)) == c);
  }
  CHECK(error_kind([] {
          config_from_json(R"({"layers":[{"type":"conv","kernel":[3,3],"channels":4,"stride":[1,2]}]})");
        }) == ErrorKind::kConfig);
  CHECK(error_kind([] { config_from_json(R"({"layers":[{"type":"dense"}]})"); }) == ErrorKind::kConfig);
  CHECK(error_kind([] { config_from_json("[]"); }) == ErrorKind::kConfig);
  CHECK(error_kind([] { config_from_json(R"({"layers":[{"type":"pool","kernel":[1,2],"stride":[1,2]}]})"); }) ==
        ErrorKind::kConfig);
}

TEST_CASE("make_batch") {
  std::vector<CqtMatrix> items{CqtMatrix(84, 10), CqtMatrix(84, 10)};
  items[1].at(3, 4) = 2.0f;
  const Tensor b = make_batch(items);
  CHECK(b.shape() == Shape{2, 1, 84, 10});
  CHECK(b.values()[84 * 10 + 3 * 10 + 4] == 2.0f);
  items.push_back(CqtMatrix(84, 11));
  CHECK(error_kind([&] { make_batch(items); }) == ErrorKind::kShape);
}

TEST_CASE("checkpoint round trip") {
  testing::TempDir dir("model");
  CqtNet net(small_config(6), 8);
  const Tensor x = batch_of(3, 210, 0.2f);
  net.forward_logits(x, Mode::kTrain);
  const auto path = dir.path() / "a.ckpt";
  save_checkpoint(path, net);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.net.config() == net.config());
  CHECK_FALSE(back.optimizer.has_value());
  const auto pa = net.parameters();
  const auto pb = back.net.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(std::memcmp(pa[i].tensor.values().data(), pb[i].tensor.values().data(),
                      4 * pa[i].tensor.values().size()) == 0);
  }
  for (std::size_t i = 0; i < net.batchnorm_stats().size(); ++i) {
    CHECK(back.net.batchnorm_stats()[i].running_mean == net.batchnorm_stats()[i].running_mean);
    CHECK(back.net.batchnorm_stats()[i].running_var == net.batchnorm_stats()[i].running_var);
    CHECK(back.net.batchnorm_stats()[i].initialized);
  }
  const Tensor la = net.forward_logits(x, Mode::kEval);
  const Tensor lb = back.net.forward_logits(x, Mode::kEval);
  CHECK(std::vector<float>(la.values().begin(), la.values().end()) ==
        std::vector<float>(lb.values().begin(), lb.values().end()));

  // Saving the loaded network reproduces the file byte for byte.
  save_checkpoint(dir.path() / "b.ckpt", back.net);
  std::ifstream fa(path, std::ios::binary), fb(dir.path() / "b.ckpt", std::ios::binary);
  CHECK(std::string(std::istreambuf_iterator<char>(fa), {}) ==
        std::string(std::istreambuf_iterator<char>(fb), {}));
}

TEST_CASE("checkpoint keeps optimizer state") {
  testing::TempDir dir("model_adam");
  CqtNet net(small_config(3), 9);
  Adam opt(net.parameter_tensors(), {});
  const std::vector<int> targets{0, 2};
  backward(softmax_cross_entropy(net.forward_logits(batch_of(2, 200, 0.3f), Mode::kTrain),
                                 std::span<const int>(targets)));
  opt.step();
  const AdamState state = capture_adam_state(net, opt);
  save_checkpoint(dir.path() / "c.ckpt", net, &state);
  Checkpoint back = load_checkpoint(dir.path() / "c.ckpt");
  REQUIRE(back.optimizer.has_value());
  CHECK(back.optimizer->step == 1);
  CHECK(back.optimizer->first_moments == state.first_moments);
  CHECK(back.optimizer->second_moments == state.second_moments);
  Adam restored(back.net.parameter_tensors(), {});
  restore_adam_state(back.net, *back.optimizer, restored);
  CHECK(restored.step_count() == 1);
  CHECK(restored.first_moments() == opt.first_moments());
}

TEST_CASE("damaged checkpoints") {
  testing::TempDir dir("model_bad");
  CqtNet net(small_config(4), 10);
  net.reset_batchnorm_stats();
  const auto good = dir.path() / "good.ckpt";
  save_checkpoint(good, net);
  const auto bad = dir.path() / "bad.ckpt";
  auto expect_format = [&](const std::string& needle) {
    try {
      load_checkpoint(bad);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kFormat);
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };

  CheckpointFile f = CheckpointFile::read(good);
  REQUIRE(f.records.size() == net.parameters().size() + 2 * net.batchnorm_stats().size());

  SUBCASE("missing tensor") {
    CheckpointFile g = f;
    g.records.erase(g.records.begin() + 3);
    g.write(bad);
    expect_format(f.records[3].name);
  }
  SUBCASE("duplicate tensor") {
    CheckpointFile g = f;
    g.records.push_back(g.records[0]);
    g.write(bad);
    expect_format("duplicate");
  }
  SUBCASE("shape mismatch") {
    CheckpointFile g = f;
    // First dimension of conv1.weight.
    auto& r = g.records[0];
    REQUIRE(r.name == "conv1.weight");
    const std::size_t dim0 = 2 + r.name.size() + 1;
    std::uint32_t d;
    std::memcpy(&d, r.bytes.data() + dim0, 4);
    d -= 1;
    std::memcpy(r.bytes.data() + dim0, &d, 4);
    r.bytes.resize(r.bytes.size() - 4 * 1 * 12 * 3);
    g.write(bad);
    expect_format("conv1.weight");
  }
  SUBCASE("truncated") {
    CheckpointFile g = f;
    g.records.back().bytes.pop_back();
    g.write(bad);
    expect_format("");
  }
  SUBCASE("wrong magic and version") {
    CheckpointFile g = f;
    g.head[0] = 'X';
    g.write(bad);
    expect_format("");
    g = f;
    g.head[4] = 2;
    g.write(bad);
    expect_format("version");
  }
  CHECK(error_kind([] { load_checkpoint("/nonexistent.ckpt"); }) == ErrorKind::kIo);
}
