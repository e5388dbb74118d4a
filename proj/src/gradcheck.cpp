#include "cqtnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cqtnet/errors.hpp"
#include "cqtnet/rng.hpp"

namespace cqtnet {

GradcheckReport gradcheck(const std::string& name,
                          const std::function<TensorD(const std::vector<TensorD>&)>& fn,
                          const std::vector<TensorD>& inputs, double tolerance,
                          double step) {
  GradcheckReport report;
  report.name = name;
  report.tolerance = tolerance;

  for (auto input : inputs) input.zero_grad();
  TensorD loss = fn(inputs);
  backward(loss);

  for (auto input : inputs) {
    if (!input.requires_grad()) continue;
    std::vector<double> analytic(input.values().size(), 0.0);
    if (input.has_grad()) std::copy(input.grad().begin(), input.grad().end(), analytic.begin());
    auto values = input.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double plus = fn(inputs).item();
      values[i] = saved - step;
      const double minus = fn(inputs).item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double abs_err = std::abs(analytic[i] - numeric);
      const double denom =
          std::max({std::abs(analytic[i]), std::abs(numeric), kGradcheckFloor});
      report.max_absolute_error = std::max(report.max_absolute_error, abs_err);
      report.max_relative_error = std::max(report.max_relative_error, abs_err / denom);
      ++report.checked_elements;
    }
  }
  report.passed = report.checked_elements > 0 && report.max_relative_error < tolerance;
  return report;
}

namespace {

TensorD random_tensor(Rng& rng, Shape shape, bool requires_grad, double scale = 1.0) {
  std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = scale * rng.normal();
  return TensorD::from(std::move(shape), std::move(values), requires_grad);
}

std::vector<double> random_weights(Rng& rng, std::int64_t n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

// Spreads values so that every pooling window has a unique maximum that is
// at least `gap` above the runner-up; finite differences then never cross a
// tie.
TensorD distinct_tensor(Rng& rng, Shape shape, double gap) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[order[i]] = (static_cast<double>(i) - n / 2.0) * gap;
  return TensorD::from(std::move(shape), std::move(values), true);
}

// Moves values away from the ReLU kink.
TensorD away_from_zero(Rng& rng, Shape shape, double margin) {
  auto t = random_tensor(rng, std::move(shape), true);
  for (auto& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
  }
  return t;
}

}  // namespace

std::vector<GradcheckReport> run_gradient_suite(double tolerance, unsigned seed) {
  Rng rng(seed);
  std::vector<GradcheckReport> reports;

  {
    // First layer: 12x3 kernel on a single-channel CQT slice.
    auto x = random_tensor(rng, {2, 1, 20, 10}, true);
    auto w = random_tensor(rng, {3, 1, 12, 3}, true, 0.3);
    auto b = random_tensor(rng, {3}, true);
    const auto proj = random_weights(rng, 2 * 3 * 9 * 8);
    reports.push_back(gradcheck(
        "conv2d 12x3",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2]), std::span<const double>(proj));
        },
        {x, w, b}, tolerance));
  }
  {
    // Full 84-bin input height.
    auto x = random_tensor(rng, {1, 1, 84, 16}, true);
    auto w = random_tensor(rng, {2, 1, 12, 3}, true, 0.3);
    auto b = random_tensor(rng, {2}, true);
    const auto proj = random_weights(rng, 2 * 73 * 14);
    reports.push_back(gradcheck(
        "conv2d 12x3 on 84 bins",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2]), std::span<const double>(proj));
        },
        {x, w, b}, tolerance));
  }
  {
    // Second layer: 13x3 kernel with time dilation 2.
    auto x = random_tensor(rng, {2, 3, 16, 12}, true);
    auto w = random_tensor(rng, {4, 3, 13, 3}, true, 0.2);
    auto b = random_tensor(rng, {4}, true);
    Conv2dOptions opt;
    opt.dilation_w = 2;
    const auto proj = random_weights(rng, 2 * 4 * 4 * 8);
    reports.push_back(gradcheck(
        "conv2d 13x3 dilation 1x2",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], opt), std::span<const double>(proj));
        },
        {x, w, b}, tolerance));
  }
  {
    auto x = random_tensor(rng, {1, 2, 8, 8}, true);
    auto w = random_tensor(rng, {3, 2, 3, 3}, true, 0.3);
    auto b = random_tensor(rng, {3}, true);
    Conv2dOptions opt;
    opt.dilation_w = 2;
    const auto proj = random_weights(rng, 3 * 6 * 4);
    reports.push_back(gradcheck(
        "conv2d 3x3 dilation 1x2",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(conv2d(in[0], in[1], in[2], opt), std::span<const double>(proj));
        },
        {x, w, b}, tolerance));
  }
  {
    auto x = distinct_tensor(rng, {2, 3, 6, 10}, 1e-2);
    const auto proj = random_weights(rng, 2 * 3 * 6 * 5);
    reports.push_back(gradcheck(
        "maxpool2d 1x2 stride 1x2",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(maxpool2d(in[0], 1, 2, 1, 2), std::span<const double>(proj));
        },
        {x}, tolerance));
  }
  {
    auto x = distinct_tensor(rng, {2, 2, 8, 6}, 1e-2);
    const auto proj = random_weights(rng, 2 * 2 * 4 * 3);
    reports.push_back(gradcheck(
        "maxpool2d 2x2 stride 2x2",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(maxpool2d(in[0], 2, 2, 2, 2), std::span<const double>(proj));
        },
        {x}, tolerance));
  }
  {
    auto x = random_tensor(rng, {2, 4, 7, 5}, true);
    const auto proj = random_weights(rng, 8);
    reports.push_back(gradcheck(
        "adaptive_avg_pool2d",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(adaptive_avg_pool2d(in[0]), std::span<const double>(proj));
        },
        {x}, tolerance));
  }
  {
    auto x = random_tensor(rng, {3, 16}, true);
    auto w = random_tensor(rng, {30, 16}, true, 0.25);
    auto b = random_tensor(rng, {30}, true);
    const auto proj = random_weights(rng, 3 * 30);
    reports.push_back(gradcheck(
        "linear",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(linear(in[0], in[1], in[2]), std::span<const double>(proj));
        },
        {x, w, b}, tolerance));
  }
  {
    auto x = away_from_zero(rng, {2, 3, 4, 5}, 1e-3);
    const auto proj = random_weights(rng, 2 * 3 * 4 * 5);
    reports.push_back(gradcheck(
        "relu",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(relu(in[0]), std::span<const double>(proj));
        },
        {x}, tolerance));
  }
  {
    auto x = random_tensor(rng, {2, 3, 5, 6}, true, 2.0);
    auto g = random_tensor(rng, {3}, true);
    auto b = random_tensor(rng, {3}, true);
    const auto proj = random_weights(rng, 2 * 3 * 5 * 6);
    BatchNormStats<double> stats(3);
    reports.push_back(gradcheck(
        "batchnorm2d train",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(batchnorm2d(in[0], in[1], in[2], stats, Mode::kTrain),
                              std::span<const double>(proj));
        },
        {x, g, b}, tolerance));
    reports.push_back(gradcheck(
        "batchnorm2d eval",
        [&](const std::vector<TensorD>& in) {
          return weighted_sum(batchnorm2d(in[0], in[1], in[2], stats, Mode::kEval),
                              std::span<const double>(proj));
        },
        {x, g, b}, tolerance));
  }
  {
    auto logits = random_tensor(rng, {4, 10}, true, 2.0);
    const std::vector<int> targets{3, 0, 9, 3};
    reports.push_back(gradcheck(
        "softmax_cross_entropy",
        [&](const std::vector<TensorD>& in) {
          return softmax_cross_entropy(in[0], std::span<const int>(targets));
        },
        {logits}, tolerance));
  }
  {
    // A miniature of the full network: conv, bn, relu, pool, dilated conv,
    // global pooling, two linear layers and the loss.
    auto x = random_tensor(rng, {3, 1, 16, 12}, true);
    auto w1 = random_tensor(rng, {2, 1, 12, 3}, true, 0.3);
    auto b1 = random_tensor(rng, {2}, true);
    auto g1 = random_tensor(rng, {2}, true);
    auto be1 = random_tensor(rng, {2}, true);
    auto w2 = random_tensor(rng, {3, 2, 3, 3}, true, 0.3);
    auto b2 = random_tensor(rng, {3}, true);
    auto f0 = random_tensor(rng, {5, 3}, true, 0.5);
    auto f0b = random_tensor(rng, {5}, true);
    auto f1 = random_tensor(rng, {4, 5}, true, 0.5);
    auto f1b = random_tensor(rng, {4}, true);
    const std::vector<int> targets{1, 3, 0};
    BatchNormStats<double> stats(2);
    Conv2dOptions dilated;
    dilated.dilation_w = 2;
    reports.push_back(gradcheck(
        "network chain",
        [&](const std::vector<TensorD>& in) {
          auto h = conv2d(in[0], in[1], in[2]);
          h = relu(batchnorm2d(h, in[3], in[4], stats, Mode::kTrain));
          h = maxpool2d(h, 1, 2, 1, 2);
          h = conv2d(h, in[5], in[6], dilated);
          h = adaptive_avg_pool2d(h);
          h = h.reshape({h.dim(0), h.dim(1)});
          h = linear(h, in[7], in[8]);
          h = linear(h, in[9], in[10]);
          return softmax_cross_entropy(h, std::span<const int>(targets));
        },
        {x, w1, b1, g1, be1, w2, b2, f0, f0b, f1, f1b}, tolerance));
  }
  return reports;
}

}  // namespace cqtnet
