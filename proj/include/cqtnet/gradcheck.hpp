#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cqtnet/tensor.hpp"

namespace cqtnet {

struct GradcheckReport {
  std::string name;
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t checked_elements = 0;
  double tolerance = 0.0;
  bool passed = false;
};

inline constexpr double kGradcheckStep = 1e-5;
// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
// The floor keeps near-zero gradients from being judged on finite-difference
// round-off alone.
inline constexpr double kGradcheckFloor = 1e-3;

// Compares analytic gradients of a scalar-valued `fn` with central finite
// differences, element by element, for every input that requires grad.
GradcheckReport gradcheck(const std::string& name,
                          const std::function<TensorD(const std::vector<TensorD>&)>& fn,
                          const std::vector<TensorD>& inputs, double tolerance,
                          double step = kGradcheckStep);

// Checks every differentiable op on shapes taken from the network's layers.
std::vector<GradcheckReport> run_gradient_suite(double tolerance, unsigned seed = 7);

}  // namespace cqtnet
