#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "cqtnet/audio.hpp"
#include "cqtnet/errors.hpp"

namespace testing {

// Kind of the cqtnet::Error thrown by f, or nullopt when f returns normally.
template <typename F>
std::optional<cqtnet::ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const cqtnet::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

inline cqtnet::AudioClip tone(double hz, double seconds, int sample_rate = 22050,
                              double amplitude = 0.5) {
  cqtnet::AudioClip clip;
  clip.sample_rate = sample_rate;
  const auto n = static_cast<std::size_t>(std::llround(seconds * sample_rate));
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    clip.samples[i] = static_cast<float>(
        amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / sample_rate));
  }
  return clip;
}

// Direct DFT magnitude at an arbitrary frequency.
inline double dft_magnitude(const std::vector<float>& x, int sample_rate, double hz) {
  double re = 0.0;
  double im = 0.0;
  const double w = 2.0 * std::numbers::pi * hz / sample_rate;
  for (std::size_t n = 0; n < x.size(); ++n) {
    re += x[n] * std::cos(w * static_cast<double>(n));
    im -= x[n] * std::sin(w * static_cast<double>(n));
  }
  return std::hypot(re, im);
}

// Frequency of the largest DFT magnitude on the grid lo, lo + step, ..., hi.
inline double dft_peak_hz(const std::vector<float>& x, int sample_rate, double lo, double hi,
                          double step) {
  double best_hz = lo;
  double best = -1.0;
  for (double f = lo; f <= hi + 1e-9; f += step) {
    const double m = dft_magnitude(x, sample_rate, f);
    if (m > best) {
      best = m;
      best_hz = f;
    }
  }
  return best_hz;
}

inline double mean_square(const std::vector<float>& x) {
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cqtnet_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
