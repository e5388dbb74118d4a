#include "cqtnet/cqt.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "binary_io.hpp"
#include "cqtnet/errors.hpp"

namespace cqtnet {

namespace {

struct BinKernel {
  int length = 0;
  int half = 0;
  std::vector<float> re;
  std::vector<float> im;
};

// Windowed complex exponentials for all 84 bins at 22050 Hz, normalised so a
// unit-amplitude sinusoid at the bin centre has magnitude 0.5.
const std::vector<BinKernel>& kernel_bank() {
  static const std::vector<BinKernel> bank = [] {
    std::vector<BinKernel> kernels(kCqtBins);
    for (int k = 0; k < kCqtBins; ++k) {
      BinKernel& kernel = kernels[k];
      kernel.length = cqt_window_length(k);
      kernel.half = kernel.length / 2;
      kernel.re.resize(kernel.length);
      kernel.im.resize(kernel.length);
      const double omega = 2.0 * std::numbers::pi * cqt_bin_frequency(k) / kCqtSampleRate;
      double window_sum = 0.0;
      std::vector<double> window(kernel.length);
      for (int n = 0; n < kernel.length; ++n) {
        window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / kernel.length);
        window_sum += window[n];
      }
      for (int n = 0; n < kernel.length; ++n) {
        // Phase referenced to the window centre.
        const double phase = omega * (n - kernel.half);
        kernel.re[n] = static_cast<float>(window[n] * std::cos(phase) / window_sum);
        kernel.im[n] = static_cast<float>(-window[n] * std::sin(phase) / window_sum);
      }
    }
    return kernels;
  }();
  return bank;
}

}  // namespace

double cqt_bin_frequency(int bin) {
  return kCqtMinFrequency * std::pow(2.0, static_cast<double>(bin) / kCqtBinsPerOctave);
}

double cqt_quality_factor() {
  return 1.0 / (std::pow(2.0, 1.0 / kCqtBinsPerOctave) - 1.0);
}

int cqt_window_length(int bin) {
  return static_cast<int>(
      std::ceil(cqt_quality_factor() * kCqtSampleRate / cqt_bin_frequency(bin)));
}

CqtMatrix compute_cqt(const AudioClip& clip) {
  if (clip.sample_rate != kCqtSampleRate) {
    return compute_cqt(resample(clip, kCqtSampleRate));
  }
  const auto len = static_cast<std::int64_t>(clip.samples.size());
  if (len < kCqtHop) {
    fail(ErrorKind::kTooShort, "clip has " + std::to_string(len) +
                                   " samples, at least 512 required");
  }
  const auto frames = static_cast<int>(len / kCqtHop + 1);
  CqtMatrix out(kCqtBins, frames, static_cast<double>(kCqtSampleRate) / kCqtHop);

  const float* x = clip.samples.data();
  const auto& bank = kernel_bank();
  for (int k = 0; k < kCqtBins; ++k) {
    const BinKernel& kernel = bank[k];
    const float* kr = kernel.re.data();
    const float* ki = kernel.im.data();
    float* row = out.data.data() + static_cast<std::size_t>(k) * frames;
    for (int t = 0; t < frames; ++t) {
      const std::int64_t start = static_cast<std::int64_t>(t) * kCqtHop - kernel.half;
      const std::int64_t n0 = std::max<std::int64_t>(0, -start);
      const std::int64_t n1 = std::min<std::int64_t>(kernel.length, len - start);
      float acc_re = 0.0f;
      float acc_im = 0.0f;
      const float* xs = x + start;
#pragma omp simd reduction(+ : acc_re, acc_im)
      for (std::int64_t n = n0; n < n1; ++n) {
        acc_re += kr[n] * xs[n];
        acc_im += ki[n] * xs[n];
      }
      row[t] = std::sqrt(acc_re * acc_re + acc_im * acc_im);
    }
  }
  return out;
}

CqtMatrix mean_downsample(const CqtMatrix& raw, int factor) {
  if (factor <= 0) fail(ErrorKind::kInvalidInput, "downsample factor must be positive");
  if (raw.cols < factor) {
    fail(ErrorKind::kTooShort, std::to_string(raw.cols) + " frames, at least " +
                                   std::to_string(factor) + " required");
  }
  const int cols = raw.cols / factor;
  CqtMatrix out(raw.rows, cols, raw.frame_rate / factor);
  out.source_id = raw.source_id;
  for (int r = 0; r < raw.rows; ++r) {
    for (int j = 0; j < cols; ++j) {
      double acc = 0.0;
      for (int i = 0; i < factor; ++i) acc += raw.at(r, j * factor + i);
      out.at(r, j) = static_cast<float>(acc / factor);
    }
  }
  return out;
}

CqtMatrix log_compress(const CqtMatrix& m) {
  CqtMatrix out = m;
  for (float& v : out.data) {
    if (v < 0.0f || std::isnan(v)) {
      fail(ErrorKind::kInvariantViolation, "log_compress requires non-negative entries");
    }
    v = std::log1p(v);
  }
  return out;
}

CqtMatrix extract_features(const AudioClip& clip) {
  return log_compress(mean_downsample(compute_cqt(clip)));
}

CqtMatrix cyclic_pad(const CqtMatrix& m, int length) {
  if (m.cols >= length) return m;
  if (m.cols == 0) fail(ErrorKind::kInvalidInput, "cannot pad an empty matrix");
  CqtMatrix out(m.rows, length, m.frame_rate);
  out.source_id = m.source_id;
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < length; ++c) out.at(r, c) = m.at(r, c % m.cols);
  }
  return out;
}

int peak_bin(const CqtMatrix& m) {
  int best = 0;
  double best_mean = -1.0;
  for (int r = 0; r < m.rows; ++r) {
    double acc = 0.0;
    for (int c = 0; c < m.cols; ++c) acc += m.at(r, c);
    if (acc > best_mean) {
      best_mean = acc;
      best = r;
    }
  }
  return best;
}

std::vector<unsigned char> encode_cqt(const CqtMatrix& m) {
  detail::ByteWriter w;
  w.tag("CQT1");
  w.u32(static_cast<std::uint32_t>(m.rows));
  w.u32(static_cast<std::uint32_t>(m.cols));
  w.f32(static_cast<float>(m.frame_rate));
  w.short_string(m.source_id);
  for (float v : m.data) w.f32(v);
  return w.bytes();
}

CqtMatrix decode_cqt(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_tag("CQT1");
  const std::uint32_t rows = r.u32();
  const std::uint32_t cols = r.u32();
  const float rate = r.f32();
  std::string id = r.short_string();
  const std::uint64_t count = static_cast<std::uint64_t>(rows) * cols;
  if (count * 4 != r.remaining()) {
    fail(ErrorKind::kFormat, "CQT payload size does not match " + std::to_string(rows) +
                                 "x" + std::to_string(cols));
  }
  CqtMatrix m(static_cast<int>(rows), static_cast<int>(cols), rate);
  m.source_id = std::move(id);
  r.f32_array(m.data.data(), m.data.size());
  return m;
}

void save_cqt(const std::filesystem::path& path, const CqtMatrix& m) {
  detail::write_file(path, encode_cqt(m));
}

CqtMatrix load_cqt(const std::filesystem::path& path) {
  return decode_cqt(detail::read_file(path));
}

}  // namespace cqtnet
