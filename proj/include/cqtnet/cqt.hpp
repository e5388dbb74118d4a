#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "cqtnet/audio.hpp"

namespace cqtnet {

inline constexpr int kCqtSampleRate = 22050;
inline constexpr int kCqtHop = 512;
inline constexpr int kCqtBins = 84;
inline constexpr int kCqtBinsPerOctave = 12;
inline constexpr double kCqtMinFrequency = 32.7032;  // C1
inline constexpr int kDownsampleFactor = 20;

// Magnitude matrix, rows are frequency bins (low to high) and columns are
// time frames. Row-major storage.
struct CqtMatrix {
  int rows = kCqtBins;
  int cols = 0;
  std::vector<float> data;
  double frame_rate = 0.0;
  std::string source_id;

  CqtMatrix() = default;
  CqtMatrix(int rows_, int cols_, double frame_rate_ = 0.0)
      : rows(rows_), cols(cols_),
        data(static_cast<std::size_t>(rows_) * cols_, 0.0f),
        frame_rate(frame_rate_) {}

  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  bool operator==(const CqtMatrix&) const = default;
};

double cqt_bin_frequency(int bin);
double cqt_quality_factor();
// Window length in samples for a bin at the CQT sample rate.
int cqt_window_length(int bin);

// Naive constant-Q transform: every (frame, bin) pair is a direct correlation
// of the Hann-windowed complex exponential kernel with the zero-padded signal
// centred on frame * hop. Clips at other rates are resampled to 22050 Hz.
CqtMatrix compute_cqt(const AudioClip& clip);

// Non-overlapping block means along time; trailing frames are dropped.
CqtMatrix mean_downsample(const CqtMatrix& raw, int factor = kDownsampleFactor);

// Element-wise ln(1 + x).
CqtMatrix log_compress(const CqtMatrix& m);

// compute_cqt -> mean_downsample -> log_compress.
CqtMatrix extract_features(const AudioClip& clip);

// Repeats columns cyclically until the matrix is `length` frames wide.
// Matrices already at least that wide are returned unchanged.
CqtMatrix cyclic_pad(const CqtMatrix& m, int length);

// Bin (row) whose mean magnitude over all frames is largest.
int peak_bin(const CqtMatrix& m);

// "CQT1" binary format.
void save_cqt(const std::filesystem::path& path, const CqtMatrix& m);
CqtMatrix load_cqt(const std::filesystem::path& path);
std::vector<unsigned char> encode_cqt(const CqtMatrix& m);
CqtMatrix decode_cqt(const std::vector<unsigned char>& bytes);

}  // namespace cqtnet
