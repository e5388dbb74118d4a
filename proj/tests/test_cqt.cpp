#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "cqtnet/cqt.hpp"
#include "support.hpp"

using namespace cqtnet;
using testing::error_kind;

namespace {

// Straight transcription of the transform definition for one cell, in double
// precision: Hann window of length N_k centred on frame * hop, complex
// exponential at f_k, zero outside the signal, normalised by the window sum.
double cqt_cell(const AudioClip& clip, int bin, int frame) {
  const double q = 1.0 / (std::pow(2.0, 1.0 / 12.0) - 1.0);
  const double f = 32.7032 * std::pow(2.0, bin / 12.0);
  const int n_k = static_cast<int>(std::ceil(q * 22050.0 / f));
  std::complex<double> acc = 0.0;
  double wsum = 0.0;
  for (int n = 0; n < n_k; ++n) {
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / n_k);
    wsum += w;
    const long idx = static_cast<long>(frame) * 512 + n - n_k / 2;
    if (idx < 0 || idx >= static_cast<long>(clip.samples.size())) continue;
    acc += w * static_cast<double>(clip.samples[static_cast<std::size_t>(idx)]) *
           std::polar(1.0, -2.0 * std::numbers::pi * f * (n - n_k / 2) / 22050.0);
  }
  return std::abs(acc) / wsum;
}

int expected_bin(double hz) {
  return static_cast<int>(std::lround(12.0 * std::log2(hz / 32.7032)));
}

}  // namespace

TEST_CASE("bin geometry") {
  CHECK(cqt_bin_frequency(0) == doctest::Approx(32.7032));
  CHECK(cqt_bin_frequency(12) == doctest::Approx(65.4064));
  CHECK(cqt_bin_frequency(83) == doctest::Approx(32.7032 * std::pow(2.0, 83.0 / 12.0)));
  CHECK(cqt_quality_factor() == doctest::Approx(16.817).epsilon(1e-4));
  CHECK(cqt_window_length(0) == static_cast<int>(std::ceil(cqt_quality_factor() * 22050 / 32.7032)));
  for (int k = 1; k < kCqtBins; ++k) CHECK(cqt_window_length(k) <= cqt_window_length(k - 1));
}

TEST_CASE("a 440 Hz tone peaks in bin 45") {
  REQUIRE(expected_bin(440.0) == 45);
  const CqtMatrix m = extract_features(testing::tone(440.0, 10.0));
  CHECK(m.rows == 84);
  CHECK(peak_bin(m) == 45);
  CHECK(peak_bin(compute_cqt(testing::tone(440.0, 10.0))) == 45);
}

TEST_CASE("tones a semitone step apart peak one bin apart") {
  for (double base : {110.0, 261.63, 440.0, 1000.0}) {
    const int b0 = peak_bin(extract_features(testing::tone(base, 10.0)));
    CHECK(b0 == expected_bin(base));
    for (int s : {1, 2, 3}) {
      const double f = base * std::pow(2.0, s / 12.0);
      CHECK(peak_bin(extract_features(testing::tone(f, 10.0))) - b0 == s);
    }
  }
}

TEST_CASE("other sample rates are resampled first") {
  CHECK(peak_bin(compute_cqt(testing::tone(440.0, 3.0, 44100))) == 45);
}

TEST_CASE("raw frame count and rates") {
  const AudioClip clip = testing::tone(220.0, 1.0);
  const CqtMatrix raw = compute_cqt(clip);
  CHECK(raw.cols == 22050 / 512 + 1);
  CHECK(raw.rows == 84);
  CHECK(raw.frame_rate == 22050.0 / 512.0);
  const CqtMatrix ds = extract_features(testing::tone(220.0, 10.0));
  CHECK(std::abs(ds.frame_rate - 22050.0 / (512.0 * 20.0)) < 1e-6);
  CHECK(std::abs(ds.frame_rate - 2.153) < 1e-3);
  CHECK(ds.cols == (220500 / 512 + 1) / 20);
}

TEST_CASE("cells match the direct definition") {
  const AudioClip clip = testing::tone(300.0, 2.0, 22050, 0.7);
  const CqtMatrix raw = compute_cqt(clip);
  for (int bin : {0, 20, 41, 42, 60, 83}) {
    for (int frame : {0, 1, 40, raw.cols - 1}) {
      const double want = cqt_cell(clip, bin, frame);
      CHECK(raw.at(bin, frame) == doctest::Approx(want).epsilon(1e-3).scale(1e-4));
    }
  }
}

TEST_CASE("a unit sinusoid at a bin centre has magnitude one half") {
  const AudioClip clip = testing::tone(cqt_bin_frequency(50), 3.0, 22050, 1.0);
  const CqtMatrix raw = compute_cqt(clip);
  for (int t = 20; t < raw.cols - 20; ++t) {
    CHECK(raw.at(50, t) == doctest::Approx(0.5).epsilon(0.01));
  }
}

TEST_CASE("silence gives zeros") {
  AudioClip silence;
  silence.sample_rate = 22050;
  silence.samples.assign(22050 * 2, 0.0f);
  for (float v : compute_cqt(silence).data) CHECK(v == 0.0f);
  for (float v : extract_features(silence).data) CHECK(v == 0.0f);
}

TEST_CASE("short clips are rejected") {
  AudioClip clip;
  clip.sample_rate = 22050;
  clip.samples.assign(511, 0.1f);
  CHECK(error_kind([&] { compute_cqt(clip); }) == ErrorKind::kTooShort);
  clip.samples.assign(512, 0.1f);
  CHECK(compute_cqt(clip).cols == 2);
  // 2 raw frames cannot fill one 20-frame block.
  CHECK(error_kind([&] { extract_features(clip); }) == ErrorKind::kTooShort);
}

TEST_CASE("delaying by one block shifts the features by one column") {
  const AudioClip a = testing::tone(523.25, 12.0, 22050, 0.5);
  AudioClip b = a;
  b.samples.insert(b.samples.begin(), 20 * 512, 0.0f);
  b.samples.resize(a.samples.size());
  const CqtMatrix fa = extract_features(a);
  const CqtMatrix fb = extract_features(b);
  for (int r = 0; r < fa.rows; ++r) {
    for (int c = 2; c < fa.cols - 2; ++c) {
      const float x = fa.at(r, c);
      const float y = fb.at(r, c + 1);
      CHECK(std::abs(x - y) <= 1e-3f * std::max(std::abs(x), 1e-3f));
    }
  }
}

TEST_CASE("mean_downsample") {
  CqtMatrix raw(84, 2000, 43.0);
  CHECK(mean_downsample(raw).cols == 100);
  CHECK(mean_downsample(raw).frame_rate == doctest::Approx(43.0 / 20.0));

  CqtMatrix c(3, 45);
  for (float& v : c.data) v = 0.75f;
  const CqtMatrix cd = mean_downsample(c);
  CHECK(cd.cols == 2);
  for (float v : cd.data) CHECK(v == doctest::Approx(0.75f));

  CqtMatrix ramp(1, 40);
  for (int j = 0; j < 40; ++j) ramp.at(0, j) = static_cast<float>(j);
  const CqtMatrix rd = mean_downsample(ramp);
  REQUIRE(rd.cols == 2);
  CHECK(rd.at(0, 0) == doctest::Approx(9.5));
  CHECK(rd.at(0, 1) == doctest::Approx(29.5));

  CHECK(error_kind([] { mean_downsample(CqtMatrix(84, 19)); }) == ErrorKind::kTooShort);
}

TEST_CASE("log_compress") {
  CqtMatrix m(1, 3);
  m.at(0, 0) = 0.0f;
  m.at(0, 1) = static_cast<float>(std::numbers::e - 1.0);
  m.at(0, 2) = 5.0f;
  const CqtMatrix l = log_compress(m);
  CHECK(l.at(0, 0) == 0.0f);
  CHECK(l.at(0, 1) == doctest::Approx(1.0));
  CHECK(l.at(0, 2) == doctest::Approx(std::log(6.0)));

  const CqtMatrix raw = mean_downsample(compute_cqt(testing::tone(700.0, 5.0)));
  const CqtMatrix comp = log_compress(raw);
  for (int c = 0; c < raw.cols; ++c) {
    int a = 0;
    int b = 0;
    for (int r = 1; r < raw.rows; ++r) {
      if (raw.at(r, c) > raw.at(a, c)) a = r;
      if (comp.at(r, c) > comp.at(b, c)) b = r;
    }
    CHECK(a == b);
  }

  CqtMatrix neg(1, 1);
  neg.at(0, 0) = -1e-6f;
  CHECK(error_kind([&] { log_compress(neg); }) == ErrorKind::kInvariantViolation);
  neg.at(0, 0) = std::nanf("");
  CHECK(error_kind([&] { log_compress(neg); }) == ErrorKind::kInvariantViolation);
}

TEST_CASE("features are finite and non-negative") {
  const CqtMatrix m = extract_features(testing::tone(90.0, 6.0, 22050, 1.0));
  for (float v : m.data) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0f);
  }
}

TEST_CASE("cyclic_pad repeats columns") {
  CqtMatrix m(2, 3);
  for (int c = 0; c < 3; ++c) {
    m.at(0, c) = static_cast<float>(c);
    m.at(1, c) = static_cast<float>(10 + c);
  }
  const CqtMatrix p = cyclic_pad(m, 8);
  REQUIRE(p.cols == 8);
  for (int c = 0; c < 8; ++c) {
    CHECK(p.at(0, c) == static_cast<float>(c % 3));
    CHECK(p.at(1, c) == static_cast<float>(10 + c % 3));
  }
  CHECK(cyclic_pad(m, 2) == m);
}

TEST_CASE("CQT1 files") {
  CqtMatrix m = extract_features(testing::tone(330.0, 4.0));
  m.source_id = "s001_c02";
  testing::TempDir dir("cqt");
  save_cqt(dir.path() / "m.cqt", m);
  const CqtMatrix back = load_cqt(dir.path() / "m.cqt");
  CHECK(back == m);
  CHECK(static_cast<float>(back.frame_rate) == static_cast<float>(m.frame_rate));

  auto bytes = encode_cqt(m);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CQT1");
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 2 + m.source_id.size() + 4 * m.data.size());
  auto truncated = bytes;
  truncated.pop_back();
  CHECK(error_kind([&] { decode_cqt(truncated); }) == ErrorKind::kFormat);
  auto magic = bytes;
  magic[3] = '2';
  CHECK(error_kind([&] { decode_cqt(magic); }) == ErrorKind::kFormat);
  auto extra = bytes;
  extra.push_back(0);
  CHECK(error_kind([&] { decode_cqt(extra); }) == ErrorKind::kFormat);
  CHECK(error_kind([] { load_cqt("/nonexistent.cqt"); }) == ErrorKind::kIo);
}
