#include "cqtnet/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>

#include "cqtnet/errors.hpp"

namespace cqtnet {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xFF));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_tag(std::vector<unsigned char>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

float blackman(double d, double half_width) {
  const double x = std::numbers::pi * d / half_width;
  return static_cast<float>(0.42 + 0.5 * std::cos(x) + 0.08 * std::cos(2.0 * x));
}

}  // namespace

std::string_view waveform_name(Waveform waveform) {
  switch (waveform) {
    case Waveform::kSine: return "sine";
    case Waveform::kSawtooth: return "sawtooth";
    case Waveform::kTriangle: return "triangle";
  }
  return "sine";
}

Waveform parse_waveform(std::string_view name) {
  if (name == "sine") return Waveform::kSine;
  if (name == "sawtooth") return Waveform::kSawtooth;
  if (name == "triangle") return Waveform::kTriangle;
  fail(ErrorKind::kInvalidInput, "unknown waveform '" + std::string(name) + "'");
}

double midi_to_hz(double midi_pitch) {
  return 440.0 * std::pow(2.0, (midi_pitch - 69.0) / 12.0);
}

AudioClip decode_wav(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    fail(ErrorKind::kFormat, "missing RIFF/WAVE header");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::uint32_t size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      // Tolerate a truncated trailing data chunk only if it is the data chunk.
      if (std::memcmp(chunk, "data", 4) != 0) fail(ErrorKind::kFormat, "truncated chunk");
    }
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) fail(ErrorKind::kFormat, "fmt chunk too small");
      format = read_u16(chunk + 8);
      channels = read_u16(chunk + 10);
      rate = read_u32(chunk + 12);
      bits = read_u16(chunk + 22);
      if (format == kFormatExtensible) {
        if (avail < 40) fail(ErrorKind::kFormat, "extensible fmt chunk too small");
        format = read_u16(chunk + 8 + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_size = avail;
      if (avail < size) fail(ErrorKind::kFormat, "truncated data chunk");
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt) fail(ErrorKind::kFormat, "missing fmt chunk");
  if (data == nullptr) fail(ErrorKind::kFormat, "missing data chunk");
  if (rate == 0) fail(ErrorKind::kFormat, "zero sample rate");
  if (channels != 1 && channels != 2) {
    fail(ErrorKind::kUnsupported, std::to_string(channels) + " channels");
  }
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool float32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !float32) {
    fail(ErrorKind::kUnsupported, "encoding format " + std::to_string(format) +
                                      " with " + std::to_string(bits) + " bits");
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frames = data_size / frame_bytes;
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame_bytes + c * bytes_per_sample;
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        const std::uint32_t raw = read_u32(p);
        float v;
        std::memcpy(&v, &raw, sizeof v);
        acc += v;
      }
    }
    clip.samples[f] = static_cast<float>(acc / channels);
  }
  return clip;
}

AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

std::vector<unsigned char> encode_wav(const AudioClip& clip) {
  if (clip.sample_rate <= 0) fail(ErrorKind::kInvalidInput, "sample rate must be positive");
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatPcm);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (float s : clip.samples) {
    const double scaled = std::round(static_cast<double>(s) * 32768.0);
    const auto q = static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0));
    put_u16(out, static_cast<std::uint16_t>(q));
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
  const auto bytes = encode_wav(clip);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

AudioClip resample(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) fail(ErrorKind::kInvalidInput, "target rate must be positive");
  if (clip.sample_rate <= 0) fail(ErrorKind::kInvalidInput, "source rate must be positive");
  if (target_rate == clip.sample_rate) return clip;

  constexpr int kTaps = 64;
  constexpr double kHalf = kTaps / 2.0;
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  // Cutoff in cycles per input sample.
  const double cutoff = 0.5 * std::min(1.0, 1.0 / ratio);
  const auto in_len = static_cast<std::int64_t>(clip.samples.size());
  const auto out_len = static_cast<std::int64_t>(
      std::llround(static_cast<double>(in_len) * target_rate / clip.sample_rate));

  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(out_len));
  for (std::int64_t n = 0; n < out_len; ++n) {
    const double pos = n * ratio;
    const auto center = static_cast<std::int64_t>(std::floor(pos));
    double acc = 0.0;
    for (std::int64_t j = center - kTaps / 2 + 1; j <= center + kTaps / 2; ++j) {
      if (j < 0 || j >= in_len) continue;
      const double d = pos - static_cast<double>(j);
      if (std::abs(d) >= kHalf) continue;
      const double arg = 2.0 * cutoff * d;
      const double sinc = arg == 0.0 ? 1.0
                                     : std::sin(std::numbers::pi * arg) /
                                           (std::numbers::pi * arg);
      acc += clip.samples[static_cast<std::size_t>(j)] * 2.0 * cutoff * sinc *
             blackman(d, kHalf);
    }
    out.samples[static_cast<std::size_t>(n)] = static_cast<float>(acc);
  }
  return out;
}

AudioClip synth_melody(std::span<const Note> notes, Waveform waveform,
                       int sample_rate, double gain) {
  if (notes.empty()) fail(ErrorKind::kInvalidInput, "empty note list");
  if (sample_rate <= 0) fail(ErrorKind::kInvalidInput, "sample rate must be positive");
  for (const Note& note : notes) {
    if (!(note.duration_s > 0.0)) fail(ErrorKind::kInvalidInput, "note duration must be positive");
    if (note.midi_pitch < 21 || note.midi_pitch > 108) {
      fail(ErrorKind::kRange, "midi pitch " + std::to_string(note.midi_pitch) +
                                  " outside [21, 108]");
    }
  }

  AudioClip clip;
  clip.sample_rate = sample_rate;
  const auto fade_default = static_cast<std::size_t>(std::lround(0.01 * sample_rate));
  for (const Note& note : notes) {
    const auto count = static_cast<std::size_t>(std::llround(note.duration_s * sample_rate));
    const double freq = midi_to_hz(note.midi_pitch);
    const double inc = freq / sample_rate;  // phase increment in cycles
    const std::size_t fade = std::min(fade_default, count / 2);
    double phase = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      double v = 0.0;
      switch (waveform) {
        case Waveform::kSine:
          v = std::sin(2.0 * std::numbers::pi * phase);
          break;
        case Waveform::kSawtooth: {
          v = 2.0 * phase - 1.0;
          // PolyBLEP correction at the wrap discontinuity.
          if (phase < inc) {
            const double t = phase / inc;
            v -= t + t - t * t - 1.0;
          } else if (phase > 1.0 - inc) {
            const double t = (phase - 1.0) / inc;
            v -= t * t + t + t + 1.0;
          }
          break;
        }
        case Waveform::kTriangle:
          v = phase < 0.5 ? 4.0 * phase - 1.0 : 3.0 - 4.0 * phase;
          break;
      }
      double env = 1.0;
      if (fade > 0) {
        if (i < fade) env = static_cast<double>(i) / fade;
        else if (i >= count - fade) env = static_cast<double>(count - 1 - i) / fade;
      }
      clip.samples.push_back(
          static_cast<float>(std::clamp(gain * env * v, -1.0, 1.0)));
      phase += inc;
      if (phase >= 1.0) phase -= 1.0;
    }
  }
  return clip;
}

}  // namespace cqtnet
