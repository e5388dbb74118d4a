#pragma once

#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace cqtnet {

// Mono sample buffer. Samples are nominally in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate
                           : 0.0;
  }
};

enum class Waveform { kSine, kSawtooth, kTriangle };

std::string_view waveform_name(Waveform waveform);
Waveform parse_waveform(std::string_view name);

struct Note {
  int midi_pitch = 69;
  double duration_s = 0.5;

  bool operator==(const Note&) const = default;
};

double midi_to_hz(double midi_pitch);

// Reads PCM 16-bit or IEEE float-32 RIFF/WAVE, mono or stereo. Stereo is
// mixed down by channel mean.
AudioClip read_wav(const std::filesystem::path& path);
AudioClip decode_wav(std::span<const unsigned char> bytes);

// Writes 16-bit little-endian PCM mono. Samples are clamped to [-1, 1].
void write_wav(const std::filesystem::path& path, const AudioClip& clip);
std::vector<unsigned char> encode_wav(const AudioClip& clip);

// Band-limited resampling with a 64-tap Blackman-windowed sinc kernel whose
// cutoff sits at the lower of the two Nyquist frequencies.
AudioClip resample(const AudioClip& clip, int target_rate);

// Concatenated note rendering with 10 ms linear fades at both note edges.
AudioClip synth_melody(std::span<const Note> notes, Waveform waveform,
                       int sample_rate, double gain);

}  // namespace cqtnet
