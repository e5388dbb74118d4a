#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "cqtnet/audio.hpp"

namespace cqtnet {

enum class Split { kTrain, kVal, kTest };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string recording_id;
  int song_id = 0;
  // Relative to the manifest's directory.
  std::string wav_path;
  Split split = Split::kTrain;

  bool operator==(const ManifestEntry&) const = default;
};

struct CorpusManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;

  std::vector<ManifestEntry> subset(Split split) const;
  bool operator==(const CorpusManifest&) const = default;
};

std::string manifest_to_json(const CorpusManifest& manifest);
CorpusManifest manifest_from_json(const std::string& text);
void save_manifest(const std::filesystem::path& path, const CorpusManifest& manifest);
CorpusManifest load_manifest(const std::filesystem::path& path);

// Checks unique ids, >= 2 recordings per song, and that every test song has
// at least two recordings so it can serve as query and reference.
void validate_manifest(const CorpusManifest& manifest);

inline constexpr int kMinTranspose = -5;
inline constexpr int kMaxTranspose = 6;
inline constexpr double kMinTempo = 0.7;
inline constexpr double kMaxTempo = 1.3;
inline constexpr int kCorpusSampleRate = 22050;

struct CoverSpec {
  int transpose_semitones = 0;
  double tempo_factor = 1.0;
  Waveform waveform = Waveform::kSine;
  // Signal-to-noise ratio of the added white noise; infinity means none.
  double noise_db = std::numeric_limits<double>::infinity();
};

void validate_cover_spec(const CoverSpec& spec);

// Pitches shifted by the transposition, durations divided by the tempo factor.
std::vector<Note> apply_cover_spec(const std::vector<Note>& base_notes, const CoverSpec& spec);

// Symbolic transposition and tempo change of `base_notes`, rendered with the
// spec's waveform plus white noise at the requested SNR drawn from
// `noise_seed`.
AudioClip render_cover(const std::vector<Note>& base_notes, const CoverSpec& spec,
                       std::uint64_t noise_seed, int sample_rate = kCorpusSampleRate);

// Pentatonic random walk of 24-48 notes with durations in {0.25, ..., 1.0} s.
std::vector<Note> random_melody(std::uint64_t seed);

struct CorpusPlan {
  CorpusManifest manifest;
  // Indexed by song id.
  std::vector<std::vector<Note>> melodies;
  // Parallel to manifest.entries.
  std::vector<CoverSpec> covers;
  std::vector<std::uint64_t> noise_seeds;
};

// Everything generate_corpus decides, without rendering or writing.
CorpusPlan plan_corpus(int num_songs, int covers_per_song, std::uint64_t seed);

// Audio of entry i of the plan.
AudioClip render_planned(const CorpusPlan& plan, std::size_t entry);

// Renders the plan to out_dir/audio/*.wav and writes out_dir/manifest.json.
CorpusManifest generate_corpus(int num_songs, int covers_per_song, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int threads = 0);

}  // namespace cqtnet
