#include "cqtnet/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cqtnet/errors.hpp"
#include "cqtnet/parallel.hpp"
#include "cqtnet/rng.hpp"

namespace cqtnet {

using nlohmann::json;

namespace {

constexpr std::array<int, 5> kPentatonic{0, 2, 4, 7, 9};
constexpr int kWalkDegrees = 15;  // three octaves of the scale
constexpr double kRenderGain = 0.5;

int degree_to_midi(int tonic, int degree) {
  return tonic + 12 * (degree / 5) + kPentatonic[static_cast<std::size_t>(degree % 5)];
}

std::string recording_id(int song, int cover) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%03d_c%02d", song, cover);
  return buf;
}

}  // namespace

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  fail(ErrorKind::kInvalidInput, "unknown split '" + std::string(name) + "'");
}

std::vector<ManifestEntry> CorpusManifest::subset(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == split) out.push_back(e);
  }
  return out;
}

std::string manifest_to_json(const CorpusManifest& manifest) {
  json entries = json::array();
  for (const auto& e : manifest.entries) {
    entries.push_back({{"recording_id", e.recording_id},
                       {"song_id", e.song_id},
                       {"wav_path", e.wav_path},
                       {"split", split_name(e.split)}});
  }
  return json{{"entries", entries}, {"seed", manifest.seed}}.dump(2) + "\n";
}

CorpusManifest manifest_from_json(const std::string& text) {
  CorpusManifest manifest;
  try {
    const json j = json::parse(text);
    manifest.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("entries")) {
      manifest.entries.push_back({e.at("recording_id").get<std::string>(),
                                  e.at("song_id").get<int>(),
                                  e.at("wav_path").get<std::string>(),
                                  parse_split(e.at("split").get<std::string>())});
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed manifest: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::kFormat, std::string("malformed manifest: ") + e.what());
  }
  return manifest;
}

void save_manifest(const std::filesystem::path& path, const CorpusManifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << manifest_to_json(manifest);
  if (!out) fail(ErrorKind::kIo, "write failed for " + path.string());
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return manifest_from_json(buffer.str());
}

void validate_manifest(const CorpusManifest& manifest) {
  std::set<std::string> ids;
  std::map<int, int> per_song;
  std::map<int, Split> song_split;
  for (const auto& e : manifest.entries) {
    if (!ids.insert(e.recording_id).second) {
      fail(ErrorKind::kInvariantViolation, "duplicate recording id " + e.recording_id);
    }
    ++per_song[e.song_id];
    auto [it, inserted] = song_split.emplace(e.song_id, e.split);
    if (!inserted && it->second != e.split) {
      fail(ErrorKind::kInvariantViolation,
           "song " + std::to_string(e.song_id) + " spans several splits");
    }
  }
  for (const auto& [song, count] : per_song) {
    if (count < 2) {
      fail(ErrorKind::kInvariantViolation,
           "song " + std::to_string(song) + " has fewer than two recordings");
    }
  }
}

void validate_cover_spec(const CoverSpec& spec) {
  if (spec.transpose_semitones < kMinTranspose || spec.transpose_semitones > kMaxTranspose) {
    fail(ErrorKind::kRange, "transpose " + std::to_string(spec.transpose_semitones) +
                                " outside [-5, 6]");
  }
  if (!(spec.tempo_factor >= kMinTempo && spec.tempo_factor <= kMaxTempo)) {
    fail(ErrorKind::kRange, "tempo factor " + std::to_string(spec.tempo_factor) +
                                " outside [0.7, 1.3]");
  }
  if (std::isnan(spec.noise_db)) fail(ErrorKind::kRange, "noise SNR is NaN");
}

std::vector<Note> apply_cover_spec(const std::vector<Note>& base_notes, const CoverSpec& spec) {
  validate_cover_spec(spec);
  std::vector<Note> notes;
  notes.reserve(base_notes.size());
  for (const Note& n : base_notes) {
    notes.push_back({n.midi_pitch + spec.transpose_semitones, n.duration_s / spec.tempo_factor});
  }
  return notes;
}

AudioClip render_cover(const std::vector<Note>& base_notes, const CoverSpec& spec,
                       std::uint64_t noise_seed, int sample_rate) {
  const std::vector<Note> notes = apply_cover_spec(base_notes, spec);
  AudioClip clip = synth_melody(notes, spec.waveform, sample_rate, kRenderGain);
  if (std::isfinite(spec.noise_db)) {
    double power = 0.0;
    for (float s : clip.samples) power += static_cast<double>(s) * s;
    power /= static_cast<double>(clip.samples.size());
    const double noise_std = std::sqrt(power / std::pow(10.0, spec.noise_db / 10.0));
    Rng rng(noise_seed);
    for (float& s : clip.samples) {
      s = static_cast<float>(std::clamp(s + noise_std * rng.normal(), -1.0, 1.0));
    }
  }
  return clip;
}

std::vector<Note> random_melody(std::uint64_t seed) {
  Rng rng(seed);
  const auto length = static_cast<int>(rng.uniform_int(24, 48));
  const auto tonic = static_cast<int>(rng.uniform_int(48, 60));
  auto degree = static_cast<int>(rng.uniform_int(5, 9));
  static constexpr std::array<int, 4> kSteps{-2, -1, 1, 2};
  std::vector<Note> notes;
  notes.reserve(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) {
    const double duration = 0.25 * static_cast<double>(rng.uniform_int(1, 4));
    notes.push_back({degree_to_midi(tonic, degree), duration});
    int next = degree + kSteps[static_cast<std::size_t>(rng.uniform_int(0, 3))];
    if (next < 0 || next >= kWalkDegrees) next = degree - (next - degree);
    degree = next;
  }
  return notes;
}

CorpusPlan plan_corpus(int num_songs, int covers_per_song, std::uint64_t seed) {
  if (num_songs < 2) fail(ErrorKind::kInvalidInput, "need at least two songs");
  if (covers_per_song < 2) fail(ErrorKind::kInvalidInput, "need at least two covers per song");

  CorpusPlan plan;
  plan.manifest.seed = seed;

  // Song-level split at 8:1:1; tiny corpora still get a test song.
  Rng split_rng(derive_seed(seed, "corpus.split"));
  std::vector<int> order(static_cast<std::size_t>(num_songs));
  for (int i = 0; i < num_songs; ++i) order[static_cast<std::size_t>(i)] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(
                                split_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  }
  const int n_test = std::max(1, static_cast<int>(std::lround(num_songs * 0.1)));
  const int n_val = num_songs >= 3 ? std::max(1, static_cast<int>(std::lround(num_songs * 0.1))) : 0;
  std::vector<Split> song_split(static_cast<std::size_t>(num_songs), Split::kTrain);
  for (int i = 0; i < n_test; ++i) song_split[static_cast<std::size_t>(order[i])] = Split::kTest;
  for (int i = n_test; i < n_test + n_val; ++i) {
    song_split[static_cast<std::size_t>(order[i])] = Split::kVal;
  }

  for (int song = 0; song < num_songs; ++song) {
    plan.melodies.push_back(
        random_melody(derive_seed(seed, "corpus.melody." + std::to_string(song))));
    Rng cover_rng(derive_seed(seed, "corpus.covers." + std::to_string(song)));
    for (int cover = 0; cover < covers_per_song; ++cover) {
      CoverSpec spec;
      spec.transpose_semitones = static_cast<int>(cover_rng.uniform_int(kMinTranspose, kMaxTranspose));
      spec.tempo_factor = cover_rng.uniform(kMinTempo, kMaxTempo);
      spec.waveform = static_cast<Waveform>(cover_rng.uniform_int(0, 2));
      spec.noise_db = cover_rng.uniform(15.0, 30.0);
      plan.covers.push_back(spec);
      plan.noise_seeds.push_back(cover_rng.next_u64());
      const std::string id = recording_id(song, cover);
      plan.manifest.entries.push_back(
          {id, song, "audio/" + id + ".wav", song_split[static_cast<std::size_t>(song)]});
    }
  }
  return plan;
}

AudioClip render_planned(const CorpusPlan& plan, std::size_t entry) {
  const auto& e = plan.manifest.entries.at(entry);
  return render_cover(plan.melodies[static_cast<std::size_t>(e.song_id)], plan.covers[entry],
                      plan.noise_seeds[entry]);
}

CorpusManifest generate_corpus(int num_songs, int covers_per_song, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int threads) {
  CorpusPlan plan = plan_corpus(num_songs, covers_per_song, seed);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "audio", ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + (out_dir / "audio").string() + ": " + ec.message());
  parallel_for(plan.manifest.entries.size(), threads, [&](std::size_t i) {
    write_wav(out_dir / plan.manifest.entries[i].wav_path, render_planned(plan, i));
  });
  save_manifest(out_dir / "manifest.json", plan.manifest);
  return plan.manifest;
}

}  // namespace cqtnet
