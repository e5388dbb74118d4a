#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cqtnet/audio.hpp"
#include "cqtnet/corpus.hpp"
#include "cqtnet/cqt.hpp"
#include "cqtnet/model.hpp"
#include "cqtnet/retrieval.hpp"
#include "cqtnet/rng.hpp"

namespace cqtnet {

inline constexpr int kStretchFft = 2048;
inline constexpr int kStretchHop = 512;

// Phase-vocoder time stretch: Hann-windowed STFT (2048/512), magnitudes
// interpolated and phases accumulated at `rate` analysis frames per output
// frame, then overlap-add resynthesis. Output length is round(len / rate);
// rate 1 returns the clip unchanged.
AudioClip tempo_stretch(const AudioClip& clip, double rate);

// Approximate stretch of a raw (not downsampled) CQT by linear
// interpolation of columns; round(T / rate) output columns.
CqtMatrix stretch_columns(const CqtMatrix& raw, double rate);

// Columns [s, s + length) with s = floor(u * (T - length + 1)), u in [0, 1).
// Inputs narrower than `length` are cyclically padded and s = 0.
CqtMatrix crop_at(const CqtMatrix& features, int length, double u);
CqtMatrix random_crop(const CqtMatrix& features, int length, Rng& rng);

enum class AugmentationDomain { kAudio, kCqt };

struct TrainConfig {
  int batch_size = 16;
  double tempo_min = 0.7;
  double tempo_max = 1.3;
  std::vector<int> crop_lengths{200, 300, 400};
  double learning_rate = 1e-3;
  int max_epochs = 50;
  int patience = 10;
  std::uint64_t seed = 0;
  bool augmentation_enabled = true;
  AugmentationDomain augmentation_domain = AugmentationDomain::kAudio;
  // Batch cycles (one batch per crop length) per epoch; 0 means
  // ceil(train recordings / batch size).
  int cycles_per_epoch = 0;
  int threads = 0;
  // Minimum frames fed to the network when embedding for validation.
  int embed_frames = kDefaultEmbedFrames;
};

void validate_train_config(const TrainConfig& config, const ModelConfig& model);

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);

struct Recording {
  std::string recording_id;
  int song_id = 0;
  // Contiguous class index for the training split, -1 elsewhere.
  int label = -1;
  AudioClip audio;
  // Raw CQT, only kept for CQT-domain augmentation.
  std::optional<CqtMatrix> raw_cqt;
  // Unstretched features (downsampled, log-compressed).
  CqtMatrix features;
};

struct TrainingSet {
  std::vector<Recording> train;
  std::vector<Recording> val;
  int num_classes = 0;
};

// Loads audio and unstretched features for the train and val splits.
TrainingSet load_training_set(const CorpusManifest& manifest,
                              const std::filesystem::path& base_dir,
                              AugmentationDomain domain, int threads = 0);

struct BatchResult {
  double loss = 0.0;
  std::vector<std::size_t> recordings;
  std::vector<double> rates;
  std::vector<int> labels;
};

// One step of the augmentation-and-update loop: sample n recordings with
// replacement, stretch each by r ~ U(a, b), extract features, crop to
// `crop_length`, then forward, backward and an Adam update.
BatchResult run_batch(const TrainingSet& data, CqtNet& net, Adam& optimizer,
                      const TrainConfig& config, Rng& rng, int crop_length);

// Assembled (pre-forward) batch, exposed for tests of the sampling logic.
struct AssembledBatch {
  std::vector<CqtMatrix> crops;
  std::vector<std::size_t> recordings;
  std::vector<double> rates;
  std::vector<int> labels;
};

AssembledBatch assemble_batch(const TrainingSet& data, const TrainConfig& config, Rng& rng,
                              int crop_length);

struct TrainState {
  int next_epoch = 0;
  std::int64_t step = 0;
  std::string rng_state;
  double best_val_map = -1.0;
  int epochs_without_improvement = 0;
};

std::string train_state_to_json(const TrainState& state);
TrainState train_state_from_json(const std::string& text);

struct LogRecord {
  int epoch = 0;
  std::int64_t step = 0;
  int crop_length = 0;
  double loss = 0.0;
  // Epoch records carry a validation MAP instead of a loss.
  bool is_epoch = false;
  std::optional<double> val_map;
};

struct TrainResult {
  std::vector<LogRecord> log;
  double best_val_map = -1.0;
  int best_epoch = -1;
  int epochs_run = 0;
  bool stopped_early = false;
};

using ProgressCallback = std::function<void(const LogRecord&)>;

// Runs epochs of batch cycles over the crop lengths, validates after every
// epoch (val queries against val + train references) and keeps the best
// checkpoint. Writes best.ckpt, last.ckpt, train_state.json and
// train_log.jsonl into out_dir. With `resume`, continues from the state saved
// by an earlier run in out_dir.
TrainResult train(const TrainingSet& data, CqtNet& net, const TrainConfig& config,
                  const std::filesystem::path& out_dir, bool resume = false,
                  const ProgressCallback& progress = {});

// Class labels used for training: song ids of the train split in ascending
// order map to 0..K-1.
std::vector<int> training_song_ids(const CorpusManifest& manifest);

}  // namespace cqtnet
