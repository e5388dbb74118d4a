#include "cqtnet/trainer.hpp"

#include <fftw3.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>

#include "cqtnet/errors.hpp"
#include "cqtnet/parallel.hpp"

namespace cqtnet {

using nlohmann::json;

namespace {

// FFTW's planner is not thread-safe; execution is.
std::mutex g_fftw_planner_mutex;

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) {
    real_ = fftw_alloc_real(static_cast<std::size_t>(n));
    spec_ = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    std::lock_guard lock(g_fftw_planner_mutex);
    forward_ = fftw_plan_dft_r2c_1d(n, real_, spec_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(n, spec_, real_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard lock(g_fftw_planner_mutex);
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(real_);
    fftw_free(spec_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* real() { return real_; }
  fftw_complex* spectrum() { return spec_; }
  void forward() { fftw_execute(forward_); }
  // Unnormalised: the result is scaled by n.
  void inverse() { fftw_execute(inverse_); }

 private:
  int n_;
  double* real_;
  fftw_complex* spec_;
  fftw_plan forward_;
  fftw_plan inverse_;
};

double wrap_phase(double phase) {
  return phase - 2.0 * std::numbers::pi * std::round(phase / (2.0 * std::numbers::pi));
}

}  // namespace

AudioClip tempo_stretch(const AudioClip& clip, double rate) {
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    fail(ErrorKind::kRange, "stretch rate must be positive, got " + std::to_string(rate));
  }
  if (rate == 1.0) return clip;
  if (clip.samples.empty()) fail(ErrorKind::kInvalidInput, "empty clip");

  constexpr int n_fft = kStretchFft;
  constexpr int hop = kStretchHop;
  constexpr int bins = n_fft / 2 + 1;
  constexpr int pad = n_fft / 2;
  const auto len = static_cast<std::int64_t>(clip.samples.size());
  const auto target_len = static_cast<std::int64_t>(std::llround(static_cast<double>(len) / rate));

  std::vector<double> window(n_fft);
  for (int i = 0; i < n_fft; ++i) {
    window[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n_fft);
  }

  // Centred analysis frames over the zero-padded signal.
  std::vector<double> padded(static_cast<std::size_t>(len + 2 * pad), 0.0);
  std::copy(clip.samples.begin(), clip.samples.end(), padded.begin() + pad);
  const auto frames = static_cast<std::int64_t>(len / hop + 1);
  std::vector<std::vector<std::complex<double>>> stft(
      static_cast<std::size_t>(frames + 1), std::vector<std::complex<double>>(bins));
  RealFft fft(n_fft);
  for (std::int64_t t = 0; t < frames; ++t) {
    for (int i = 0; i < n_fft; ++i) {
      fft.real()[i] = padded[static_cast<std::size_t>(t * hop + i)] * window[static_cast<std::size_t>(i)];
    }
    fft.forward();
    for (int k = 0; k < bins; ++k) {
      stft[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)] = {fft.spectrum()[k][0], fft.spectrum()[k][1]};
    }
  }
  // stft[frames] stays zero so interpolation at the last frame is defined.

  std::vector<double> advance(bins);
  for (int k = 0; k < bins; ++k) {
    advance[static_cast<std::size_t>(k)] = 2.0 * std::numbers::pi * k * hop / n_fft;
  }
  std::vector<double> phase(bins);
  for (int k = 0; k < bins; ++k) phase[static_cast<std::size_t>(k)] = std::arg(stft[0][static_cast<std::size_t>(k)]);

  std::vector<std::vector<std::complex<double>>> stretched;
  for (double t = 0.0; t < static_cast<double>(frames); t += rate) {
    const auto left = static_cast<std::size_t>(t);
    const double alpha = t - static_cast<double>(left);
    std::vector<std::complex<double>> column(bins);
    for (std::size_t k = 0; k < static_cast<std::size_t>(bins); ++k) {
      const auto& a = stft[left][k];
      const auto& b = stft[left + 1][k];
      const double mag = (1.0 - alpha) * std::abs(a) + alpha * std::abs(b);
      column[k] = std::polar(mag, phase[k]);
      const double delta = wrap_phase(std::arg(b) - std::arg(a) - advance[k]);
      phase[k] += advance[k] + delta;
    }
    stretched.push_back(std::move(column));
  }

  const auto out_frames = static_cast<std::int64_t>(stretched.size());
  const auto full_len = static_cast<std::size_t>(n_fft + hop * (out_frames - 1));
  std::vector<double> signal(full_len, 0.0);
  std::vector<double> norm(full_len, 0.0);
  for (std::int64_t t = 0; t < out_frames; ++t) {
    for (int k = 0; k < bins; ++k) {
      fft.spectrum()[k][0] = stretched[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)].real();
      fft.spectrum()[k][1] = stretched[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)].imag();
    }
    fft.inverse();
    const auto offset = static_cast<std::size_t>(t * hop);
    for (int i = 0; i < n_fft; ++i) {
      const double w = window[static_cast<std::size_t>(i)];
      signal[offset + static_cast<std::size_t>(i)] += w * fft.real()[i] / n_fft;
      norm[offset + static_cast<std::size_t>(i)] += w * w;
    }
  }

  AudioClip out;
  out.sample_rate = clip.sample_rate;
  out.samples.assign(static_cast<std::size_t>(target_len), 0.0f);
  for (std::int64_t i = 0; i < target_len; ++i) {
    const auto src = static_cast<std::size_t>(i + pad);
    if (src >= full_len) break;
    const double v = norm[src] > 1e-10 ? signal[src] / norm[src] : signal[src];
    out.samples[static_cast<std::size_t>(i)] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return out;
}

CqtMatrix stretch_columns(const CqtMatrix& raw, double rate) {
  if (!(rate > 0.0) || !std::isfinite(rate)) {
    fail(ErrorKind::kRange, "stretch rate must be positive, got " + std::to_string(rate));
  }
  if (rate == 1.0) return raw;
  const int cols = std::max(1, static_cast<int>(std::lround(raw.cols / rate)));
  CqtMatrix out(raw.rows, cols, raw.frame_rate);
  out.source_id = raw.source_id;
  for (int j = 0; j < cols; ++j) {
    const double pos = j * rate;
    const int left = std::min(static_cast<int>(pos), raw.cols - 1);
    const int right = std::min(left + 1, raw.cols - 1);
    const auto alpha = static_cast<float>(pos - left);
    for (int r = 0; r < raw.rows; ++r) {
      out.at(r, j) = (1.0f - alpha) * raw.at(r, left) + alpha * raw.at(r, right);
    }
  }
  return out;
}

CqtMatrix crop_at(const CqtMatrix& features, int length, double u) {
  if (length <= 0) fail(ErrorKind::kInvalidInput, "crop length must be positive");
  if (features.cols <= length) return cyclic_pad(features, length);
  const int span = features.cols - length + 1;
  const int start = std::min(span - 1, static_cast<int>(u * span));
  CqtMatrix out(features.rows, length, features.frame_rate);
  out.source_id = features.source_id;
  for (int r = 0; r < features.rows; ++r) {
    std::copy_n(features.data.begin() + static_cast<std::ptrdiff_t>(r) * features.cols + start,
                length, out.data.begin() + static_cast<std::ptrdiff_t>(r) * length);
  }
  return out;
}

CqtMatrix random_crop(const CqtMatrix& features, int length, Rng& rng) {
  return crop_at(features, length, rng.uniform());
}

// ---- configuration ---------------------------------------------------------

void validate_train_config(const TrainConfig& config, const ModelConfig& model) {
  if (config.batch_size <= 0) fail(ErrorKind::kConfig, "batch_size must be positive");
  if (!(config.tempo_min > 0.0 && config.tempo_min <= config.tempo_max)) {
    fail(ErrorKind::kConfig, "tempo range must satisfy 0 < a <= b");
  }
  if (config.crop_lengths.empty()) fail(ErrorKind::kConfig, "no crop lengths");
  const std::int64_t minimum = min_input_length(model);
  for (int l : config.crop_lengths) {
    if (l < minimum) {
      fail(ErrorKind::kConfig, "crop length " + std::to_string(l) +
                                   " below the model's minimum input length " +
                                   std::to_string(minimum));
    }
  }
  if (!(config.learning_rate > 0.0)) fail(ErrorKind::kConfig, "learning rate must be positive");
  if (config.max_epochs < 0) fail(ErrorKind::kConfig, "max_epochs must be non-negative");
  if (config.patience <= 0) fail(ErrorKind::kConfig, "patience must be positive");
}

std::string train_config_to_json(const TrainConfig& c) {
  json j = {{"batch_size", c.batch_size},
            {"tempo_range", {c.tempo_min, c.tempo_max}},
            {"crop_lengths", c.crop_lengths},
            {"learning_rate", c.learning_rate},
            {"max_epochs", c.max_epochs},
            {"patience", c.patience},
            {"seed", c.seed},
            {"augmentation_enabled", c.augmentation_enabled},
            {"augmentation_domain", c.augmentation_domain == AugmentationDomain::kAudio ? "audio" : "cqt"},
            {"cycles_per_epoch", c.cycles_per_epoch},
            {"threads", c.threads},
            {"embed_frames", c.embed_frames}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("tempo_range")) {
      c.tempo_min = j["tempo_range"].at(0);
      c.tempo_max = j["tempo_range"].at(1);
    }
    c.crop_lengths = j.value("crop_lengths", c.crop_lengths);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.augmentation_enabled = j.value("augmentation_enabled", c.augmentation_enabled);
    const std::string domain = j.value("augmentation_domain", std::string("audio"));
    if (domain == "audio") c.augmentation_domain = AugmentationDomain::kAudio;
    else if (domain == "cqt") c.augmentation_domain = AugmentationDomain::kCqt;
    else fail(ErrorKind::kConfig, "unknown augmentation_domain '" + domain + "'");
    c.cycles_per_epoch = j.value("cycles_per_epoch", c.cycles_per_epoch);
    c.threads = j.value("threads", c.threads);
    c.embed_frames = j.value("embed_frames", c.embed_frames);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, std::string("malformed train config: ") + e.what());
  }
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return train_config_from_json(buffer.str());
}

// ---- data ------------------------------------------------------------------

std::vector<int> training_song_ids(const CorpusManifest& manifest) {
  std::vector<int> ids;
  for (const auto& e : manifest.entries) {
    if (e.split == Split::kTrain) ids.push_back(e.song_id);
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

TrainingSet load_training_set(const CorpusManifest& manifest,
                              const std::filesystem::path& base_dir,
                              AugmentationDomain domain, int threads) {
  validate_manifest(manifest);
  const auto song_ids = training_song_ids(manifest);
  std::map<int, int> label_of;
  for (std::size_t i = 0; i < song_ids.size(); ++i) label_of[song_ids[i]] = static_cast<int>(i);

  std::vector<const ManifestEntry*> wanted;
  for (const auto& e : manifest.entries) {
    if (e.split != Split::kTest) wanted.push_back(&e);
  }
  std::vector<Recording> loaded(wanted.size());
  parallel_for(wanted.size(), threads, [&](std::size_t i) {
    const ManifestEntry& e = *wanted[i];
    Recording& rec = loaded[i];
    rec.recording_id = e.recording_id;
    rec.song_id = e.song_id;
    rec.label = e.split == Split::kTrain ? label_of.at(e.song_id) : -1;
    rec.audio = read_wav(base_dir / e.wav_path);
    CqtMatrix raw = compute_cqt(rec.audio);
    raw.source_id = e.recording_id;
    rec.features = log_compress(mean_downsample(raw));
    if (domain == AugmentationDomain::kCqt && e.split == Split::kTrain) rec.raw_cqt = std::move(raw);
  });

  TrainingSet set;
  set.num_classes = static_cast<int>(song_ids.size());
  for (std::size_t i = 0; i < wanted.size(); ++i) {
    if (wanted[i]->split == Split::kTrain) set.train.push_back(std::move(loaded[i]));
    else set.val.push_back(std::move(loaded[i]));
  }
  return set;
}

// ---- batches ---------------------------------------------------------------

namespace {

CqtMatrix augmented_features(const Recording& rec, double rate, AugmentationDomain domain) {
  if (rate == 1.0) return rec.features;
  if (domain == AugmentationDomain::kCqt) {
    if (!rec.raw_cqt) fail(ErrorKind::kConfig, "CQT-domain augmentation needs cached raw CQTs");
    return log_compress(mean_downsample(stretch_columns(*rec.raw_cqt, rate)));
  }
  return extract_features(tempo_stretch(rec.audio, rate));
}

}  // namespace

AssembledBatch assemble_batch(const TrainingSet& data, const TrainConfig& config, Rng& rng,
                              int crop_length) {
  if (data.train.empty()) fail(ErrorKind::kConfig, "empty training set");
  const auto n = static_cast<std::size_t>(config.batch_size);
  AssembledBatch batch;
  std::vector<double> offsets(n);
  // Every random draw happens here, in a fixed order, so the parallel part
  // below cannot change the stream.
  for (std::size_t i = 0; i < n; ++i) {
    batch.recordings.push_back(static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(data.train.size()) - 1)));
    const double r = rng.uniform(config.tempo_min, config.tempo_max);
    batch.rates.push_back(config.augmentation_enabled ? r : 1.0);
    offsets[i] = rng.uniform();
    batch.labels.push_back(data.train[batch.recordings.back()].label);
  }
  batch.crops.resize(n);
  parallel_for(n, config.threads, [&](std::size_t i) {
    const Recording& rec = data.train[batch.recordings[i]];
    batch.crops[i] = crop_at(augmented_features(rec, batch.rates[i], config.augmentation_domain),
                             crop_length, offsets[i]);
  });
  return batch;
}

BatchResult run_batch(const TrainingSet& data, CqtNet& net, Adam& optimizer,
                      const TrainConfig& config, Rng& rng, int crop_length) {
  if (crop_length < min_input_length(net.config())) {
    fail(ErrorKind::kConfig, "crop length " + std::to_string(crop_length) +
                                 " below the model's minimum input length");
  }
  AssembledBatch batch = assemble_batch(data, config, rng, crop_length);
  Tensor logits = net.forward_logits(make_batch(batch.crops), Mode::kTrain);
  Tensor loss = softmax_cross_entropy(logits, std::span<const int>(batch.labels));
  backward(loss);
  optimizer.step();
  optimizer.zero_grad();

  BatchResult result;
  result.loss = loss.item();
  result.recordings = std::move(batch.recordings);
  result.rates = std::move(batch.rates);
  result.labels = std::move(batch.labels);
  return result;
}

// ---- state and log ---------------------------------------------------------

std::string train_state_to_json(const TrainState& s) {
  json j = {{"next_epoch", s.next_epoch},
            {"step", s.step},
            {"rng_state", s.rng_state},
            {"best_val_map", s.best_val_map},
            {"epochs_without_improvement", s.epochs_without_improvement}};
  return j.dump(2) + "\n";
}

TrainState train_state_from_json(const std::string& text) {
  TrainState s;
  try {
    const json j = json::parse(text);
    s.next_epoch = j.at("next_epoch");
    s.step = j.at("step");
    s.rng_state = j.at("rng_state");
    s.best_val_map = j.at("best_val_map");
    s.epochs_without_improvement = j.at("epochs_without_improvement");
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed train state: ") + e.what());
  }
  return s;
}

namespace {

std::string log_line(const LogRecord& r) {
  json j;
  if (r.is_epoch) {
    j = {{"epoch", r.epoch}};
    j["val_map"] = r.val_map ? json(*r.val_map) : json(nullptr);
  } else {
    j = {{"epoch", r.epoch}, {"step", r.step}, {"crop_length", r.crop_length}, {"loss", r.loss}};
  }
  return j.dump() + "\n";
}

double validation_map(CqtNet& net, const TrainingSet& data, int embed_frames) {
  std::vector<EmbedItem> items;
  for (const auto* split : {&data.val, &data.train}) {
    for (const auto& rec : *split) items.push_back({rec.recording_id, rec.song_id, rec.features});
  }
  const EmbeddingIndex references = embed_all(net, items, embed_frames);
  std::set<std::string> val_ids;
  for (const auto& rec : data.val) val_ids.insert(rec.recording_id);
  return evaluate(references.select(val_ids), references).map;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << text;
}

}  // namespace

TrainResult train(const TrainingSet& data, CqtNet& net, const TrainConfig& config,
                  const std::filesystem::path& out_dir, bool resume,
                  const ProgressCallback& progress) {
  validate_train_config(config, net.config());
  if (data.train.empty()) fail(ErrorKind::kConfig, "empty training set");
  if (net.config().num_classes != data.num_classes) {
    fail(ErrorKind::kConfig, "model has " + std::to_string(net.config().num_classes) +
                                 " classes, training split has " +
                                 std::to_string(data.num_classes));
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create " + out_dir.string() + ": " + ec.message());

  TrainState state;
  Rng rng(derive_seed(config.seed, "train"));
  Adam optimizer(net.parameter_tensors(), {.lr = config.learning_rate});
  if (resume) {
    Checkpoint ckpt = load_checkpoint(out_dir / "last.ckpt");
    if (!(ckpt.net.config() == net.config())) {
      fail(ErrorKind::kConfig, "checkpoint config differs from the requested model");
    }
    net = std::move(ckpt.net);
    optimizer = Adam(net.parameter_tensors(), {.lr = config.learning_rate});
    if (ckpt.optimizer) restore_adam_state(net, *ckpt.optimizer, optimizer);
    state = train_state_from_json(read_text(out_dir / "train_state.json"));
    rng = Rng::deserialize(state.rng_state);
  }

  std::ofstream log(out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!log) fail(ErrorKind::kIo, "cannot write training log in " + out_dir.string());

  const int cycles = config.cycles_per_epoch > 0
                         ? config.cycles_per_epoch
                         : static_cast<int>((data.train.size() + config.batch_size - 1) /
                                            static_cast<std::size_t>(config.batch_size));
  TrainResult result;
  result.best_val_map = state.best_val_map;
  auto emit = [&](const LogRecord& record) {
    result.log.push_back(record);
    log << log_line(record);
    log.flush();
    if (progress) progress(record);
  };

  for (int epoch = state.next_epoch; epoch < config.max_epochs; ++epoch) {
    for (int cycle = 0; cycle < cycles; ++cycle) {
      for (int length : config.crop_lengths) {
        const BatchResult batch = run_batch(data, net, optimizer, config, rng, length);
        emit({epoch, state.step++, length, batch.loss, false, std::nullopt});
      }
    }
    std::optional<double> val_map;
    if (!data.val.empty()) val_map = validation_map(net, data, config.embed_frames);
    emit({epoch, state.step, 0, 0.0, true, val_map});

    const bool improved = !val_map || *val_map > state.best_val_map;
    if (improved) {
      state.best_val_map = val_map.value_or(state.best_val_map);
      state.epochs_without_improvement = 0;
      result.best_epoch = epoch;
      save_checkpoint(out_dir / "best.ckpt", net);
    } else {
      ++state.epochs_without_improvement;
    }
    state.next_epoch = epoch + 1;
    state.rng_state = rng.serialize();
    const AdamState adam = capture_adam_state(net, optimizer);
    save_checkpoint(out_dir / "last.ckpt", net, &adam);
    write_text(out_dir / "train_state.json", train_state_to_json(state));
    ++result.epochs_run;
    if (state.epochs_without_improvement >= config.patience) {
      result.stopped_early = true;
      break;
    }
  }
  result.best_val_map = state.best_val_map;
  return result;
}

}  // namespace cqtnet
