#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "cqtnet/audio.hpp"
#include "cqtnet/corpus.hpp"
#include "cqtnet/cqt.hpp"
#include "cqtnet/errors.hpp"
#include "cqtnet/gradcheck.hpp"
#include "cqtnet/model.hpp"
#include "cqtnet/parallel.hpp"
#include "cqtnet/retrieval.hpp"
#include "cqtnet/rng.hpp"
#include "cqtnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace cqtnet;

namespace {

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 0;
};

struct SynthOptions {
  int songs = 30;
  int covers = 5;
  std::string out;
};

struct ExtractOptions {
  std::string in;
  std::string out;
};

struct TrainOptions {
  std::string manifest;
  std::string model_config;
  std::string train_config;
  std::string out;
  int epochs = -1;
  bool resume = false;
  bool quiet = false;
};

struct EmbedOptions {
  std::string checkpoint;
  std::string manifest;
  std::string split = "all";
  std::string out;
  int frames = kDefaultEmbedFrames;
};

struct QueryOptions {
  std::string index;
  std::string query_id;
  int topk = 10;
};

struct EvaluateOptions {
  std::string index;
  std::string manifest;
  std::string out;
  std::string query_split = "test";
  std::string references = "all";
  int baseline_trials = 0;
};

struct GradcheckOptions {
  double tolerance = 1e-5;
};

int run_synth(const GlobalOptions& g, const SynthOptions& o) {
  const CorpusManifest manifest = generate_corpus(o.songs, o.covers, g.seed, o.out, g.threads);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& e : manifest.entries) ++counts[static_cast<int>(e.split)];
  std::printf("wrote %zu recordings to %s (train %zu, val %zu, test %zu)\n",
              manifest.entries.size(), o.out.c_str(), counts[0], counts[1], counts[2]);
  return 0;
}

int run_extract(const ExtractOptions& o) {
  CqtMatrix features = extract_features(read_wav(o.in));
  features.source_id = fs::path(o.in).stem().string();
  save_cqt(o.out, features);
  std::printf("%d x %d at %.6f Hz -> %s\n", features.rows, features.cols, features.frame_rate,
              o.out.c_str());
  return 0;
}

int run_train(const GlobalOptions& g, const TrainOptions& o) {
  const CorpusManifest manifest = load_manifest(o.manifest);
  TrainConfig config = o.train_config.empty() ? TrainConfig{} : load_train_config(o.train_config);
  if (g.seed_given) config.seed = g.seed;
  if (o.epochs >= 0) config.max_epochs = o.epochs;
  config.threads = g.threads;

  const TrainingSet data = load_training_set(manifest, fs::path(o.manifest).parent_path(),
                                             config.augmentation_domain, g.threads);
  ModelConfig model = o.model_config.empty() ? default_config(data.num_classes)
                                             : load_config(o.model_config);
  // The classifier always matches the training split.
  model.num_classes = data.num_classes;
  CqtNet net(model, derive_seed(config.seed, "model.init"));

  ProgressCallback progress;
  if (!o.quiet) {
    progress = [](const LogRecord& r) {
      if (r.is_epoch) {
        if (r.val_map) std::printf("epoch %d  val_map %.4f\n", r.epoch, *r.val_map);
        else std::printf("epoch %d  (no validation split)\n", r.epoch);
        std::fflush(stdout);
      }
    };
  }
  const TrainResult result = train(data, net, config, o.out, o.resume, progress);
  std::printf("epochs %d  best_epoch %d  best_val_map %.4f%s\n", result.epochs_run,
              result.best_epoch, result.best_val_map, result.stopped_early ? "  (early stop)" : "");
  return 0;
}

int run_embed(const GlobalOptions& g, const EmbedOptions& o) {
  const CorpusManifest manifest = load_manifest(o.manifest);
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  std::vector<ManifestEntry> entries;
  if (o.split == "all") {
    entries = manifest.entries;
  } else {
    entries = manifest.subset(parse_split(o.split));
  }
  const EmbeddingIndex index =
      build_index(ckpt.net, entries, fs::path(o.manifest).parent_path(), o.frames, g.threads);
  save_index(o.out, index);
  std::printf("embedded %zu recordings -> %s\n", index.entries.size(), o.out.c_str());
  return 0;
}

int run_query(const QueryOptions& o) {
  const EmbeddingIndex index = load_index(o.index);
  const RankingList ranking = rank(o.query_id, index);
  const IndexEntry* query = index.find(o.query_id);
  std::printf("rank\trecording_id\tsimilarity\tsame_class\n");
  const auto shown = std::min<std::size_t>(static_cast<std::size_t>(std::max(o.topk, 0)),
                                           ranking.items.size());
  for (std::size_t i = 0; i < shown; ++i) {
    const auto& item = ranking.items[i];
    const bool same = index.find(item.recording_id)->class_id == query->class_id;
    std::printf("%zu\t%s\t%.6f\t%s\n", i + 1, item.recording_id.c_str(), item.similarity,
                same ? "yes" : "no");
  }
  return 0;
}

int run_evaluate(const GlobalOptions& g, const EvaluateOptions& o) {
  const EmbeddingIndex index = load_index(o.index);
  const CorpusManifest manifest = load_manifest(o.manifest);
  std::set<std::string> query_ids;
  std::set<std::string> reference_ids;
  const Split query_split = parse_split(o.query_split);
  for (const auto& e : manifest.entries) {
    if (e.split == query_split) query_ids.insert(e.recording_id);
    if (o.references == "all" || e.split == query_split) reference_ids.insert(e.recording_id);
  }
  const EmbeddingIndex queries = index.select(query_ids);
  const EmbeddingIndex references = index.select(reference_ids);
  if (queries.entries.empty()) {
    fail(ErrorKind::kLookup, "index holds no recordings of split '" + o.query_split + "'");
  }
  const MetricsReport report = evaluate(queries, references);
  save_metrics(o.out, report);
  std::printf("queries %zu  references %zu  MAP %.4f  P@10 %.4f  MR1 %.3f\n",
              report.per_query.size(), references.entries.size(), report.map, report.p_at_10,
              report.mr1);
  if (o.baseline_trials > 0) {
    const double baseline = random_baseline_map(queries, references, o.baseline_trials,
                                                derive_seed(g.seed, "evaluate.baseline"));
    std::printf("random baseline MAP %.4f\n", baseline);
  }
  return 0;
}

int run_gradcheck(const GlobalOptions& g, const GradcheckOptions& o) {
  const auto reports = run_gradient_suite(o.tolerance, static_cast<unsigned>(g.seed + 7));
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("%-5s %-28s max_rel %.3e  max_abs %.3e  (%zu elements)\n",
                r.passed ? "ok" : "FAIL", r.name.c_str(), r.max_relative_error,
                r.max_absolute_error, r.checked_elements);
    ok = ok && r.passed;
  }
  return ok ? 0 : 3;
}

void add_globals(CLI::App& app, GlobalOptions& g) {
  app.add_option("--seed", g.seed, "Global seed; stage seeds are derived from it");
  app.add_option("--threads", g.threads, "Worker threads (0 = all cores)")
      ->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cover-song identification toolkit"};
  app.require_subcommand(1);
  GlobalOptions g;

  auto* dataset = app.add_subcommand("dataset", "Synthetic corpus tools");
  dataset->require_subcommand(1);
  SynthOptions synth;
  auto* synth_cmd = dataset->add_subcommand("synth", "Render a synthetic cover corpus");
  synth_cmd->add_option("--songs", synth.songs, "Number of songs")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--covers", synth.covers, "Covers per song")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  auto* cqt = app.add_subcommand("cqt", "CQT features");
  cqt->require_subcommand(1);
  ExtractOptions extract;
  auto* extract_cmd = cqt->add_subcommand("extract", "Extract log-CQT features from a WAV file");
  extract_cmd->add_option("--in", extract.in, "Input WAV")->required();
  extract_cmd->add_option("--out", extract.out, "Output CQT file")->required();

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train a model on the manifest's train split");
  train_cmd->add_option("--manifest", train_opts.manifest, "Corpus manifest")->required();
  train_cmd->add_option("--model-config", train_opts.model_config, "Model config JSON");
  train_cmd->add_option("--train-config", train_opts.train_config, "Training config JSON");
  train_cmd->add_option("--out", train_opts.out, "Checkpoint directory")->required();
  train_cmd->add_option("--epochs", train_opts.epochs, "Override max_epochs");
  train_cmd->add_flag("--resume", train_opts.resume, "Continue from out/last.ckpt");
  train_cmd->add_flag("--quiet", train_opts.quiet, "No per-epoch output");

  EmbedOptions embed_opts;
  auto* embed_cmd = app.add_subcommand("embed", "Embed recordings into an index");
  embed_cmd->add_option("--checkpoint", embed_opts.checkpoint, "Checkpoint file")->required();
  embed_cmd->add_option("--manifest", embed_opts.manifest, "Corpus manifest")->required();
  embed_cmd->add_option("--split", embed_opts.split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  embed_cmd->add_option("--out", embed_opts.out, "Output index file")->required();
  embed_cmd->add_option("--frames", embed_opts.frames, "Minimum frames per embedded input")
      ->check(CLI::PositiveNumber);

  QueryOptions query_opts;
  auto* query_cmd = app.add_subcommand("query", "Rank the index against one of its recordings");
  query_cmd->add_option("--index", query_opts.index, "Index file")->required();
  query_cmd->add_option("--query-id", query_opts.query_id, "Recording id")->required();
  query_cmd->add_option("--topk", query_opts.topk, "Rows to print")->check(CLI::PositiveNumber);

  EvaluateOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("evaluate", "MAP, P@10 and MR1 for one split's queries");
  eval_cmd->add_option("--index", eval_opts.index, "Index file")->required();
  eval_cmd->add_option("--manifest", eval_opts.manifest, "Corpus manifest")->required();
  eval_cmd->add_option("--out", eval_opts.out, "Report JSON")->required();
  eval_cmd->add_option("--query-split", eval_opts.query_split, "Split used as queries")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--references", eval_opts.references,
                       "all: every indexed recording; split: the query split only")
      ->check(CLI::IsMember({"all", "split"}));
  eval_cmd->add_option("--baseline-trials", eval_opts.baseline_trials,
                       "Also print a Monte-Carlo random-ranking MAP")
      ->check(CLI::NonNegativeNumber);

  GradcheckOptions grad_opts;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad_cmd->add_option("--tolerance", grad_opts.tolerance, "Maximum relative error");

  for (CLI::App* cmd : {&app, dataset, synth_cmd, cqt, extract_cmd, train_cmd, embed_cmd,
                        query_cmd, eval_cmd, grad_cmd}) {
    add_globals(*cmd, g);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  for (CLI::App* cmd : {&app, dataset, synth_cmd, cqt, extract_cmd, train_cmd, embed_cmd,
                        query_cmd, eval_cmd, grad_cmd}) {
    if (cmd->count("--seed") > 0) g.seed_given = true;
  }
  if (g.threads > 0) set_default_thread_count(g.threads);

  try {
    if (*synth_cmd) return run_synth(g, synth);
    if (*extract_cmd) return run_extract(extract);
    if (*train_cmd) return run_train(g, train_opts);
    if (*embed_cmd) return run_embed(g, embed_opts);
    if (*query_cmd) return run_query(query_opts);
    if (*eval_cmd) return run_evaluate(g, eval_opts);
    if (*grad_cmd) return run_gradcheck(g, grad_opts);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
