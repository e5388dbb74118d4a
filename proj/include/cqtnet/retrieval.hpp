#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cqtnet/corpus.hpp"
#include "cqtnet/cqt.hpp"
#include "cqtnet/model.hpp"

namespace cqtnet {

struct IndexEntry {
  std::string recording_id;
  int class_id = 0;
  std::vector<float> vector;

  bool operator==(const IndexEntry&) const = default;
};

struct EmbeddingIndex {
  int dim = 300;
  std::vector<IndexEntry> entries;

  const IndexEntry* find(const std::string& recording_id) const;
  // Entries whose ids are in `ids`, in index order.
  EmbeddingIndex select(const std::set<std::string>& ids) const;
  void add(IndexEntry entry);

  bool operator==(const EmbeddingIndex&) const = default;
};

// "EMB1" binary format.
void save_index(const std::filesystem::path& path, const EmbeddingIndex& index);
EmbeddingIndex load_index(const std::filesystem::path& path);

// u.v / (|u| |v|) clamped to [-1, 1]. A zero vector on either side gives 0
// and sets *degenerate when provided.
double cosine_similarity(std::span<const float> u, std::span<const float> v,
                         bool* degenerate = nullptr);

struct RankedItem {
  std::string recording_id;
  double similarity = 0.0;
};

// Sorted by similarity descending, ties by recording id ascending. Never
// contains the query itself.
struct RankingList {
  std::string query_id;
  std::vector<RankedItem> items;
};

RankingList rank(const std::string& query_id, const EmbeddingIndex& index);
RankingList rank(const std::string& query_id, std::span<const float> query,
                 const EmbeddingIndex& references);

// (1/|R|) * sum over relevant ranks k of (#relevant in top k) / k.
double average_precision(const RankingList& ranking, const std::set<std::string>& relevant);

struct QueryMetrics {
  std::string query_id;
  double average_precision = 0.0;
  double precision_at_10 = 0.0;
  // 1-based rank of the first relevant item.
  double first_relevant_rank = 0.0;
  bool top1_relevant = false;
};

struct MetricsReport {
  double map = 0.0;
  double p_at_10 = 0.0;
  double mr1 = 0.0;
  double top1 = 0.0;
  std::vector<QueryMetrics> per_query;
  // Queries without any relevant reference.
  std::vector<std::string> skipped;
};

// Ranks every reference (minus the query's own recording) for every query;
// a reference is relevant when it shares the query's class id.
MetricsReport evaluate(const EmbeddingIndex& queries, const EmbeddingIndex& references);

// Independent reimplementation of evaluate: ranks come from pairwise
// comparison counts and every metric is transcribed directly from its
// definition.
MetricsReport oracle_metrics(const EmbeddingIndex& queries, const EmbeddingIndex& references);

// MAP of uniformly random reference orderings, averaged over `trials`
// Monte-Carlo draws.
double random_baseline_map(const EmbeddingIndex& queries, const EmbeddingIndex& references,
                           int trials, std::uint64_t seed);

std::string metrics_to_json(const MetricsReport& report);
void save_metrics(const std::filesystem::path& path, const MetricsReport& report);

// Pads the features cyclically to at least max(min_frames,
// min_input_length) and returns the eval-mode embedding.
std::vector<float> embed_features(CqtNet& net, const CqtMatrix& features, int min_frames);

struct EmbedItem {
  std::string recording_id;
  int class_id = 0;
  CqtMatrix features;
};

EmbeddingIndex embed_all(CqtNet& net, const std::vector<EmbedItem>& items, int min_frames);

inline constexpr int kDefaultEmbedFrames = 200;

// Extracts features for every manifest entry (relative to base_dir) and
// embeds them. Missing audio files are reported together.
EmbeddingIndex build_index(CqtNet& net, const std::vector<ManifestEntry>& entries,
                           const std::filesystem::path& base_dir,
                           int min_frames = kDefaultEmbedFrames, int threads = 0);

}  // namespace cqtnet
