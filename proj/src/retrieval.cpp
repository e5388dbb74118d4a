#include "cqtnet/retrieval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "cqtnet/errors.hpp"
#include "cqtnet/parallel.hpp"
#include "cqtnet/rng.hpp"

namespace cqtnet {

using nlohmann::json;

const IndexEntry* EmbeddingIndex::find(const std::string& recording_id) const {
  for (const auto& e : entries) {
    if (e.recording_id == recording_id) return &e;
  }
  return nullptr;
}

EmbeddingIndex EmbeddingIndex::select(const std::set<std::string>& ids) const {
  EmbeddingIndex out;
  out.dim = dim;
  for (const auto& e : entries) {
    if (ids.contains(e.recording_id)) out.entries.push_back(e);
  }
  return out;
}

void EmbeddingIndex::add(IndexEntry entry) {
  if (static_cast<int>(entry.vector.size()) != dim) {
    fail(ErrorKind::kShape, "embedding of length " + std::to_string(entry.vector.size()) +
                                " in index of dim " + std::to_string(dim));
  }
  for (float v : entry.vector) {
    if (!std::isfinite(v)) fail(ErrorKind::kNumeric, "non-finite embedding for " + entry.recording_id);
  }
  if (find(entry.recording_id)) {
    fail(ErrorKind::kInvariantViolation, "duplicate recording id " + entry.recording_id);
  }
  entries.push_back(std::move(entry));
}

void save_index(const std::filesystem::path& path, const EmbeddingIndex& index) {
  detail::ByteWriter w;
  w.tag("EMB1");
  w.u32(static_cast<std::uint32_t>(index.dim));
  w.u32(static_cast<std::uint32_t>(index.entries.size()));
  for (const auto& e : index.entries) {
    w.short_string(e.recording_id);
    w.u32(static_cast<std::uint32_t>(e.class_id));
    for (float v : e.vector) w.f32(v);
  }
  detail::write_file(path, w.bytes());
}

EmbeddingIndex load_index(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  r.expect_tag("EMB1");
  EmbeddingIndex index;
  index.dim = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    IndexEntry e;
    e.recording_id = r.short_string();
    e.class_id = static_cast<int>(r.u32());
    e.vector.resize(static_cast<std::size_t>(index.dim));
    r.f32_array(e.vector.data(), e.vector.size());
    index.add(std::move(e));
  }
  if (!r.at_end()) fail(ErrorKind::kFormat, "trailing bytes after index entries");
  return index;
}

double cosine_similarity(std::span<const float> u, std::span<const float> v, bool* degenerate) {
  if (u.size() != v.size()) {
    fail(ErrorKind::kShape, "cosine similarity of vectors with lengths " +
                                std::to_string(u.size()) + " and " + std::to_string(v.size()));
  }
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += static_cast<double>(u[i]) * v[i];
    nu += static_cast<double>(u[i]) * u[i];
    nv += static_cast<double>(v[i]) * v[i];
  }
  if (degenerate) *degenerate = nu == 0.0 || nv == 0.0;
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

namespace {

bool ranks_before(const RankedItem& a, const RankedItem& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.recording_id < b.recording_id;
}

std::vector<RankedItem> scored_references(const std::string& query_id,
                                          std::span<const float> query,
                                          const EmbeddingIndex& references) {
  std::vector<RankedItem> items;
  items.reserve(references.entries.size());
  for (const auto& e : references.entries) {
    if (e.recording_id == query_id) continue;
    items.push_back({e.recording_id, cosine_similarity(query, e.vector)});
  }
  return items;
}

std::set<std::string> relevant_ids(const std::string& query_id, int class_id,
                                   const EmbeddingIndex& references) {
  std::set<std::string> relevant;
  for (const auto& e : references.entries) {
    if (e.recording_id != query_id && e.class_id == class_id) relevant.insert(e.recording_id);
  }
  return relevant;
}

void finalize(MetricsReport& report) {
  const double n = static_cast<double>(report.per_query.size());
  if (report.per_query.empty()) {
    fail(ErrorKind::kUndefinedMetric, "no query has a relevant reference");
  }
  double ap = 0.0, p10 = 0.0, mr1 = 0.0, top1 = 0.0;
  for (const auto& q : report.per_query) {
    ap += q.average_precision;
    p10 += q.precision_at_10;
    mr1 += q.first_relevant_rank;
    top1 += q.top1_relevant ? 1.0 : 0.0;
  }
  report.map = ap / n;
  report.p_at_10 = p10 / n;
  report.mr1 = mr1 / n;
  report.top1 = top1 / n;
}

}  // namespace

RankingList rank(const std::string& query_id, std::span<const float> query,
                 const EmbeddingIndex& references) {
  RankingList list;
  list.query_id = query_id;
  list.items = scored_references(query_id, query, references);
  std::sort(list.items.begin(), list.items.end(), ranks_before);
  return list;
}

RankingList rank(const std::string& query_id, const EmbeddingIndex& index) {
  const IndexEntry* query = index.find(query_id);
  if (!query) fail(ErrorKind::kLookup, "unknown query id '" + query_id + "'");
  return rank(query_id, query->vector, index);
}

double average_precision(const RankingList& ranking, const std::set<std::string>& relevant) {
  if (relevant.empty()) fail(ErrorKind::kUndefinedMetric, "empty relevant set for " + ranking.query_id);
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < ranking.items.size(); ++k) {
    if (relevant.contains(ranking.items[k].recording_id)) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
  }
  return sum / static_cast<double>(relevant.size());
}

MetricsReport evaluate(const EmbeddingIndex& queries, const EmbeddingIndex& references) {
  MetricsReport report;
  for (const auto& q : queries.entries) {
    const auto relevant = relevant_ids(q.recording_id, q.class_id, references);
    if (relevant.empty()) {
      report.skipped.push_back(q.recording_id);
      continue;
    }
    const RankingList ranking = rank(q.recording_id, q.vector, references);
    QueryMetrics m;
    m.query_id = q.recording_id;
    m.average_precision = average_precision(ranking, relevant);
    std::size_t top10 = 0;
    for (std::size_t k = 0; k < ranking.items.size(); ++k) {
      if (!relevant.contains(ranking.items[k].recording_id)) continue;
      if (m.first_relevant_rank == 0.0) m.first_relevant_rank = static_cast<double>(k + 1);
      if (k < 10) ++top10;
    }
    m.precision_at_10 = static_cast<double>(top10) / 10.0;
    m.top1_relevant = m.first_relevant_rank == 1.0;
    report.per_query.push_back(std::move(m));
  }
  finalize(report);
  return report;
}

MetricsReport oracle_metrics(const EmbeddingIndex& queries, const EmbeddingIndex& references) {
  MetricsReport report;
  for (const auto& q : queries.entries) {
    std::vector<RankedItem> items;
    std::vector<bool> is_relevant;
    for (const auto& e : references.entries) {
      if (e.recording_id == q.recording_id) continue;
      items.push_back({e.recording_id, cosine_similarity(q.vector, e.vector)});
      is_relevant.push_back(e.class_id == q.class_id);
    }
    const std::size_t n = items.size();
    std::size_t relevant_count = 0;
    for (bool r : is_relevant) relevant_count += r ? 1 : 0;
    if (relevant_count == 0) {
      report.skipped.push_back(q.recording_id);
      continue;
    }
    // rank_of[i] = 1 + number of items that must precede item i.
    std::vector<std::size_t> rank_of(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const bool j_first =
            items[j].similarity > items[i].similarity ||
            (items[j].similarity == items[i].similarity &&
             items[j].recording_id < items[i].recording_id);
        if (j_first) ++rank_of[i];
      }
    }
    // relevant_at[k] is true when the item at rank k (1-based) is relevant.
    std::vector<bool> relevant_at(n + 1, false);
    for (std::size_t i = 0; i < n; ++i) relevant_at[rank_of[i]] = is_relevant[i];

    QueryMetrics m;
    m.query_id = q.recording_id;
    double ap = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
      if (!relevant_at[k]) continue;
      std::size_t in_top_k = 0;
      for (std::size_t i = 1; i <= k; ++i) in_top_k += relevant_at[i] ? 1 : 0;
      ap += static_cast<double>(in_top_k) / static_cast<double>(k);
    }
    m.average_precision = ap / static_cast<double>(relevant_count);
    std::size_t in_top_10 = 0;
    for (std::size_t k = 1; k <= std::min<std::size_t>(10, n); ++k) in_top_10 += relevant_at[k] ? 1 : 0;
    m.precision_at_10 = static_cast<double>(in_top_10) / 10.0;
    std::size_t first = 1;
    while (!relevant_at[first]) ++first;
    m.first_relevant_rank = static_cast<double>(first);
    m.top1_relevant = relevant_at[1];
    report.per_query.push_back(std::move(m));
  }
  finalize(report);
  return report;
}

double random_baseline_map(const EmbeddingIndex& queries, const EmbeddingIndex& references,
                           int trials, std::uint64_t seed) {
  if (trials <= 0) fail(ErrorKind::kInvalidInput, "trials must be positive");
  Rng rng(seed);
  double total = 0.0;
  std::size_t count = 0;
  for (int t = 0; t < trials; ++t) {
    for (const auto& q : queries.entries) {
      std::vector<bool> order;
      for (const auto& e : references.entries) {
        if (e.recording_id != q.recording_id) order.push_back(e.class_id == q.class_id);
      }
      const auto relevant = static_cast<std::size_t>(std::count(order.begin(), order.end(), true));
      if (relevant == 0) continue;
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
        const bool tmp = order[i - 1];
        order[i - 1] = order[j];
        order[j] = tmp;
      }
      double ap = 0.0;
      std::size_t hits = 0;
      for (std::size_t k = 0; k < order.size(); ++k) {
        if (order[k]) ap += static_cast<double>(++hits) / static_cast<double>(k + 1);
      }
      total += ap / static_cast<double>(relevant);
      ++count;
    }
  }
  if (count == 0) fail(ErrorKind::kUndefinedMetric, "no query has a relevant reference");
  return total / static_cast<double>(count);
}

std::string metrics_to_json(const MetricsReport& report) {
  json per_query = json::array();
  for (const auto& q : report.per_query) {
    per_query.push_back({{"query_id", q.query_id},
                         {"ap", q.average_precision},
                         {"p_at_10", q.precision_at_10},
                         {"first_rank", q.first_relevant_rank},
                         {"top1", q.top1_relevant}});
  }
  json j = {{"map", report.map},       {"p_at_10", report.p_at_10}, {"mr1", report.mr1},
            {"top1", report.top1},     {"per_query", per_query},     {"skipped", report.skipped}};
  return j.dump(2) + "\n";
}

void save_metrics(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << metrics_to_json(report);
}

std::vector<float> embed_features(CqtNet& net, const CqtMatrix& features, int min_frames) {
  const int target = std::max(min_frames, static_cast<int>(min_input_length(net.config())));
  const CqtMatrix padded = cyclic_pad(features, target);
  GradModeGuard no_grad(false);
  Tensor emb = net.forward_embedding(make_batch(std::span<const CqtMatrix>(&padded, 1)), Mode::kEval);
  return {emb.values().begin(), emb.values().end()};
}

EmbeddingIndex embed_all(CqtNet& net, const std::vector<EmbedItem>& items, int min_frames) {
  std::vector<std::vector<float>> vectors(items.size());
  // Eval-mode forward passes only read the parameters, so they can share
  // the network.
  parallel_for(items.size(), 0, [&](std::size_t i) {
    vectors[i] = embed_features(net, items[i].features, min_frames);
  });
  EmbeddingIndex index;
  index.dim = net.config().embedding_dim;
  for (std::size_t i = 0; i < items.size(); ++i) {
    index.add({items[i].recording_id, items[i].class_id, std::move(vectors[i])});
  }
  return index;
}

EmbeddingIndex build_index(CqtNet& net, const std::vector<ManifestEntry>& entries,
                           const std::filesystem::path& base_dir, int min_frames, int threads) {
  std::vector<std::string> missing;
  for (const auto& e : entries) {
    if (!std::filesystem::exists(base_dir / e.wav_path)) missing.push_back(e.recording_id);
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    fail(ErrorKind::kIo, "missing audio for: " + ids);
  }
  std::vector<EmbedItem> items(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    items[i].recording_id = entries[i].recording_id;
    items[i].class_id = entries[i].song_id;
    items[i].features = extract_features(read_wav(base_dir / entries[i].wav_path));
  });
  return embed_all(net, items, min_frames);
}

}  // namespace cqtnet
