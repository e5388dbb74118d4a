#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "cqtnet/retrieval.hpp"
#include "support.hpp"

using namespace cqtnet;
using testing::error_kind;

namespace {

EmbeddingIndex index_of(std::vector<IndexEntry> entries, int dim) {
  EmbeddingIndex index;
  index.dim = dim;
  for (auto& e : entries) index.add(std::move(e));
  return index;
}

RankingList ranking_of(std::vector<std::string> ids) {
  RankingList list;
  list.query_id = "q";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    list.items.push_back({ids[i], 1.0 - 0.1 * static_cast<double>(i)});
  }
  return list;
}

// Random index whose vectors take few distinct values so ties are common.
EmbeddingIndex random_index(std::mt19937& gen, int prefix) {
  std::uniform_int_distribution<int> size(2, 12), classes(1, 4), level(-2, 2);
  const int n = size(gen);
  const int k = classes(gen);
  EmbeddingIndex index;
  index.dim = 3;
  for (int i = 0; i < n; ++i) {
    IndexEntry e;
    e.recording_id = "r" + std::to_string(prefix) + "_" + std::to_string(i);
    e.class_id = std::uniform_int_distribution<int>(0, k - 1)(gen);
    for (int d = 0; d < 3; ++d) e.vector.push_back(static_cast<float>(level(gen)));
    index.add(std::move(e));
  }
  return index;
}

}  // namespace

TEST_CASE("cosine similarity") {
  const std::vector<float> a{1, 0, 0}, b{0, 1, 0}, c{2, 0, 0}, d{-3, 0, 0}, z{0, 0, 0};
  CHECK(cosine_similarity(a, a) == 1.0);
  CHECK(cosine_similarity(a, b) == 0.0);
  CHECK(cosine_similarity(a, c) == 1.0);
  CHECK(cosine_similarity(a, d) == -1.0);
  const std::vector<float> e{1, 1, 0};
  CHECK(cosine_similarity(a, e) == doctest::Approx(1.0 / std::sqrt(2.0)));
  bool degenerate = false;
  CHECK(cosine_similarity(a, z, &degenerate) == 0.0);
  CHECK(degenerate);
  cosine_similarity(a, b, &degenerate);
  CHECK_FALSE(degenerate);
  const std::vector<float> short_vec{1, 0};
  CHECK(error_kind([&] { cosine_similarity(a, short_vec); }) == ErrorKind::kShape);
}

TEST_CASE("ranking excludes the query and breaks ties by id") {
  const EmbeddingIndex index = index_of({{"q", 0, {1, 0}},
                                         {"b", 1, {1, 1}},
                                         {"a", 1, {1, 1}},
                                         {"c", 0, {1, 0}},
                                         {"d", 2, {-1, 0}}},
                                        2);
  const RankingList list = rank("q", index);
  REQUIRE(list.items.size() == 4);
  CHECK(list.items[0].recording_id == "c");
  CHECK(list.items[1].recording_id == "a");
  CHECK(list.items[2].recording_id == "b");
  CHECK(list.items[3].recording_id == "d");
  for (const auto& item : list.items) CHECK(item.recording_id != "q");
  CHECK(error_kind([&] { rank("nope", index); }) == ErrorKind::kLookup);
}

TEST_CASE("average precision") {
  // Relevant at ranks 1 and 3: (1/1 + 2/3) / 2.
  CHECK(average_precision(ranking_of({"x", "n1", "y", "n2"}), {"x", "y"}) ==
        doctest::Approx(5.0 / 6.0));
  CHECK(average_precision(ranking_of({"x", "y", "n"}), {"x", "y"}) == 1.0);
  CHECK(average_precision(ranking_of({"n", "x"}), {"x"}) == 0.5);
  CHECK(error_kind([] { average_precision(ranking_of({"n"}), {}); }) == ErrorKind::kUndefinedMetric);
}

TEST_CASE("evaluate on a hand-made index") {
  const EmbeddingIndex index = index_of({{"a1", 0, {1, 0}},
                                         {"a2", 0, {0.9f, 0.1f}},
                                         {"b1", 1, {0, 1}},
                                         {"b2", 1, {0.8f, 0.2f}},
                                         {"c1", 2, {-1, 0}}},
                                        2);
  const MetricsReport r = evaluate(index, index);
  REQUIRE(r.per_query.size() == 4);
  CHECK(r.skipped == std::vector<std::string>{"c1"});
  // a1 ranks a2 first. b1's neighbour b2 comes after a2 and a1.
  CHECK(r.per_query[0].average_precision == 1.0);
  CHECK(r.per_query[0].top1_relevant);
  CHECK(r.per_query[2].query_id == "b1");
  CHECK(r.per_query[2].first_relevant_rank == 1.0);
  CHECK(r.per_query[3].query_id == "b2");
  CHECK(r.per_query[3].first_relevant_rank == 3.0);
  CHECK(r.per_query[3].average_precision == doctest::Approx(1.0 / 3.0));
  CHECK(r.per_query[0].precision_at_10 == doctest::Approx(0.1));
  CHECK(r.map == doctest::Approx((1.0 + 1.0 + 1.0 + 1.0 / 3.0) / 4.0));

  const EmbeddingIndex lonely = index_of({{"x", 0, {1, 0}}, {"y", 1, {1, 0}}}, 2);
  CHECK(error_kind([&] { evaluate(lonely, lonely); }) == ErrorKind::kUndefinedMetric);
}

TEST_CASE("evaluate agrees with the pairwise oracle") {
  std::mt19937 gen(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    const EmbeddingIndex refs = random_index(gen, 0);
    // Half the trials query with a subset of the references, half with
    // separate recordings.
    const EmbeddingIndex queries = trial % 2 ? refs : random_index(gen, 1);
    bool any = false;
    for (const auto& q : queries.entries) {
      for (const auto& e : refs.entries) any |= e.recording_id != q.recording_id && e.class_id == q.class_id;
    }
    if (!any) {
      CHECK(error_kind([&] { evaluate(queries, refs); }) == ErrorKind::kUndefinedMetric);
      continue;
    }
    const MetricsReport a = evaluate(queries, refs);
    const MetricsReport b = oracle_metrics(queries, refs);
    REQUIRE(a.per_query.size() == b.per_query.size());
    CHECK(a.skipped == b.skipped);
    for (std::size_t i = 0; i < a.per_query.size(); ++i) {
      CHECK(a.per_query[i].average_precision == doctest::Approx(b.per_query[i].average_precision).epsilon(1e-12));
      CHECK(a.per_query[i].precision_at_10 == b.per_query[i].precision_at_10);
      CHECK(a.per_query[i].first_relevant_rank == b.per_query[i].first_relevant_rank);
      CHECK(a.per_query[i].top1_relevant == b.per_query[i].top1_relevant);
    }
    CHECK(a.map == doctest::Approx(b.map).epsilon(1e-12));
    CHECK(a.mr1 == doctest::Approx(b.mr1).epsilon(1e-12));
  }
}

TEST_CASE("metrics are invariant to positive rescaling") {
  std::mt19937 gen(99);
  EmbeddingIndex index;
  index.dim = 8;
  std::normal_distribution<float> normal;
  for (int i = 0; i < 20; ++i) {
    IndexEntry e{"r" + std::to_string(i), i % 5, {}};
    for (int d = 0; d < 8; ++d) e.vector.push_back(normal(gen));
    index.add(std::move(e));
  }
  EmbeddingIndex scaled = index;
  for (std::size_t i = 0; i < scaled.entries.size(); ++i) {
    for (float& v : scaled.entries[i].vector) v *= static_cast<float>(std::ldexp(1.0, static_cast<int>(i % 7) - 3));
  }
  const MetricsReport a = evaluate(index, index);
  const MetricsReport b = evaluate(scaled, scaled);
  CHECK(a.map == b.map);
  CHECK(a.p_at_10 == b.p_at_10);
  CHECK(a.mr1 == b.mr1);
}

TEST_CASE("random baseline matches the closed form") {
  // One relevant item among n: expected AP = H_n / n.
  EmbeddingIndex index;
  index.dim = 1;
  index.add({"q", 0, {1}});
  index.add({"hit", 0, {1}});
  for (int i = 0; i < 8; ++i) index.add({"n" + std::to_string(i), 1 + i, {1}});
  const EmbeddingIndex query = index.select({"q"});
  double harmonic = 0.0;
  for (int k = 1; k <= 9; ++k) harmonic += 1.0 / k;
  CHECK(random_baseline_map(query, index, 20000, 5) == doctest::Approx(harmonic / 9.0).epsilon(0.02));
  CHECK(random_baseline_map(query, index, 10, 5) == random_baseline_map(query, index, 10, 5));
  CHECK(error_kind([&] { random_baseline_map(query, index, 0, 5); }) == ErrorKind::kInvalidInput);
}

TEST_CASE("index add rejects bad entries") {
  EmbeddingIndex index;
  index.dim = 2;
  index.add({"a", 0, {1, 2}});
  CHECK(error_kind([&] { index.add({"b", 0, {1}}); }) == ErrorKind::kShape);
  CHECK(error_kind([&] { index.add({"a", 0, {1, 2}}); }) == ErrorKind::kInvariantViolation);
  CHECK(error_kind([&] { index.add({"c", 0, {1, NAN}}); }) == ErrorKind::kNumeric);
  CHECK(index.select({"a", "zzz"}).entries.size() == 1);
}

TEST_CASE("EMB1 files") {
  testing::TempDir dir("retrieval");
  const EmbeddingIndex index = index_of({{"s000_c00", 0, {0.5f, -1.25f, 3.0f}},
                                         {"s001_c00", 1, {1e-8f, 0.0f, -0.0f}}},
                                        3);
  save_index(dir.path() / "x.emb", index);
  CHECK(load_index(dir.path() / "x.emb") == index);

  std::ofstream(dir.path() / "bad.emb", std::ios::binary) << "EMB2";
  CHECK(error_kind([&] { load_index(dir.path() / "bad.emb"); }) == ErrorKind::kFormat);
  CHECK(error_kind([] { load_index("/nonexistent.emb"); }) == ErrorKind::kIo);
}

TEST_CASE("metrics JSON") {
  const EmbeddingIndex index = index_of({{"a", 0, {1, 0}}, {"b", 0, {0, 1}}, {"c", 1, {1, 1}}}, 2);
  const std::string text = metrics_to_json(evaluate(index, index));
  CHECK(text.find("\"map\"") != std::string::npos);
  CHECK(text.find("\"skipped\"") != std::string::npos);
  CHECK(text.find("\"c\"") != std::string::npos);
}

TEST_CASE("embedding pads short features and is deterministic") {
  CqtNet net(narrow_config(default_config(3), 16), 1);
  net.reset_batchnorm_stats();
  CqtMatrix short_m(84, 50);
  for (std::size_t i = 0; i < short_m.data.size(); ++i) short_m.data[i] = static_cast<float>(i % 17) / 17.0f;
  const auto e1 = embed_features(net, short_m, 200);
  CHECK(e1.size() == 300);
  CHECK(e1 == embed_features(net, cyclic_pad(short_m, 200), 200));
  std::vector<EmbedItem> items{{"a", 0, short_m}, {"b", 1, cyclic_pad(short_m, 230)}};
  const EmbeddingIndex idx = embed_all(net, items, 200);
  CHECK(idx.entries[0].vector == e1);
  CHECK(embed_all(net, items, 200) == idx);
}

TEST_CASE("build_index reports every missing file") {
  CqtNet net(narrow_config(default_config(3), 16), 1);
  net.reset_batchnorm_stats();
  testing::TempDir dir("retrieval_missing");
  const std::vector<ManifestEntry> entries{{"a", 0, "audio/a.wav", Split::kTest},
                                           {"b", 0, "audio/b.wav", Split::kTest}};
  try {
    build_index(net, entries, dir.path());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIo);
    CHECK(std::string(e.what()).find("a, b") != std::string::npos);
  }
}
