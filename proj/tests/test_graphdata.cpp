#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "test_util.hpp"

using namespace cefgl;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test.
fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cefgl_graphdata_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put(const fs::path& dir, const std::string& file, const std::string& body) {
  std::ofstream(dir / file) << body;
}

std::size_t triangles(const Graph& g) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> e(g.edges.begin(), g.edges.end());
  auto adj = [&](std::uint32_t a, std::uint32_t b) { return e.count({std::min(a, b), std::max(a, b)}) > 0; };
  std::size_t t = 0;
  const auto n = static_cast<std::uint32_t>(g.num_nodes);
  for (std::uint32_t a = 0; a < n; ++a)
    for (std::uint32_t b = a + 1; b < n; ++b)
      if (adj(a, b))
        for (std::uint32_t c = b + 1; c < n; ++c)
          if (adj(a, c) && adj(b, c)) ++t;
  return t;
}

SynthSpec small_spec(std::size_t n, std::size_t classes) {
  SynthSpec s;
  s.n_graphs = n;
  s.classes = SynthSpec::default_mixes(classes);
  return s;
}

void expect_exact_cover(const ClientPartition& p, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& a : p.assignments)
    for (std::size_t i : a) {
      ASSERT_LT(i, n);
      ++seen[i];
    }
  for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(seen[i], 1) << "index " << i;
}

}  // namespace

TEST(TuLoader, Fixture) {
  const auto dir = scratch("fixture");
  write_tu_fixture(dir);
  const auto d = load_tu_dataset(dir);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.num_classes, 2u);
  EXPECT_EQ(d.graphs[0].edges.size(), 3u);
  EXPECT_EQ(d.graphs[1].edges.size(), 1u);
  EXPECT_EQ(d.graphs[0].num_nodes, 3u);
  EXPECT_EQ(d.graphs[1].num_nodes, 2u);
  EXPECT_EQ(d.graphs[0].label, 0u);
  EXPECT_EQ(d.graphs[1].label, 1u);
  // One-hot node labels 0..2.
  EXPECT_EQ(d.feature_dim, 3u);
  EXPECT_EQ(d.graphs[0].features, (Matrix{{1, 0, 0}, {0, 1, 0}, {1, 0, 0}}));
  EXPECT_EQ(d.graphs[1].features, (Matrix{{0, 0, 1}, {0, 0, 1}}));
  EXPECT_EQ(d.graphs[1].edges[0], (std::pair<std::uint32_t, std::uint32_t>{0, 1}));
}

TEST(TuLoader, CountsMatchFiles) {
  const auto dir = scratch("counts");
  write_tu_fixture(dir);
  const auto d = load_tu_dataset(dir);
  std::size_t nodes = 0, edges = 0;
  for (const auto& g : d.graphs) {
    nodes += g.num_nodes;
    edges += g.edges.size();
  }
  auto line_count = [&](const char* f) {
    std::ifstream in(dir / f);
    std::size_t n = 0;
    for (std::string l; std::getline(in, l);) ++n;
    return n;
  };
  EXPECT_EQ(nodes, line_count("FIXTURE_graph_indicator.txt"));
  EXPECT_EQ(edges, line_count("FIXTURE_A.txt") / 2);
}

TEST(TuLoader, EmptyAdjacency) {
  const auto dir = scratch("empty_a");
  put(dir, "X_A.txt", "");
  put(dir, "X_graph_indicator.txt", "1\n");
  put(dir, "X_graph_labels.txt", "7\n");
  const auto d = load_tu_dataset(dir);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.graphs[0].edges.size(), 0u);
  EXPECT_EQ(d.graphs[0].num_nodes, 1u);
  EXPECT_EQ(d.feature_dim, 1u);
  EXPECT_EQ(d.graphs[0].features, Matrix{{1.0}});
}

TEST(TuLoader, AttributesTakePrecedence) {
  const auto dir = scratch("attrs");
  put(dir, "X_A.txt", "1, 2\n2, 1\n");
  put(dir, "X_graph_indicator.txt", "1\n1\n");
  put(dir, "X_graph_labels.txt", "-1\n");
  put(dir, "X_node_labels.txt", "0\n5\n");
  put(dir, "X_node_attributes.txt", "0.5, 1.5\n-2, 3e-1\n");
  const auto d = load_tu_dataset(dir);
  EXPECT_EQ(d.feature_dim, 2u);
  EXPECT_EQ(d.graphs[0].features, (Matrix{{0.5, 1.5}, {-2, 0.3}}));
}

TEST(TuLoader, IndicatorBeyondLabelsIsParseError) {
  const auto dir = scratch("bad_indicator");
  put(dir, "X_A.txt", "1, 2\n");
  put(dir, "X_graph_indicator.txt", "1\n1\n3\n");
  put(dir, "X_graph_labels.txt", "1\n2\n");
  try {
    load_tu_dataset(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(TuLoader, Errors) {
  EXPECT_THROW(load_tu_dataset(scratch("nothing")), MissingFile);
  EXPECT_THROW(load_tu_dataset(fs::temp_directory_path() / "cefgl_no_such_dir"), MissingFile);

  auto dir = scratch("dangling");
  put(dir, "X_A.txt", "1, 9\n");
  put(dir, "X_graph_indicator.txt", "1\n1\n");
  put(dir, "X_graph_labels.txt", "1\n");
  EXPECT_THROW(load_tu_dataset(dir), IndexOutOfRange);

  dir = scratch("no_labels_file");
  put(dir, "X_A.txt", "1, 2\n");
  put(dir, "X_graph_indicator.txt", "1\n1\n");
  EXPECT_THROW(load_tu_dataset(dir), MissingFile);

  dir = scratch("garbage");
  put(dir, "X_A.txt", "1, two\n");
  put(dir, "X_graph_indicator.txt", "1\n1\n");
  put(dir, "X_graph_labels.txt", "1\n");
  EXPECT_THROW(load_tu_dataset(dir), ParseError);

  dir = scratch("empty_graph");
  put(dir, "X_A.txt", "");
  put(dir, "X_graph_indicator.txt", "1\n");
  put(dir, "X_graph_labels.txt", "1\n2\n");
  EXPECT_THROW(load_tu_dataset(dir), ParseError);

  dir = scratch("cross_edge");
  put(dir, "X_A.txt", "1, 2\n");
  put(dir, "X_graph_indicator.txt", "1\n2\n");
  put(dir, "X_graph_labels.txt", "1\n2\n");
  EXPECT_THROW(load_tu_dataset(dir), ParseError);
}

TEST(Synth, Deterministic) {
  const auto spec = small_spec(40, 3);
  const auto a = synth_generate(spec, 5), b = synth_generate(spec, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.graphs[i], b.graphs[i]);
  const auto c = synth_generate(spec, 6);
  bool differ = false;
  for (std::size_t i = 0; i < a.size(); ++i) differ |= !(a.graphs[i] == c.graphs[i]);
  EXPECT_TRUE(differ);
}

TEST(Synth, BalancedLabels) {
  const auto d = synth_generate(small_spec(100, 2), 1);
  std::map<std::size_t, int> count;
  for (const auto& g : d.graphs) ++count[g.label];
  EXPECT_EQ(count[0], 50);
  EXPECT_EQ(count[1], 50);
  const auto e = synth_generate(small_spec(101, 3), 1);
  std::map<std::size_t, int> c3;
  for (const auto& g : e.graphs) ++c3[g.label];
  for (auto [label, n] : c3) EXPECT_TRUE(n == 33 || n == 34) << label;
}

TEST(Synth, GraphInvariants) {
  const auto spec = small_spec(60, 4);
  const auto d = synth_generate(spec, 2);
  EXPECT_EQ(d.num_classes, 4u);
  for (const auto& g : d.graphs) {
    ASSERT_GE(g.num_nodes, spec.min_nodes);
    ASSERT_LE(g.num_nodes, spec.max_nodes);
    ASSERT_EQ(g.features.rows(), g.num_nodes);
    ASSERT_EQ(g.features.cols(), spec.feature_dim);
    ASSERT_LT(g.label, d.num_classes);
    std::set<std::pair<std::uint32_t, std::uint32_t>> uniq(g.edges.begin(), g.edges.end());
    ASSERT_EQ(uniq.size(), g.edges.size());
    for (auto [a, b] : g.edges) {
      ASSERT_LT(a, b);
      ASSERT_LT(b, g.num_nodes);
    }
  }
}

TEST(Synth, TriangleClassHasMoreTrianglesThanStarClass) {
  const auto d = synth_generate(small_spec(200, 2), 3);  // class 0 triangle, class 1 star
  double per_node[2] = {0, 0};
  int n[2] = {0, 0};
  for (const auto& g : d.graphs) {
    per_node[g.label] += static_cast<double>(triangles(g)) / static_cast<double>(g.num_nodes);
    ++n[g.label];
  }
  EXPECT_GT(per_node[0] / n[0], per_node[1] / n[1]);
}

TEST(Synth, BadSpec) {
  SynthSpec s;
  EXPECT_THROW(synth_generate(s, 1), BadSpec);
  s = small_spec(1, 2);
  EXPECT_THROW(synth_generate(s, 1), BadSpec);
  s = small_spec(10, 2);
  s.classes[1] = s.classes[0];
  EXPECT_THROW(synth_generate(s, 1), BadSpec);
  s = small_spec(10, 2);
  s.min_nodes = 30;
  EXPECT_THROW(synth_generate(s, 1), BadSpec);
}

TEST(Split, Sizes) {
  const auto d = synth_generate(small_spec(10, 2), 1);
  auto s = split_dataset(d, {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
  s = split_dataset(d, {1, 0, 0}, 1);
  EXPECT_EQ(s.train.size(), 10u);
  const auto seven = synth_generate(small_spec(7, 2), 1);
  s = split_dataset(seven, {0.8, 0.1, 0.1}, 1);
  EXPECT_EQ(s.train.size(), 7u);
  EXPECT_EQ(s.val.size(), 0u);
  EXPECT_EQ(s.test.size(), 0u);
}

TEST(Split, DisjointAndDeterministic) {
  auto d = synth_generate(small_spec(50, 2), 1);
  // Tag each graph so membership is traceable.
  for (std::size_t i = 0; i < d.size(); ++i) d.graphs[i].features(0, 0) = static_cast<double>(i);
  const auto a = split_dataset(d, {0.6, 0.2, 0.2}, 9), b = split_dataset(d, {0.6, 0.2, 0.2}, 9);
  std::multiset<double> tags;
  for (const auto* part : {&a.train, &a.val, &a.test})
    for (const auto& g : part->graphs) tags.insert(g.features(0, 0));
  EXPECT_EQ(tags.size(), 50u);
  EXPECT_EQ(std::set<double>(tags.begin(), tags.end()).size(), 50u);
  for (std::size_t i = 0; i < a.test.size(); ++i) EXPECT_EQ(a.test.graphs[i], b.test.graphs[i]);
}

TEST(Split, BadRatios) {
  const auto d = synth_generate(small_spec(10, 2), 1);
  EXPECT_THROW(split_dataset(d, {0.8, 0.1, 0.2}, 1), BadRatios);
  EXPECT_THROW(split_dataset(d, {1.2, -0.1, -0.1}, 1), BadRatios);
}

TEST(Partition, CrossDatasetIsIdentity) {
  std::vector<GraphDataset> pool;
  for (std::size_t i = 0; i < 7; ++i) pool.push_back(synth_generate(small_spec(4 + i, 2), i));
  const auto p = partition_clients(pool, 7, PartitionMode::CrossDataset, 0.0, 1);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(p.assignments[i], iota_indices(pool[i].size()));
  EXPECT_THROW(partition_clients(pool, 6, PartitionMode::CrossDataset, 0.0, 1), BadMode);
}

TEST(Partition, SingleClientOwnsAll) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(20, 2), 1)};
  const auto p = partition_clients(pool, 1, PartitionMode::IID, 0.0, 1);
  EXPECT_EQ(p.assignments[0], iota_indices(20));
}

TEST(Partition, ExactCoverOverSeeds) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(97, 3), 1)};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    expect_exact_cover(partition_clients(pool, 5, PartitionMode::IID, 0.0, seed), 97);
    expect_exact_cover(partition_clients(pool, 5, PartitionMode::LabelSkew, 0.3, seed), 97);
  }
}

TEST(Partition, IidSizesDifferByAtMostOne) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(103, 2), 1)};
  const auto p = partition_clients(pool, 10, PartitionMode::IID, 0.0, 4);
  for (const auto& a : p.assignments) EXPECT_TRUE(a.size() == 10 || a.size() == 11);
}

TEST(Partition, LargeConcentrationApproachesUniform) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(4000, 4), 1)};
  constexpr std::size_t k = 4;
  const auto p = partition_clients(pool, k, PartitionMode::LabelSkew, 1e6, 7);
  std::vector<std::array<double, 4>> counts(k);
  std::array<double, 4> totals{};
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i : p.assignments[c]) {
      counts[c][pool[0].graphs[i].label] += 1;
      totals[pool[0].graphs[i].label] += 1;
    }
  double chi2 = 0.0;
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t l = 0; l < 4; ++l) {
      const double expect = totals[l] / k;
      chi2 += (counts[c][l] - expect) * (counts[c][l] - expect) / expect;
    }
  // 99.9% quantile of chi-square with (4-1)*(4-1) = 9 degrees of freedom.
  EXPECT_LT(chi2, 27.88);
}

TEST(Partition, SmallConcentrationSkews) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(400, 2), 1)};
  const auto p = partition_clients(pool, 4, PartitionMode::LabelSkew, 0.1, 3);
  double max_share = 0.0;
  for (const auto& a : p.assignments) {
    double ones = 0;
    for (std::size_t i : a) ones += static_cast<double>(pool[0].graphs[i].label);
    const double share = ones / static_cast<double>(a.size());
    max_share = std::max(max_share, std::max(share, 1.0 - share));
  }
  EXPECT_GT(max_share, 0.8);
}

TEST(Partition, Errors) {
  const std::vector<GraphDataset> one{synth_generate(small_spec(10, 2), 1)};
  EXPECT_THROW(partition_clients(one, 0, PartitionMode::IID, 0.0, 1), BadMode);
  EXPECT_THROW(partition_clients(one, 2, PartitionMode::LabelSkew, 0.0, 1), BadMode);
  const std::vector<GraphDataset> two{one[0], one[0]};
  EXPECT_THROW(partition_clients(two, 2, PartitionMode::IID, 0.0, 1), BadMode);
}

TEST(Partition, HashTracksAssignment) {
  const std::vector<GraphDataset> pool{synth_generate(small_spec(30, 2), 1)};
  const auto a = partition_clients(pool, 3, PartitionMode::IID, 0.0, 1);
  EXPECT_EQ(a.hash(), partition_clients(pool, 3, PartitionMode::IID, 0.0, 1).hash());
  EXPECT_NE(a.hash(), partition_clients(pool, 3, PartitionMode::IID, 0.0, 2).hash());
}

TEST(PadFeatures, AppendsZeroColumns) {
  GraphDataset d{"x", {testutil::make_graph(2, {{0, 1}}, 2, 0)}, 1, 2};
  pad_features(d, 4);
  EXPECT_EQ(d.feature_dim, 4u);
  EXPECT_EQ(d.graphs[0].features, (Matrix{{1, 1, 0, 0}, {1, 1, 0, 0}}));
  EXPECT_THROW(pad_features(d, 3), ShapeMismatch);
}
