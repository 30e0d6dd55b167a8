#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cefgl/error.hpp"
#include "cefgl/linalg.hpp"
#include "cefgl/rng.hpp"

namespace cefgl {

struct Graph {
  std::size_t num_nodes = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;  // undirected, i <= j
  Matrix features;                                              // num_nodes x d
  std::size_t label = 0;

  bool operator==(const Graph&) const = default;
};

struct GraphDataset {
  std::string name;
  std::vector<Graph> graphs;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;

  std::size_t size() const { return graphs.size(); }
  bool empty() const { return graphs.empty(); }
};

inline GraphDataset subset(const GraphDataset& d, std::span<const std::size_t> idx) {
  GraphDataset out{d.name, {}, d.num_classes, d.feature_dim};
  out.graphs.reserve(idx.size());
  for (std::size_t i : idx) out.graphs.push_back(d.graphs.at(i));
  return out;
}

// Right-pads every feature matrix with zero columns up to `dim`.
inline void pad_features(GraphDataset& d, std::size_t dim) {
  if (dim < d.feature_dim) throw ShapeMismatch("pad_features: cannot shrink feature dimension");
  if (dim == d.feature_dim) return;
  for (auto& g : d.graphs) {
    Matrix f(g.num_nodes, dim);
    for (std::size_t i = 0; i < g.num_nodes; ++i)
      for (std::size_t j = 0; j < d.feature_dim; ++j) f(i, j) = g.features(i, j);
    g.features = std::move(f);
  }
  d.feature_dim = dim;
}

// ---------------------------------------------------------------------------
// TU text format loader

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct TextFile {
  std::filesystem::path path;
  std::vector<std::string> lines;  // blank lines kept so numbering matches the file
};

inline TextFile read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("cannot open " + path.string());
  TextFile f{path, {}};
  std::string line;
  while (std::getline(in, line)) f.lines.push_back(line);
  // Trailing blank lines carry no records.
  while (!f.lines.empty() && trim(f.lines.back()).empty()) f.lines.pop_back();
  return f;
}

inline ParseError parse_error(const TextFile& f, std::size_t line_no, const std::string& what) {
  return ParseError(f.path.filename().string() + ":" + std::to_string(line_no) + ": " + what);
}

inline long long parse_int(const TextFile& f, std::size_t line_no, std::string_view tok) {
  tok = trim(tok);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || tok.empty()) {
    throw parse_error(f, line_no, "expected integer, got '" + std::string(tok) + "'");
  }
  return v;
}

inline double parse_real(const TextFile& f, std::size_t line_no, std::string_view tok) {
  tok = trim(tok);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || tok.empty() || !std::isfinite(v)) {
    throw parse_error(f, line_no, "expected finite real, got '" + std::string(tok) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_commas(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(',', start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string find_prefix(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw MissingFile("not a directory: " + dir.string());
  std::vector<std::string> prefixes;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > 6 && name.ends_with("_A.txt")) prefixes.push_back(name.substr(0, name.size() - 6));
  }
  if (prefixes.empty()) throw MissingFile("no <DS>_A.txt in " + dir.string());
  if (prefixes.size() > 1) throw ParseError("several datasets in " + dir.string());
  return prefixes.front();
}

}  // namespace detail

// Reads <DS>_A.txt, <DS>_graph_indicator.txt, <DS>_graph_labels.txt and the
// optional <DS>_node_attributes.txt / <DS>_node_labels.txt from `dir`.
inline GraphDataset load_tu_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  using detail::parse_error;
  using detail::parse_int;
  const std::string ds = detail::find_prefix(dir);
  auto file = [&](const char* suffix) { return dir / (ds + suffix); };

  const auto indicator = detail::read_lines(file("_graph_indicator.txt"));
  const auto glabels = detail::read_lines(file("_graph_labels.txt"));
  const auto adjacency = detail::read_lines(file("_A.txt"));

  const std::size_t num_graphs = glabels.lines.size();
  const std::size_t total_nodes = indicator.lines.size();

  std::vector<long long> raw_labels(num_graphs);
  for (std::size_t i = 0; i < num_graphs; ++i) raw_labels[i] = parse_int(glabels, i + 1, glabels.lines[i]);

  // Global 1-based node id -> (graph, local index).
  std::vector<std::size_t> node_graph(total_nodes), node_local(total_nodes);
  std::vector<std::size_t> graph_size(num_graphs, 0);
  for (std::size_t k = 0; k < total_nodes; ++k) {
    const long long g = parse_int(indicator, k + 1, indicator.lines[k]);
    if (g < 1 || static_cast<std::size_t>(g) > num_graphs) {
      throw parse_error(indicator, k + 1,
                        "graph id " + std::to_string(g) + " has no entry among " +
                            std::to_string(num_graphs) + " graph labels");
    }
    node_graph[k] = static_cast<std::size_t>(g - 1);
    node_local[k] = graph_size[node_graph[k]]++;
  }
  for (std::size_t g = 0; g < num_graphs; ++g) {
    if (graph_size[g] == 0) {
      throw ParseError(glabels.path.filename().string() + ": graph " + std::to_string(g + 1) + " has no nodes");
    }
  }

  std::vector<std::set<std::pair<std::uint32_t, std::uint32_t>>> edge_sets(num_graphs);
  for (std::size_t ln = 0; ln < adjacency.lines.size(); ++ln) {
    const auto line = detail::trim(adjacency.lines[ln]);
    if (line.empty()) continue;
    const auto toks = detail::split_commas(line);
    if (toks.size() != 2) throw parse_error(adjacency, ln + 1, "expected 'i, j'");
    const long long a = parse_int(adjacency, ln + 1, toks[0]);
    const long long b = parse_int(adjacency, ln + 1, toks[1]);
    for (long long v : {a, b}) {
      if (v < 1 || static_cast<std::size_t>(v) > total_nodes) {
        throw IndexOutOfRange(adjacency.path.filename().string() + ":" + std::to_string(ln + 1) +
                              ": node " + std::to_string(v) + " outside [1, " +
                              std::to_string(total_nodes) + "]");
      }
    }
    const std::size_t ga = node_graph[a - 1], gb = node_graph[b - 1];
    if (ga != gb) throw parse_error(adjacency, ln + 1, "edge joins two different graphs");
    auto la = static_cast<std::uint32_t>(node_local[a - 1]);
    auto lb = static_cast<std::uint32_t>(node_local[b - 1]);
    if (la > lb) std::swap(la, lb);
    edge_sets[ga].insert({la, lb});
  }

  // Node features: attributes if present, else one-hot node labels, else a
  // constant channel.
  std::vector<std::vector<double>> node_feats(total_nodes);
  std::size_t feature_dim = 1;
  if (fs::exists(file("_node_attributes.txt"))) {
    const auto attrs = detail::read_lines(file("_node_attributes.txt"));
    if (attrs.lines.size() != total_nodes) {
      throw ParseError(attrs.path.filename().string() + ": expected " + std::to_string(total_nodes) + " rows");
    }
    for (std::size_t k = 0; k < total_nodes; ++k) {
      for (auto tok : detail::split_commas(attrs.lines[k])) {
        node_feats[k].push_back(detail::parse_real(attrs, k + 1, tok));
      }
      if (k > 0 && node_feats[k].size() != node_feats[0].size()) {
        throw parse_error(attrs, k + 1, "inconsistent attribute count");
      }
    }
    feature_dim = node_feats.empty() ? 1 : node_feats[0].size();
  } else if (fs::exists(file("_node_labels.txt"))) {
    const auto nl = detail::read_lines(file("_node_labels.txt"));
    if (nl.lines.size() != total_nodes) {
      throw ParseError(nl.path.filename().string() + ": expected " + std::to_string(total_nodes) + " rows");
    }
    std::vector<long long> labels(total_nodes);
    long long max_label = 0;
    for (std::size_t k = 0; k < total_nodes; ++k) {
      labels[k] = parse_int(nl, k + 1, nl.lines[k]);
      if (labels[k] < 0) throw parse_error(nl, k + 1, "negative node label");
      max_label = std::max(max_label, labels[k]);
    }
    feature_dim = static_cast<std::size_t>(max_label) + 1;
    for (std::size_t k = 0; k < total_nodes; ++k) {
      node_feats[k].assign(feature_dim, 0.0);
      node_feats[k][static_cast<std::size_t>(labels[k])] = 1.0;
    }
  } else {
    for (auto& f : node_feats) f.assign(1, 1.0);
  }

  // Dense 0-based graph labels in sorted order of the raw values.
  std::map<long long, std::size_t> label_map;
  for (long long l : raw_labels) label_map.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [raw, dense] : label_map) dense = next++;

  GraphDataset out{ds, {}, label_map.size(), feature_dim};
  out.graphs.resize(num_graphs);
  for (std::size_t g = 0; g < num_graphs; ++g) {
    out.graphs[g].num_nodes = graph_size[g];
    out.graphs[g].features = Matrix(graph_size[g], feature_dim);
    out.graphs[g].label = label_map.at(raw_labels[g]);
    out.graphs[g].edges.assign(edge_sets[g].begin(), edge_sets[g].end());
  }
  for (std::size_t k = 0; k < total_nodes; ++k) {
    auto& g = out.graphs[node_graph[k]];
    for (std::size_t j = 0; j < feature_dim; ++j) g.features(node_local[k], j) = node_feats[k][j];
  }
  return out;
}

// Writes the two-graph fixture (a triangle labelled 1 and a single edge
// labelled 2) in TU layout under `dir` with prefix FIXTURE.
inline void write_tu_fixture(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto put = [&](const char* suffix, std::string_view body) {
    std::ofstream out(dir / (std::string("FIXTURE") + suffix));
    if (!out) throw MissingFile("cannot write into " + dir.string());
    out << body;
  };
  put("_A.txt", "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n");
  put("_graph_indicator.txt", "1\n1\n1\n2\n2\n");
  put("_graph_labels.txt", "1\n2\n");
  put("_node_labels.txt", "0\n1\n0\n2\n2\n");
}

// ---------------------------------------------------------------------------
// Synthetic motif datasets

enum class Motif : std::size_t { Triangle = 0, Star = 1, Cycle = 2, Clique = 3 };
inline constexpr std::size_t kMotifCount = 4;

// Relative frequency of each motif among a graph's motif insertions.
using MotifMix = std::array<double, kMotifCount>;

struct SynthSpec {
  std::size_t n_graphs = 200;
  std::vector<MotifMix> classes;
  std::size_t min_nodes = 10;
  std::size_t max_nodes = 20;
  std::size_t feature_dim = 4;
  double noise = 0.1;  // chance a motif is drawn uniformly instead of from the class mix; also feature noise std

  // Class c is dominated by motif c mod 4; classes beyond four add a
  // secondary motif so every mix stays distinct.
  static std::vector<MotifMix> default_mixes(std::size_t num_classes) {
    std::vector<MotifMix> mixes(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
      MotifMix m{};
      m[c % kMotifCount] = 1.0;
      m[(c + 1 + c / kMotifCount) % kMotifCount] += 0.25 * static_cast<double>(c / kMotifCount);
      mixes[c] = m;
    }
    return mixes;
  }
};

namespace detail {

inline void validate(const SynthSpec& s) {
  if (s.classes.empty()) throw BadSpec("synth: at least one class required");
  if (s.n_graphs < s.classes.size()) throw BadSpec("synth: n_graphs must be >= number of classes");
  if (s.min_nodes < 4 || s.min_nodes > s.max_nodes) throw BadSpec("synth: need 4 <= min_nodes <= max_nodes");
  if (s.feature_dim < 1) throw BadSpec("synth: feature_dim must be >= 1");
  if (!(s.noise >= 0.0 && s.noise <= 1.0)) throw BadSpec("synth: noise must be in [0, 1]");
  for (const auto& m : s.classes) {
    double total = 0.0;
    for (double w : m) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw BadSpec("synth: motif weights must be finite and >= 0");
      total += w;
    }
    if (total <= 0.0) throw BadSpec("synth: motif mix has zero total weight");
  }
  for (std::size_t a = 0; a < s.classes.size(); ++a)
    for (std::size_t b = a + 1; b < s.classes.size(); ++b)
      if (s.classes[a] == s.classes[b]) throw BadSpec("synth: class motif mixes must be distinct");
}

inline Motif draw_motif(const MotifMix& mix, double noise, Rng& rng) {
  if (uniform01(rng) < noise) return static_cast<Motif>(uniform_index(rng, kMotifCount));
  double total = 0.0;
  for (double w : mix) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t m = 0; m < kMotifCount; ++m) {
    if (u < mix[m]) return static_cast<Motif>(m);
    u -= mix[m];
  }
  for (std::size_t m = kMotifCount; m-- > 0;)
    if (mix[m] > 0.0) return static_cast<Motif>(m);
  return Motif::Triangle;
}

inline Graph make_motif_graph(const SynthSpec& spec, std::size_t label, Rng& rng) {
  const std::size_t n = spec.min_nodes + uniform_index(rng, spec.max_nodes - spec.min_nodes + 1);
  std::set<std::pair<std::uint32_t, std::uint32_t>> edges;
  auto link = [&](std::size_t a, std::size_t b) {
    if (a == b) return;
    if (a > b) std::swap(a, b);
    edges.insert({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)});
  };
  auto adjacent = [&](std::size_t a, std::size_t b) {
    if (a > b) std::swap(a, b);
    return edges.count({static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)}) > 0;
  };
  auto distinct_nodes = [&](std::size_t count) {
    std::vector<std::size_t> members;
    while (members.size() < count) {
      const std::size_t v = uniform_index(rng, n);
      if (std::find(members.begin(), members.end(), v) == members.end()) members.push_back(v);
    }
    return members;
  };
  // Path backbone keeps the graph connected.
  for (std::size_t v = 0; v + 1 < n; ++v) link(v, v + 1);

  const std::size_t insertions = std::max<std::size_t>(1, n / 4);
  for (std::size_t k = 0; k < insertions; ++k) {
    switch (draw_motif(spec.classes[label], spec.noise, rng)) {
      case Motif::Triangle: {
        // A chord over two backbone edges.
        const std::size_t v = uniform_index(rng, n - 2);
        link(v, v + 2);
        break;
      }
      case Motif::Star: {
        // Spokes never close a triangle: a leaf must share no neighbour with
        // the hub.
        const std::size_t hub = uniform_index(rng, n);
        std::size_t spokes = 0;
        for (int tries = 0; tries < 64 && spokes < 4; ++tries) {
          const std::size_t v = uniform_index(rng, n);
          if (v == hub || adjacent(hub, v)) continue;
          bool shared = false;
          for (std::size_t u = 0; u < n && !shared; ++u) shared = adjacent(u, hub) && adjacent(u, v);
          if (shared) continue;
          link(hub, v);
          ++spokes;
        }
        break;
      }
      case Motif::Cycle: {
        const std::size_t len = 3 + uniform_index(rng, 3);
        if (n > len) {
          const std::size_t v = uniform_index(rng, n - len);
          link(v, v + len);
        }
        break;
      }
      case Motif::Clique: {
        const auto members = distinct_nodes(4);
        for (std::size_t a = 0; a < 4; ++a)
          for (std::size_t b = a + 1; b < 4; ++b) link(members[a], members[b]);
        break;
      }
    }
  }

  Graph g;
  g.num_nodes = n;
  g.edges.assign(edges.begin(), edges.end());
  g.label = label;
  g.features = Matrix(n, spec.feature_dim);
  for (std::size_t i = 0; i < n; ++i) {
    g.features(i, 0) = 1.0;
    for (std::size_t j = 1; j < spec.feature_dim; ++j) g.features(i, j) = normal(rng, 0.0, spec.noise);
  }
  return g;
}

}  // namespace detail

inline GraphDataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  detail::validate(spec);
  Rng rng = make_stream(seed, 0x517e);
  const std::size_t classes = spec.classes.size();
  std::vector<std::size_t> labels(spec.n_graphs);
  for (std::size_t i = 0; i < spec.n_graphs; ++i) labels[i] = i % classes;
  shuffle_in_place(labels, rng);

  GraphDataset out{"synthetic", {}, classes, spec.feature_dim};
  out.graphs.reserve(spec.n_graphs);
  for (std::size_t label : labels) out.graphs.push_back(detail::make_motif_graph(spec, label, rng));
  return out;
}

// ---------------------------------------------------------------------------
// Splitting and partitioning

struct DataSplit {
  GraphDataset train, val, test;
};

// Validation and test sizes are floor(n * ratio); train takes the remainder.
inline DataSplit split_dataset(const GraphDataset& d, const std::array<double, 3>& ratios, std::uint64_t seed) {
  for (double r : ratios) {
    if (!(r >= 0.0) || r > 1.0) throw BadRatios("split ratios must lie in [0, 1]");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw BadRatios("split ratios must sum to 1");
  const std::size_t n = d.size();
  auto part = [&](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_val = part(ratios[1]);
  const std::size_t n_test = part(ratios[2]);
  auto idx = iota_indices(n);
  Rng rng = make_stream(seed, 0x5911);
  shuffle_in_place(idx, rng);
  std::span<const std::size_t> all(idx);
  auto sorted = [](std::span<const std::size_t> s) {
    std::vector<std::size_t> v(s.begin(), s.end());
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto val_idx = sorted(all.subspan(0, n_val));
  const auto test_idx = sorted(all.subspan(n_val, n_test));
  const auto train_idx = sorted(all.subspan(n_val + n_test));
  return {subset(d, train_idx), subset(d, val_idx), subset(d, test_idx)};
}

enum class PartitionMode { IID, LabelSkew, CrossDataset };

struct ClientPartition {
  PartitionMode mode = PartitionMode::IID;
  // CrossDataset: client i owns every graph of pool[i] (indices into that
  // dataset). Otherwise indices point into pool[0].
  std::vector<std::vector<std::size_t>> assignments;

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 1099511628211ull;
      }
    };
    mix(static_cast<std::uint64_t>(mode));
    for (const auto& a : assignments) {
      mix(a.size());
      for (std::size_t i : a) mix(i);
    }
    return h;
  }
};

inline ClientPartition partition_clients(std::span<const GraphDataset> pool, std::size_t k, PartitionMode mode,
                                         double skew, std::uint64_t seed) {
  if (k == 0) throw BadMode("partition: need at least one client");
  ClientPartition out{mode, std::vector<std::vector<std::size_t>>(k)};
  if (mode == PartitionMode::CrossDataset) {
    if (pool.size() != k) {
      throw BadMode("partition: cross-dataset mode needs one dataset per client (" + std::to_string(pool.size()) +
                    " datasets, " + std::to_string(k) + " clients)");
    }
    for (std::size_t c = 0; c < k; ++c) out.assignments[c] = iota_indices(pool[c].size());
    return out;
  }
  if (pool.size() != 1) throw BadMode("partition: IID and label-skew modes take exactly one dataset");
  const GraphDataset& d = pool.front();
  Rng rng = make_stream(seed, 0x9a27);

  if (mode == PartitionMode::IID) {
    auto idx = iota_indices(d.size());
    shuffle_in_place(idx, rng);
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t lo = c * d.size() / k, hi = (c + 1) * d.size() / k;
      out.assignments[c].assign(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                idx.begin() + static_cast<std::ptrdiff_t>(hi));
      std::sort(out.assignments[c].begin(), out.assignments[c].end());
    }
    return out;
  }

  if (!(skew > 0.0) || !std::isfinite(skew)) throw BadMode("partition: label-skew concentration must be > 0");
  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class.at(d.graphs[i].label).push_back(i);

  // Each class is spread over clients by its own Dirichlet draw; redraw while
  // some client ends up empty.
  constexpr int kMaxAttempts = 100;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    for (auto& a : out.assignments) a.clear();
    for (auto cls : by_class) {
      shuffle_in_place(cls, rng);
      const auto props = dirichlet_draw(rng, k, skew);
      double cum = 0.0;
      std::size_t start = 0;
      for (std::size_t c = 0; c < k; ++c) {
        cum += props[c];
        const std::size_t end =
            c + 1 == k ? cls.size()
                       : std::min(cls.size(), static_cast<std::size_t>(std::floor(cum * static_cast<double>(cls.size()))));
        for (std::size_t i = start; i < std::max(start, end); ++i) out.assignments[c].push_back(cls[i]);
        start = std::max(start, end);
      }
    }
    const bool all_nonempty = std::all_of(out.assignments.begin(), out.assignments.end(),
                                          [](const auto& a) { return !a.empty(); });
    if (all_nonempty || d.size() < k) break;
  }
  for (auto& a : out.assignments) std::sort(a.begin(), a.end());
  return out;
}

}  // namespace cefgl
