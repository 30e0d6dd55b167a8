#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cefgl/compress.hpp"
#include "cefgl/error.hpp"
#include "cefgl/fedcore.hpp"
#include "cefgl/gnn.hpp"
#include "cefgl/graphdata.hpp"
#include "cefgl/rng.hpp"

namespace cefgl {

// ---------------------------------------------------------------------------
// Configuration

enum class Algorithm { Cefgl, FedAvg, FedProx };
enum class DataSource { Synthetic, Tu };

struct SeedBlock {
  std::uint64_t data = 1;
  std::uint64_t init = 2;
  std::uint64_t coin = 3;
  std::uint64_t sampling = 4;
  std::uint64_t dropout = 5;

  bool operator==(const SeedBlock&) const = default;
};

struct ExperimentConfig {
  DataSource source = DataSource::Synthetic;
  std::vector<std::filesystem::path> tu_paths;
  SynthSpec synth{200, SynthSpec::default_mixes(2), 10, 20, 4, 0.1};
  std::array<double, 3> split{0.8, 0.1, 0.1};

  PartitionMode partition = PartitionMode::IID;
  std::size_t clients = 10;
  double skew = 0.5;

  Algorithm algorithm = Algorithm::Cefgl;
  double mu_prox = 0.01;
  std::size_t hidden = 16;

  ClientConfig client;
  ServerConfig server;
  std::size_t rounds = 200;
  std::size_t repeats = 1;  // seeds per run or sweep point
  SeedBlock seeds;
  std::filesystem::path output_dir = "out";
};

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

inline ConfigError config_error(const std::string& key, const std::string& why) {
  return ConfigError(key + ": " + why);
}

inline double cfg_real(const std::string& key, std::string_view v) {
  double x = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(x))
    throw config_error(key, "expected a finite number, got '" + std::string(v) + "'");
  return x;
}

inline std::uint64_t cfg_uint(const std::string& key, std::string_view v) {
  std::uint64_t x = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size())
    throw config_error(key, "expected a non-negative integer, got '" + std::string(v) + "'");
  return x;
}

inline bool cfg_bool(const std::string& key, std::string_view v) {
  const auto s = lower(v);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw config_error(key, "expected true or false, got '" + std::string(v) + "'");
}

template <class E>
E cfg_enum(const std::string& key, std::string_view v, std::initializer_list<std::pair<const char*, E>> options) {
  const auto s = lower(v);
  std::string names;
  for (const auto& [name, value] : options) {
    if (s == name) return value;
    names += names.empty() ? name : std::string(", ") + name;
  }
  throw config_error(key, "expected one of {" + names + "}, got '" + std::string(v) + "'");
}

inline std::vector<std::string> cfg_list(std::string_view v) {
  std::vector<std::string> out;
  for (auto tok : split_commas(v)) {
    tok = detail::trim(tok);
    if (!tok.empty()) out.emplace_back(tok);
  }
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, std::string_view value)>;

inline const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    auto real = [&](const char* name, auto field) {
      k[name] = [field](ExperimentConfig& c, const std::string& key, std::string_view v) {
        field(c) = cfg_real(key, v);
      };
    };
    auto count = [&](const char* name, auto field) {
      k[name] = [field](ExperimentConfig& c, const std::string& key, std::string_view v) {
        field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(cfg_uint(key, v));
      };
    };
    auto flag = [&](const char* name, auto field) {
      k[name] = [field](ExperimentConfig& c, const std::string& key, std::string_view v) {
        field(c) = cfg_bool(key, v);
      };
    };
    using C = ExperimentConfig;

    k["data.source"] = [](C& c, const std::string& key, std::string_view v) {
      c.source = cfg_enum<DataSource>(key, v, {{"synthetic", DataSource::Synthetic}, {"tu", DataSource::Tu}});
    };
    k["data.tu_paths"] = [](C& c, const std::string&, std::string_view v) {
      c.tu_paths.clear();
      for (auto& p : cfg_list(v)) c.tu_paths.emplace_back(p);
    };
    k["data.split"] = [](C& c, const std::string& key, std::string_view v) {
      const auto parts = cfg_list(v);
      if (parts.size() != 3) throw config_error(key, "expected three ratios train,val,test");
      for (std::size_t i = 0; i < 3; ++i) c.split[i] = cfg_real(key, parts[i]);
    };
    count("synth.n_graphs", [](C& c) -> std::size_t& { return c.synth.n_graphs; });
    k["synth.classes"] = [](C& c, const std::string& key, std::string_view v) {
      const auto n = cfg_uint(key, v);
      if (n < 1 || n > 64) throw config_error(key, "expected 1..64 classes");
      c.synth.classes = SynthSpec::default_mixes(static_cast<std::size_t>(n));
    };
    count("synth.min_nodes", [](C& c) -> std::size_t& { return c.synth.min_nodes; });
    count("synth.max_nodes", [](C& c) -> std::size_t& { return c.synth.max_nodes; });
    count("synth.feature_dim", [](C& c) -> std::size_t& { return c.synth.feature_dim; });
    real("synth.noise", [](C& c) -> double& { return c.synth.noise; });

    k["partition.mode"] = [](C& c, const std::string& key, std::string_view v) {
      c.partition = cfg_enum<PartitionMode>(key, v,
                                            {{"iid", PartitionMode::IID},
                                             {"label_skew", PartitionMode::LabelSkew},
                                             {"cross_dataset", PartitionMode::CrossDataset}});
    };
    count("partition.clients", [](C& c) -> std::size_t& { return c.clients; });
    real("partition.skew", [](C& c) -> double& { return c.skew; });

    k["algorithm"] = [](C& c, const std::string& key, std::string_view v) {
      c.algorithm = cfg_enum<Algorithm>(
          key, v, {{"cefgl", Algorithm::Cefgl}, {"fedavg", Algorithm::FedAvg}, {"fedprox", Algorithm::FedProx}});
    };
    real("fedprox.mu", [](C& c) -> double& { return c.mu_prox; });
    count("model.hidden", [](C& c) -> std::size_t& { return c.hidden; });

    real("client.eta", [](C& c) -> double& { return c.client.eta; });
    real("client.alpha", [](C& c) -> double& { return c.client.alpha; });
    real("client.nu", [](C& c) -> double& { return c.client.nu; });
    k["client.sparsifier"] = [](C& c, const std::string& key, std::string_view v) {
      c.client.sparsifier.kind =
          cfg_enum<SparsifierKind>(key, v, {{"threshold", SparsifierKind::Threshold}, {"topk", SparsifierKind::TopK}});
    };
    real("client.cut_sparse", [](C& c) -> double& { return c.client.sparsifier.cut; });
    real("client.beta", [](C& c) -> double& { return c.client.sparsifier.beta; });
    count("client.local_epochs", [](C& c) -> std::size_t& { return c.client.local_epochs; });
    count("client.finetune_epochs", [](C& c) -> std::size_t& { return c.client.finetune_epochs; });
    count("client.batch_size", [](C& c) -> std::size_t& { return c.client.batch_size; });
    flag("client.use_correction", [](C& c) -> bool& { return c.client.use_correction; });
    flag("client.proxskip_h", [](C& c) -> bool& { return c.client.proxskip_h; });
    k["client.quant_mode"] = [](C& c, const std::string& key, std::string_view v) {
      c.client.quant_mode = cfg_enum<QuantMode>(
          key, v, {{"deterministic", QuantMode::Deterministic}, {"stochastic", QuantMode::Stochastic}});
    };

    real("server.p", [](C& c) -> double& { return c.server.p; });
    real("server.rho", [](C& c) -> double& { return c.server.rho; });
    real("server.tau_lowrank", [](C& c) -> double& { return c.server.tau_lowrank; });
    k["server.threshold_mode"] = [](C& c, const std::string& key, std::string_view v) {
      c.server.threshold_mode = cfg_enum<ThresholdMode>(
          key, v, {{"relative", ThresholdMode::Relative}, {"absolute", ThresholdMode::Absolute}});
    };
    count("server.r_bits", [](C& c) -> unsigned& { return c.server.r_bits; });
    k["server.downlink"] = [](C& c, const std::string& key, std::string_view v) {
      c.server.downlink = cfg_enum<Scheme>(key, v,
                                           {{"dense", Scheme::Dense},
                                            {"quantized", Scheme::Quantized},
                                            {"lowrank_quantized", Scheme::LowRankQuantized}});
    };
    k["server.quant_mode"] = [](C& c, const std::string& key, std::string_view v) {
      c.server.quant_mode = cfg_enum<QuantMode>(
          key, v, {{"deterministic", QuantMode::Deterministic}, {"stochastic", QuantMode::Stochastic}});
    };
    k["server.ablation"] = [](C& c, const std::string& key, std::string_view v) {
      c.server.ablation = cfg_enum<Ablation>(
          key, v,
          {{"full", Ablation::Full}, {"global_only", Ablation::GlobalOnly}, {"sparse_only", Ablation::SparseOnly}});
    };

    flag("dropout.enabled", [](C& c) -> bool& { return c.server.dropout.enabled; });
    real("dropout.a", [](C& c) -> double& { return c.server.dropout.a; });
    real("dropout.b", [](C& c) -> double& { return c.server.dropout.b; });
    real("net.bandwidth_bps", [](C& c) -> double& { return c.server.net.bandwidth_bps; });
    real("net.latency_s", [](C& c) -> double& { return c.server.net.latency_s; });

    count("run.rounds", [](C& c) -> std::size_t& { return c.rounds; });
    count("run.repeats", [](C& c) -> std::size_t& { return c.repeats; });
    k["run.output_dir"] = [](C& c, const std::string&, std::string_view v) { c.output_dir = std::string(v); };

    count("seed.data", [](C& c) -> std::uint64_t& { return c.seeds.data; });
    count("seed.init", [](C& c) -> std::uint64_t& { return c.seeds.init; });
    count("seed.coin", [](C& c) -> std::uint64_t& { return c.seeds.coin; });
    count("seed.sampling", [](C& c) -> std::uint64_t& { return c.seeds.sampling; });
    count("seed.dropout", [](C& c) -> std::uint64_t& { return c.seeds.dropout; });
    return k;
  }();
  return keys;
}

inline std::string unquote(std::string_view v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

}  // namespace detail

inline std::vector<std::string> config_key_names() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::config_keys()) out.push_back(k);
  return out;
}

// Range checks for every knob. Throws ConfigError naming the key.
inline void validate_config(const ExperimentConfig& c) {
  using detail::config_error;
  auto check = [](bool ok, const char* key, const char* why) {
    if (!ok) throw config_error(key, why);
  };
  check(c.server.p >= 0.0 && c.server.p <= 1.0, "server.p", "must lie in [0, 1]");
  check(c.server.rho > 0.0 && c.server.rho <= 1.0, "server.rho", "must lie in (0, 1]");
  check(c.server.tau_lowrank >= 0.0, "server.tau_lowrank", "must be >= 0");
  check(c.server.r_bits >= 1 && c.server.r_bits <= 32, "server.r_bits", "must lie in [1, 32]");
  check(c.server.dropout.a > 0.0, "dropout.a", "must be > 0");
  check(c.server.dropout.b > 0.0, "dropout.b", "must be > 0");
  check(c.server.net.bandwidth_bps > 0.0, "net.bandwidth_bps", "must be > 0");
  check(c.server.net.latency_s >= 0.0, "net.latency_s", "must be >= 0");
  check(c.client.eta > 0.0, "client.eta", "must be > 0");
  check(c.client.alpha >= 0.0, "client.alpha", "must be >= 0");
  check(c.client.nu >= 0.0, "client.nu", "must be >= 0");
  check(c.client.sparsifier.cut >= 0.0, "client.cut_sparse", "must be >= 0");
  check(c.client.sparsifier.beta >= 0.0 && c.client.sparsifier.beta <= 1.0, "client.beta", "must lie in [0, 1]");
  check(c.mu_prox >= 0.0, "fedprox.mu", "must be >= 0");
  check(c.hidden >= 1, "model.hidden", "must be >= 1");
  check(c.rounds >= 1, "run.rounds", "must be >= 1");
  check(c.repeats >= 1, "run.repeats", "must be >= 1");
  check(c.clients >= 1, "partition.clients", "must be >= 1");
  check(c.skew > 0.0, "partition.skew", "must be > 0");
  double total = 0.0;
  for (double r : c.split) {
    check(r >= 0.0 && r <= 1.0, "data.split", "ratios must lie in [0, 1]");
    total += r;
  }
  check(std::abs(total - 1.0) <= 1e-9, "data.split", "ratios must sum to 1");
  check(c.split[0] > 0.0, "data.split", "training ratio must be > 0");
  if (c.source == DataSource::Tu) {
    check(!c.tu_paths.empty(), "data.tu_paths", "required when data.source = tu");
    for (const auto& p : c.tu_paths) {
      if (!std::filesystem::is_directory(p)) throw config_error("data.tu_paths", "no such directory: " + p.string());
    }
  } else {
    try {
      detail::validate(c.synth);
    } catch (const BadSpec& e) {
      throw config_error("synth", e.what());
    }
  }
  if (c.partition == PartitionMode::CrossDataset && c.source == DataSource::Tu) {
    check(c.tu_paths.size() == c.clients, "partition.clients", "cross_dataset needs one TU path per client");
  }
  if (c.partition != PartitionMode::CrossDataset && c.source == DataSource::Tu) {
    check(c.tu_paths.size() == 1, "data.tu_paths", "iid and label_skew partition exactly one dataset");
  }
}

// Flat `key = value` lines; `#` starts a comment. Relative TU paths resolve
// against `base_dir`.
inline ExperimentConfig parse_config_text(std::string_view text, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "line " + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key{detail::trim(line.substr(0, eq))};
    const std::string value = detail::unquote(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    const auto& keys = detail::config_keys();
    const auto it = keys.find(key);
    if (it == keys.end()) throw detail::config_error(key, "unknown key (" + where + ")");
    if (!seen.insert(key).second) throw detail::config_error(key, "duplicate key (" + where + ")");
    it->second(cfg, key, value);
  }
  for (auto& p : cfg.tu_paths)
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
  validate_config(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path.parent_path());
}

// CEFGL_SEED replaces every seed in the block.
inline void apply_env_overrides(ExperimentConfig& cfg) {
  const char* env = std::getenv("CEFGL_SEED");
  if (env == nullptr) return;
  const auto v = detail::cfg_uint("CEFGL_SEED", detail::trim(env));
  cfg.seeds = SeedBlock{v, v, v, v, v};
}

// Seed block for repeat `i`; repeat 0 is the configured block.
inline ExperimentConfig with_repeat(ExperimentConfig cfg, std::size_t i) {
  cfg.seeds.data += i;
  cfg.seeds.init += i;
  cfg.seeds.coin += i;
  cfg.seeds.sampling += i;
  cfg.seeds.dropout += i;
  return cfg;
}

// ---------------------------------------------------------------------------
// Federation

struct Federation {
  ServerState server;
  std::vector<ClientState> clients;
  std::vector<RoundRecord> history;
  std::uint64_t partition_hash = 0;
  ArchConfig arch;
};

namespace detail {

inline std::vector<GraphDataset> load_pool(const ExperimentConfig& cfg) {
  std::vector<GraphDataset> pool;
  if (cfg.source == DataSource::Tu) {
    for (const auto& p : cfg.tu_paths) pool.push_back(load_tu_dataset(p));
  } else if (cfg.partition == PartitionMode::CrossDataset) {
    for (std::size_t c = 0; c < cfg.clients; ++c) pool.push_back(synth_generate(cfg.synth, cfg.seeds.data + c));
  } else {
    pool.push_back(synth_generate(cfg.synth, cfg.seeds.data));
  }
  // One feature width and one label space for the whole federation.
  std::size_t dim = 0;
  for (const auto& d : pool) dim = std::max(dim, d.feature_dim);
  for (auto& d : pool) pad_features(d, dim);
  return pool;
}

}  // namespace detail

inline Federation build_federation(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const auto pool = detail::load_pool(cfg);
  const ClientPartition part = partition_clients(pool, cfg.clients, cfg.partition, cfg.skew, cfg.seeds.data);

  Federation fed;
  fed.partition_hash = part.hash();
  fed.arch.feature_dim = pool.front().feature_dim;
  fed.arch.hidden = cfg.hidden;
  fed.arch.classes = 0;
  for (const auto& d : pool) fed.arch.classes = std::max(fed.arch.classes, d.num_classes);

  const ModelParams init = init_params(fed.arch, cfg.seeds.init);
  const bool sparse_only = cfg.algorithm == Algorithm::Cefgl && cfg.server.ablation == Ablation::SparseOnly;
  const ModelParams global0 = sparse_only ? zeros_like(init) : init;

  fed.server.cfg = cfg.server;
  fed.server.cfg.eta = cfg.client.eta;
  fed.server.theta = global0;
  fed.server.coin_rng = make_stream(cfg.seeds.coin, 0xC014);
  fed.server.sample_rng = make_stream(cfg.seeds.sampling, 0x5A3F);
  fed.server.dropout_rng = make_stream(cfg.seeds.dropout, 0xD209);
  fed.server.quant_rng = make_stream(cfg.seeds.coin, 0x9A47);

  for (std::size_t c = 0; c < cfg.clients; ++c) {
    const GraphDataset& src = cfg.partition == PartitionMode::CrossDataset ? pool[c] : pool.front();
    GraphDataset local = subset(src, part.assignments[c]);
    local.num_classes = fed.arch.classes;
    DataSplit sp = split_dataset(local, cfg.split, cfg.seeds.data * 1000003ull + c);

    ClientState cs;
    cs.id = c;
    cs.cfg = cfg.client;
    cs.w = global0;
    cs.theta_view = global0;
    cs.h = zeros_like(init);
    cs.s = zeros_like(init);
    if (sparse_only) {
      cs.s = init;
      sparsify(cs.s, cs.cfg.sparsifier);
    }
    cs.train = std::make_shared<const GraphDataset>(std::move(sp.train));
    cs.val = std::make_shared<const GraphDataset>(std::move(sp.val));
    cs.test = std::make_shared<const GraphDataset>(std::move(sp.test));
    cs.rng = make_stream(cfg.seeds.init, 0xC000 + c);
    fed.clients.push_back(std::move(cs));
  }
  return fed;
}

// Runs the next round for the configured algorithm and appends its record.
inline const RoundRecord& step(Federation& fed, const ExperimentConfig& cfg) {
  const std::size_t t = fed.server.t;
  try {
    switch (cfg.algorithm) {
      case Algorithm::Cefgl:
        fed.history.push_back(run_round(fed.server, fed.clients));
        break;
      case Algorithm::FedAvg:
        fed.history.push_back(fedavg_round(fed.server, fed.clients));
        break;
      case Algorithm::FedProx:
        fed.history.push_back(fedprox_round(fed.server, fed.clients, cfg.mu_prox));
        break;
    }
  } catch (const DivergenceDetected& e) {
    throw DivergenceDetected("round " + std::to_string(t) + ": " + e.what());
  }
  return fed.history.back();
}

// ---------------------------------------------------------------------------
// Summaries

struct RunSummary {
  std::vector<RoundRecord> rounds;
  std::uint64_t partition_hash = 0;
  unsigned r_bits = 0;  // 0 for dense baselines
  double final_mean_accuracy = 0.0;
  double final_std_accuracy = 0.0;  // population std across clients, last round
  std::size_t communicated_rounds = 0;
  std::uint64_t total_uplink_bits = 0;
  std::uint64_t total_downlink_bits = 0;
  std::uint64_t transmitted_values = 0;
  double sim_wall_time = 0.0;
  // Wire bits per transmitted value against a 64-bit dense encoding, and the
  // level-bits-only ratio r/32 that ignores signs and norms.
  double wire_bits_ratio = 0.0;
  double nominal_bits_ratio = 1.0;
};

// Recomputes every aggregate from the round sequence.
inline RunSummary summarize(std::vector<RoundRecord> rounds, std::uint64_t partition_hash, unsigned r_bits) {
  RunSummary s;
  s.partition_hash = partition_hash;
  s.r_bits = r_bits;
  for (const auto& r : rounds) {
    s.communicated_rounds += r.communicated ? 1 : 0;
    s.total_uplink_bits += r.uplink_bits;
    s.total_downlink_bits += r.downlink_bits;
    s.transmitted_values += r.transmitted_values;
    s.sim_wall_time += r.sim_wall_time;
  }
  if (!rounds.empty()) {
    const auto& last = rounds.back();
    s.final_mean_accuracy = last.mean_accuracy;
    double sq = 0.0;
    std::size_t n = 0;
    for (const auto& c : last.clients) {
      if (!c.has_test) continue;
      sq += (c.test_accuracy - last.mean_accuracy) * (c.test_accuracy - last.mean_accuracy);
      ++n;
    }
    s.final_std_accuracy = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
  }
  if (s.transmitted_values > 0) {
    s.wire_bits_ratio = static_cast<double>(s.total_uplink_bits + s.total_downlink_bits) /
                        (64.0 * static_cast<double>(s.transmitted_values));
  }
  s.nominal_bits_ratio = r_bits == 0 ? 1.0 : static_cast<double>(r_bits) / 32.0;
  s.rounds = std::move(rounds);
  return s;
}

inline unsigned billed_bits(const ExperimentConfig& cfg) {
  return cfg.algorithm == Algorithm::Cefgl ? cfg.server.r_bits : 0;
}

struct RunOptions {
  std::size_t checkpoint_every = 0;  // 0 = only when asked explicitly
  std::filesystem::path checkpoint_path;
};

inline void save_checkpoint(const Federation& fed, const std::filesystem::path& path);

// Continues `fed` until cfg.rounds rounds exist.
inline RunSummary run_federation(Federation& fed, const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  while (fed.server.t < cfg.rounds) {
    step(fed, cfg);
    if (opt.checkpoint_every > 0 && fed.server.t % opt.checkpoint_every == 0 && !opt.checkpoint_path.empty())
      save_checkpoint(fed, opt.checkpoint_path);
  }
  return summarize(fed.history, fed.partition_hash, billed_bits(cfg));
}

inline RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  Federation fed = build_federation(cfg);
  return run_federation(fed, cfg, opt);
}

struct SeedSummary {
  std::vector<RunSummary> runs;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // sample std of final accuracy across seeds
};

inline SeedSummary summarize_seeds(std::vector<RunSummary> runs) {
  SeedSummary out;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) out.mean_accuracy += r.final_mean_accuracy / n;
  if (runs.size() > 1) {
    double sq = 0.0;
    for (const auto& r : runs) sq += (r.final_mean_accuracy - out.mean_accuracy) * (r.final_mean_accuracy - out.mean_accuracy);
    out.std_accuracy = std::sqrt(sq / (n - 1.0));
  }
  out.runs = std::move(runs);
  return out;
}

// `n` runs with seed blocks offset by 0..n-1.
inline SeedSummary run_seeds(const ExperimentConfig& cfg, std::size_t n) {
  std::vector<RunSummary> runs;
  for (std::size_t i = 0; i < n; ++i) runs.push_back(run_experiment(with_repeat(cfg, i)));
  return summarize_seeds(std::move(runs));
}

enum class SweepAxis { TauLowrank, CutSparse, Beta, P, RBits };

inline SweepAxis parse_axis(std::string_view name) {
  return detail::cfg_enum<SweepAxis>("axis", name,
                                     {{"tau_lowrank", SweepAxis::TauLowrank},
                                      {"cut_sparse", SweepAxis::CutSparse},
                                      {"beta", SweepAxis::Beta},
                                      {"p", SweepAxis::P},
                                      {"r_bits", SweepAxis::RBits}});
}

inline std::string axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::TauLowrank: return "tau_lowrank";
    case SweepAxis::CutSparse: return "cut_sparse";
    case SweepAxis::Beta: return "beta";
    case SweepAxis::P: return "p";
    case SweepAxis::RBits: return "r_bits";
  }
  return "?";
}

// Setting cut_sparse selects the threshold sparsifier, beta selects top-k.
inline ExperimentConfig with_axis(ExperimentConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::TauLowrank:
      cfg.server.tau_lowrank = value;
      break;
    case SweepAxis::CutSparse:
      cfg.client.sparsifier.kind = SparsifierKind::Threshold;
      cfg.client.sparsifier.cut = value;
      break;
    case SweepAxis::Beta:
      cfg.client.sparsifier.kind = SparsifierKind::TopK;
      cfg.client.sparsifier.beta = value;
      break;
    case SweepAxis::P:
      cfg.server.p = value;
      break;
    case SweepAxis::RBits:
      if (value != std::floor(value) || value < 1 || value > 32)
        throw detail::config_error("server.r_bits", "sweep value must be an integer in [1, 32]");
      cfg.server.r_bits = static_cast<unsigned>(value);
      break;
  }
  validate_config(cfg);
  return cfg;
}

// One run per value with the same seeds; the data partition must not change
// across points.
inline std::vector<RunSummary> run_sweep(const ExperimentConfig& cfg, SweepAxis axis, std::span<const double> values) {
  std::vector<ExperimentConfig> points;
  for (double v : values) points.push_back(with_axis(cfg, axis, v));
  std::vector<RunSummary> out;
  for (const auto& p : points) {
    out.push_back(run_experiment(p));
    if (out.back().partition_hash != out.front().partition_hash)
      throw Error("sweep: data partition differs between sweep points");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics sinks

namespace detail {

inline std::string fmt_real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

}  // namespace detail

inline nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.clients) {
    clients.push_back({{"id", c.id},
                       {"train_loss", c.train_loss},
                       {"test_acc", c.has_test ? nlohmann::json(c.test_accuracy) : nlohmann::json(nullptr)}});
  }
  return {{"round", r.t},
          {"coin", r.coin},
          {"communicated", r.communicated},
          {"participants", r.participants},
          {"dropped", r.dropped},
          {"drop_rate", r.drop_rate ? nlohmann::json(*r.drop_rate) : nlohmann::json(nullptr)},
          {"uplink_bits", r.uplink_bits},
          {"downlink_bits", r.downlink_bits},
          {"transmitted_values", r.transmitted_values},
          {"sim_wall_time", r.sim_wall_time},
          {"mean_acc", r.mean_accuracy},
          {"mean_train_loss", r.mean_train_loss},
          {"lowrank_ratio", r.lowrank_ratio},
          {"lowrank_param_ratio", r.lowrank_param_ratio},
          {"density_ratio", r.density_ratio},
          {"clients", clients}};
}

inline RoundRecord round_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.t = j.at("round").get<std::size_t>();
  r.coin = j.at("coin").get<bool>();
  r.communicated = j.at("communicated").get<bool>();
  r.participants = j.at("participants").get<std::vector<std::size_t>>();
  r.dropped = j.at("dropped").get<std::vector<std::size_t>>();
  if (!j.at("drop_rate").is_null()) r.drop_rate = j.at("drop_rate").get<double>();
  r.uplink_bits = j.at("uplink_bits").get<std::uint64_t>();
  r.downlink_bits = j.at("downlink_bits").get<std::uint64_t>();
  r.transmitted_values = j.at("transmitted_values").get<std::uint64_t>();
  r.sim_wall_time = j.at("sim_wall_time").get<double>();
  r.mean_accuracy = j.at("mean_acc").get<double>();
  r.mean_train_loss = j.at("mean_train_loss").get<double>();
  r.lowrank_ratio = j.at("lowrank_ratio").get<double>();
  r.lowrank_param_ratio = j.at("lowrank_param_ratio").get<double>();
  r.density_ratio = j.at("density_ratio").get<double>();
  for (const auto& c : j.at("clients")) {
    ClientMetrics m;
    m.id = c.at("id").get<std::size_t>();
    m.train_loss = c.at("train_loss").get<double>();
    m.has_test = !c.at("test_acc").is_null();
    if (m.has_test) m.test_accuracy = c.at("test_acc").get<double>();
    r.clients.push_back(m);
  }
  return r;
}

inline nlohmann::json summary_json(const RunSummary& s) {
  return {{"rounds", s.rounds.size()},
          {"partition_hash", s.partition_hash},
          {"r_bits", s.r_bits},
          {"final_mean_acc", s.final_mean_accuracy},
          {"final_std_acc", s.final_std_accuracy},
          {"communicated_rounds", s.communicated_rounds},
          {"total_uplink_bits", s.total_uplink_bits},
          {"total_downlink_bits", s.total_downlink_bits},
          {"transmitted_values", s.transmitted_values},
          {"sim_wall_time", s.sim_wall_time},
          {"wire_bits_ratio", s.wire_bits_ratio},
          {"nominal_bits_ratio", s.nominal_bits_ratio}};
}

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "round",    "coin",          "communicated",  "participants",        "dropped",       "uplink_bits",
      "downlink_bits", "mean_acc", "mean_train_loss", "lowrank_ratio", "lowrank_param_ratio", "density_ratio",
      "sim_wall_time"};
  return cols;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(p.string() + ": cannot open for writing");
  return f;
}

inline void check_written(std::ofstream& f, const std::filesystem::path& p) {
  f.flush();
  if (!f) throw IoError(p.string() + ": write failed");
}

}  // namespace detail

// Writes rounds.jsonl, summary.csv and summary.json into `dir`. Real elapsed
// time, when given, goes to summary.json only so rounds.jsonl stays
// reproducible.
inline void emit_metrics(const RunSummary& s, const std::filesystem::path& dir,
                         std::optional<double> elapsed_seconds = std::nullopt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());

  const auto jsonl = dir / "rounds.jsonl";
  auto f = detail::open_out(jsonl);
  for (const auto& r : s.rounds) f << to_json(r).dump() << '\n';
  detail::check_written(f, jsonl);

  const auto csv = dir / "summary.csv";
  auto c = detail::open_out(csv);
  const auto& cols = csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) c << (i ? "," : "") << cols[i];
  c << '\n';
  using detail::fmt_real;
  for (const auto& r : s.rounds) {
    c << r.t << ',' << r.coin << ',' << r.communicated << ',' << r.participants.size() << ',' << r.dropped.size()
      << ',' << r.uplink_bits << ',' << r.downlink_bits << ',' << fmt_real(r.mean_accuracy) << ','
      << fmt_real(r.mean_train_loss) << ',' << fmt_real(r.lowrank_ratio) << ',' << fmt_real(r.lowrank_param_ratio)
      << ',' << fmt_real(r.density_ratio) << ',' << fmt_real(r.sim_wall_time) << '\n';
  }
  detail::check_written(c, csv);

  const auto js = dir / "summary.json";
  auto j = summary_json(s);
  if (elapsed_seconds) j["elapsed_seconds"] = *elapsed_seconds;
  auto o = detail::open_out(js);
  o << j.dump(2) << '\n';
  detail::check_written(o, js);
}

inline std::vector<RoundRecord> read_rounds(const std::filesystem::path& jsonl) {
  std::ifstream f(jsonl);
  if (!f) throw IoError(jsonl.string() + ": cannot open");
  std::vector<RoundRecord> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(f, line);) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(round_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

struct InspectReport {
  RunSummary recomputed;
  std::vector<std::string> mismatches;
  bool ok() const { return mismatches.empty(); }
};

// Recomputes the aggregates of a metrics directory from rounds.jsonl and
// compares them with summary.json.
inline InspectReport inspect(const std::filesystem::path& dir) {
  nlohmann::json stored;
  {
    std::ifstream f(dir / "summary.json");
    if (!f) throw IoError((dir / "summary.json").string() + ": cannot open");
    try {
      stored = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw IoError((dir / "summary.json").string() + ": " + e.what());
    }
  }
  InspectReport rep;
  try {
    rep.recomputed = summarize(read_rounds(dir / "rounds.jsonl"), stored.at("partition_hash").get<std::uint64_t>(),
                               stored.at("r_bits").get<unsigned>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "summary.json").string() + ": " + e.what());
  }
  const auto fresh = summary_json(rep.recomputed);
  for (const auto& [key, value] : fresh.items()) {
    if (!stored.contains(key)) {
      rep.mismatches.push_back(key + ": missing from summary.json");
    } else if (stored.at(key) != value) {
      rep.mismatches.push_back(key + ": stored " + stored.at(key).dump() + ", recomputed " + value.dump());
    }
  }
  std::ifstream csv(dir / "summary.csv");
  if (csv) {
    std::size_t lines = 0;
    for (std::string l; std::getline(csv, l);) lines += detail::trim(l).empty() ? 0 : 1;
    if (lines != rep.recomputed.rounds.size() + 1)
      rep.mismatches.push_back("summary.csv: " + std::to_string(lines) + " lines for " +
                               std::to_string(rep.recomputed.rounds.size()) + " rounds");
  } else {
    rep.mismatches.push_back("summary.csv: missing");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(ByteWriter& w, std::uint64_t v) {
  w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(ByteReader& r) {
  const std::uint64_t lo = r.u32();
  return lo | (static_cast<std::uint64_t>(r.u32()) << 32);
}

inline void put_string(ByteWriter& w, std::string_view s) {
  put_u64(w, s.size());
  w.bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string get_string(ByteReader& r) {
  const auto n = get_u64(r);
  if (n > r.remaining()) throw MalformedPayload("string length exceeds checkpoint size");
  const auto b = r.bytes(static_cast<std::size_t>(n));
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

inline void put_params(ByteWriter& w, const ModelParams& p) {
  w.u16(static_cast<std::uint16_t>(p.size()));
  for (const auto& t : p.tensors) {
    put_string(w, t.name);
    w.u32(static_cast<std::uint32_t>(t.value.rows()));
    w.u32(static_cast<std::uint32_t>(t.value.cols()));
    for (double v : t.value.data()) w.f64(v);
  }
}

// Reads into `p`, which must already have the expected layout.
inline void get_params(ByteReader& r, ModelParams& p) {
  if (r.u16() != p.size()) throw ShapeMismatch("checkpoint: tensor count differs from the configured model");
  for (auto& t : p.tensors) {
    if (get_string(r) != t.name) throw ShapeMismatch("checkpoint: tensor order differs from the configured model");
    const std::size_t rows = r.u32(), cols = r.u32();
    if (rows != t.value.rows() || cols != t.value.cols())
      throw ShapeMismatch("checkpoint: shape of " + t.name + " differs from the configured model");
    for (double& v : t.value.data()) v = r.f64();
  }
}

inline void put_rng(ByteWriter& w, const Rng& rng) { put_string(w, rng_state(rng)); }
inline void get_rng(ByteReader& r, Rng& rng) { set_rng_state(rng, get_string(r)); }

}  // namespace detail

// Server and client state, RNG positions and the round history. Datasets are
// rebuilt from the config on load.
inline void save_checkpoint(const Federation& fed, const std::filesystem::path& path) {
  using namespace detail;
  ByteWriter w;
  w.bytes(std::array<std::uint8_t, 4>{'C', 'F', 'C', 'K'});
  w.u16(kCheckpointVersion);
  put_u64(w, fed.partition_hash);
  put_u64(w, fed.server.t);
  put_params(w, fed.server.theta);
  put_rng(w, fed.server.coin_rng);
  put_rng(w, fed.server.sample_rng);
  put_rng(w, fed.server.dropout_rng);
  put_rng(w, fed.server.quant_rng);
  w.f64(fed.server.lowrank_ratio);
  w.f64(fed.server.lowrank_param_ratio);
  w.u32(static_cast<std::uint32_t>(fed.clients.size()));
  for (const auto& c : fed.clients) {
    put_u64(w, c.id);
    put_params(w, c.w);
    put_params(w, c.s);
    put_params(w, c.h);
    put_params(w, c.theta_view);
    put_rng(w, c.rng);
  }
  std::string history;
  for (const auto& r : fed.history) history += to_json(r).dump() + '\n';
  put_string(w, history);

  const auto bytes = w.take();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    auto f = open_out(tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check_written(f, tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": " + ec.message());
}

// Restores a checkpoint into a federation built from the same config.
inline void load_checkpoint(const std::filesystem::path& path, Federation& fed) {
  using namespace detail;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string() + ": cannot open checkpoint");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Federation out = fed;
  try {
    ByteReader r(bytes);
    const auto magic = r.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), "CFCK")) throw IoError(path.string() + ": not a checkpoint file");
    if (const auto v = r.u16(); v != kCheckpointVersion)
      throw VersionMismatch(path.string() + ": checkpoint version " + std::to_string(v) + ", expected " +
                            std::to_string(kCheckpointVersion));
    if (get_u64(r) != fed.partition_hash)
      throw ConfigError(path.string() + ": checkpoint was written for a different data partition");
    out.server.t = static_cast<std::size_t>(get_u64(r));
    get_params(r, out.server.theta);
    get_rng(r, out.server.coin_rng);
    get_rng(r, out.server.sample_rng);
    get_rng(r, out.server.dropout_rng);
    get_rng(r, out.server.quant_rng);
    out.server.lowrank_ratio = r.f64();
    out.server.lowrank_param_ratio = r.f64();
    if (r.u32() != out.clients.size()) throw ConfigError(path.string() + ": client count differs from config");
    for (auto& c : out.clients) {
      if (get_u64(r) != c.id) throw ConfigError(path.string() + ": client order differs from config");
      get_params(r, c.w);
      get_params(r, c.s);
      get_params(r, c.h);
      get_params(r, c.theta_view);
      get_rng(r, c.rng);
    }
    out.history.clear();
    std::istringstream hist(get_string(r));
    for (std::string line; std::getline(hist, line);)
      if (!line.empty()) out.history.push_back(round_from_json(nlohmann::json::parse(line)));
    if (!r.at_end()) throw IoError(path.string() + ": trailing bytes in checkpoint");
  } catch (const MalformedPayload& e) {
    throw IoError(path.string() + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  fed = std::move(out);
}

inline Federation load_checkpoint(const std::filesystem::path& path, const ExperimentConfig& cfg) {
  Federation fed = build_federation(cfg);
  load_checkpoint(path, fed);
  return fed;
}

}  // namespace cefgl
