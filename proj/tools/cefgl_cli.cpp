// Command-line driver: run, sweep, inspect, make-fixture.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cefgl/cefgl.hpp"

namespace fs = std::filesystem;
using namespace cefgl;

namespace {

enum Exit : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

ExperimentConfig load(const std::string& path, const std::string& out_override) {
  ExperimentConfig cfg = parse_config(path);
  apply_env_overrides(cfg);
  if (!out_override.empty()) cfg.output_dir = out_override;
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void print_summary(const std::string& label, const RunSummary& s) {
  std::cout << label << ": final_acc=" << s.final_mean_accuracy << " (std " << s.final_std_accuracy
            << ") communicated=" << s.communicated_rounds << "/" << s.rounds.size()
            << " uplink_bits=" << s.total_uplink_bits << " downlink_bits=" << s.total_downlink_bits << "\n";
}

void write_seed_table(const fs::path& path, const SeedSummary& s) {
  nlohmann::json j;
  j["mean_acc"] = s.mean_accuracy;
  j["std_acc"] = s.std_accuracy;
  j["final_acc"] = nlohmann::json::array();
  for (const auto& r : s.runs) j["final_acc"].push_back(r.final_mean_accuracy);
  std::ofstream f(path);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f << j.dump(2) << '\n';
}

// One directory per repeat when repeats > 1.
SeedSummary run_repeats(const ExperimentConfig& cfg, const fs::path& out, const std::string& resume,
                        std::size_t checkpoint_every) {
  std::vector<RunSummary> runs;
  for (std::size_t i = 0; i < cfg.repeats; ++i) {
    const ExperimentConfig c = with_repeat(cfg, i);
    const fs::path dir = cfg.repeats == 1 ? out : out / ("seed_" + std::to_string(i));
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    Federation fed = build_federation(c);
    if (!resume.empty() && i == 0) load_checkpoint(resume, fed);
    RunOptions opt{checkpoint_every, dir / "checkpoint.bin"};
    RunSummary s = run_federation(fed, c, opt);
    save_checkpoint(fed, dir / "checkpoint.bin");
    emit_metrics(s, dir, seconds_since(t0));
    print_summary(dir.string(), s);
    runs.push_back(std::move(s));
  }
  return summarize_seeds(std::move(runs));
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  for (auto tok : detail::split_commas(text)) {
    tok = detail::trim(tok);
    if (tok.empty()) continue;
    out.push_back(detail::cfg_real("--values", tok));
  }
  if (out.empty()) throw ConfigError("--values: need at least one value");
  return out;
}

std::string value_label(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated graph learning with compressed communication"};
  app.require_subcommand(1);

  std::string config_path, out_dir, resume;
  std::size_t checkpoint_every = 0;
  auto* run = app.add_subcommand("run", "Run one experiment (run.repeats seeds)");
  run->add_option("config", config_path, "Config file")->required();
  run->add_option("--out", out_dir, "Override run.output_dir");
  run->add_option("--resume", resume, "Continue from a checkpoint written for the same config");
  run->add_option("--checkpoint-every", checkpoint_every, "Write checkpoint.bin every N rounds");

  std::string axis, values;
  auto* sweep = app.add_subcommand("sweep", "Grid sweep over one knob with shared seeds");
  sweep->add_option("config", config_path, "Config file")->required();
  sweep->add_option("--axis", axis, "tau_lowrank | cut_sparse | beta | p | r_bits")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--out", out_dir, "Override run.output_dir");

  std::string inspect_dir;
  auto* insp = app.add_subcommand("inspect", "Recompute a run's aggregates and compare with summary.json");
  insp->add_option("dir", inspect_dir, "Metrics directory")->required();

  std::string fixture_dir;
  auto* fixture = app.add_subcommand("make-fixture", "Write the two-graph TU fixture");
  fixture->add_option("dir", fixture_dir, "Target directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*run) {
      const ExperimentConfig cfg = load(config_path, out_dir);
      const SeedSummary s = run_repeats(cfg, cfg.output_dir, resume, checkpoint_every);
      if (cfg.repeats > 1) {
        write_seed_table(cfg.output_dir / "seeds.json", s);
        std::cout << "mean over " << cfg.repeats << " seeds: " << s.mean_accuracy << " (std " << s.std_accuracy
                  << ")\n";
      }
    } else if (*sweep) {
      const ExperimentConfig cfg = load(config_path, out_dir);
      const SweepAxis ax = parse_axis(axis);
      const auto vals = parse_values(values);
      nlohmann::json table = nlohmann::json::array();
      std::vector<std::vector<RunSummary>> per_value(vals.size());
      for (std::size_t r = 0; r < cfg.repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto runs = run_sweep(with_repeat(cfg, r), ax, vals);
        const double elapsed = seconds_since(t0);
        for (std::size_t i = 0; i < vals.size(); ++i) {
          fs::path dir = cfg.output_dir / (axis_name(ax) + "=" + value_label(vals[i]));
          if (cfg.repeats > 1) dir /= "seed_" + std::to_string(r);
          emit_metrics(runs[i], dir, elapsed / static_cast<double>(vals.size()));
          print_summary(dir.string(), runs[i]);
          per_value[i].push_back(runs[i]);
        }
      }
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const SeedSummary s = summarize_seeds(per_value[i]);
        std::uint64_t bits = 0;
        double lowrank = 0.0, density = 0.0;
        for (const auto& run_s : s.runs) {
          bits += run_s.total_uplink_bits + run_s.total_downlink_bits;
          lowrank += run_s.rounds.back().lowrank_ratio / static_cast<double>(s.runs.size());
          density += run_s.rounds.back().density_ratio / static_cast<double>(s.runs.size());
        }
        table.push_back({{"value", vals[i]},
                         {"mean_acc", s.mean_accuracy},
                         {"std_acc", s.std_accuracy},
                         {"total_bits", bits},
                         {"lowrank_ratio", lowrank},
                         {"density_ratio", density}});
      }
      fs::create_directories(cfg.output_dir);
      std::ofstream f(cfg.output_dir / "sweep.json");
      if (!f) throw IoError((cfg.output_dir / "sweep.json").string() + ": cannot open for writing");
      f << nlohmann::json{{"axis", axis_name(ax)}, {"points", table}}.dump(2) << '\n';
    } else if (*insp) {
      const InspectReport rep = inspect(inspect_dir);
      std::cout << rep.recomputed.rounds.size() << " rounds, final_acc=" << rep.recomputed.final_mean_accuracy
                << ", bits=" << rep.recomputed.total_uplink_bits + rep.recomputed.total_downlink_bits << "\n";
      for (const auto& m : rep.mismatches) std::cout << "MISMATCH " << m << "\n";
      if (!rep.ok()) return kFailure;
      std::cout << "summary consistent\n";
    } else if (*fixture) {
      write_tu_fixture(fixture_dir);
      std::cout << "wrote fixture to " << fixture_dir << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceDetected& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const MissingFile& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const VersionMismatch& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const ParseError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const IndexOutOfRange& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const BadMode& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
