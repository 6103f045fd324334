#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>

#include "advobs/errors.hpp"
#include "advobs/harness.hpp"

namespace h = advobs::harness;

int main(int argc, char** argv) {
  CLI::App app{"Adversarial observation experiments on a synthetic diffusion forecaster"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", out, "output directory (defaults depend on the subcommand)");
  app.add_option("--seed", seed, "override the experiment seed");
  app.add_option("--threads", threads, "worker threads for attack trials")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", quiet, "suppress progress lines");

  using Cmd = advobs::harness::fs::path (*)(const h::ExperimentConfig&, const h::fs::path&, const h::Log&);
  struct Entry {
    const char* name;
    const char* help;
    Cmd fn;
    int dir;  // 0 data, 1 model, 2 out
  };
  const Entry entries[] = {
      {"simulate", "generate the synthetic reanalysis", h::cmd_simulate, 0},
      {"train", "train the denoiser and calibrate thresholds", h::cmd_train, 1},
      {"attack", "run every scenario at the budget cap", h::cmd_attack, 2},
      {"sweep", "deviation against budget", h::cmd_sweep, 2},
      {"ablate", "attack variants at the budget cap", h::cmd_ablate, 2},
      {"detect", "minimum budgets and detection power", h::cmd_detect, 2},
      {"report", "all tables plus report.json", h::cmd_report, 2},
  };
  for (const auto& e : entries) app.add_subcommand(e.name, e.help);

  CLI11_PARSE(app, argc, argv);

  const auto t0 = std::chrono::steady_clock::now();
  h::Log log;
  if (!quiet)
    log = [&](const std::string& msg) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
    };

  try {
    h::ExperimentConfig config = config_path.empty() ? h::ExperimentConfig{} : h::load_config(config_path);
    if (seed) config.seed = *seed;
    if (threads) config.threads = *threads;
    for (const auto& e : entries) {
      if (!app.got_subcommand(e.name)) continue;
      const std::string dir = !out.empty() ? out : e.dir == 0 ? config.data_dir : e.dir == 1 ? config.model_dir : config.out_dir;
      if (e.dir == 0) config.data_dir = dir;
      if (e.dir == 1) config.model_dir = dir;
      if (e.dir == 2) config.out_dir = dir;
      std::cout << e.fn(config, dir, log).string() << "\n";
    }
  } catch (const advobs::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return 2;
  } catch (const advobs::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  }
  return 0;
}
