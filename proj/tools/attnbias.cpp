// attnbias: run experiment configs and the acceptance grid.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "attnbias/config.hpp"
#include "attnbias/experiment.hpp"
#include "attnbias/popularity.hpp"

namespace {

enum Exit { kPass = 0, kVerdictFail = 1, kConfigError = 2, kRuntimeError = 3 };

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("ATTNBIAS_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (errno != 0 || *end != '\0' || *s == '-') {
    throw attnbias::ConfigError({{0, "ATTNBIAS_SEED", "expected an unsigned 64-bit integer"}});
  }
  return v;
}

void print_verdicts(const attnbias::RunResult& run, const std::string& out) {
  for (const auto& e : run.engines) {
    std::cout << (e.pass() ? "PASS " : "FAIL ") << e.engine << "\n";
    for (const auto& c : e.checks) {
      std::cout << "  " << (c.pass ? "ok   " : "FAIL ") << c.name << " (" << c.value << " vs " << c.threshold << ")\n";
    }
  }
  std::cout << "results: " << out << "\n";
}

int run_and_report(attnbias::ExperimentConfig cfg, const std::vector<std::string>& extra) {
  const attnbias::RunResult run = attnbias::run_experiment(cfg, extra);
  print_verdicts(run, cfg.output_dir);
  return run.pass() ? kPass : kVerdictFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention bias experiments"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run the experiments described by a config file");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> replicas;
  std::optional<int> threads;
  run->add_option("config", config_path, "key = value config file")->required();
  run->add_option("--seed", seed, "Override the seed (beats ATTNBIAS_SEED and the config)");
  run->add_option("--out", out, "Output directory");
  run->add_option("--replicas", replicas, "Override Monte Carlo replica counts")->check(CLI::Range(100, 100000000));
  run->add_option("--threads", threads, "Worker threads")->check(CLI::Range(1, 1024));

  auto* accept = app.add_subcommand("accept", "Run the full acceptance grid");
  std::optional<std::uint64_t> accept_seed;
  std::string accept_out = "acceptance";
  int accept_threads = 1;
  accept->add_option("--seed", accept_seed, "Seed (default: fixed acceptance seed)");
  accept->add_option("--out", accept_out, "Output directory");
  accept->add_option("--threads", accept_threads, "Worker threads")->check(CLI::Range(1, 1024));

  app.add_subcommand("list-engines", "List experiment engines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kPass : kConfigError;
  }

  try {
    if (app.got_subcommand("list-engines")) {
      for (const auto& name : attnbias::engine_names()) std::cout << name << "\n";
      return kPass;
    }
    if (app.got_subcommand("accept")) {
      const std::uint64_t s = accept_seed ? *accept_seed : env_seed().value_or(attnbias::kAcceptanceSeed);
      attnbias::ExperimentConfig cfg = attnbias::acceptance_config(s);
      cfg.output_dir = accept_out;
      cfg.threads = accept_threads;
      return run_and_report(cfg, {"generative"});
    }

    std::ifstream in(config_path, std::ios::binary);
    if (!in) {
      std::cerr << "error: cannot read " << config_path << "\n";
      return kConfigError;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    attnbias::ExperimentConfig cfg = attnbias::parse_config(buf.str());
    if (seed) cfg.seed = *seed;
    else if (auto s = env_seed()) cfg.seed = *s;
    if (out) cfg.output_dir = *out;
    if (replicas) cfg.replicas = *replicas;
    if (threads) cfg.threads = *threads;
    return run_and_report(cfg, {});
  } catch (const attnbias::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kConfigError;
  } catch (const attnbias::DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}
