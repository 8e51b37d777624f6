#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbias/config.hpp"
#include "attnbias/table.hpp"

namespace attnbias {

struct Check {
  std::string name;
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct EngineResult {
  std::string engine;
  std::vector<Table> tables;
  nlohmann::json report;  // written as <engine>/report.json
  std::vector<Check> checks;
  double seconds = 0.0;   // wall time; kept out of result files

  bool pass() const;
};

EngineResult run_rpe_engine(const ExperimentConfig& cfg);
EngineResult run_rope_engine(const ExperimentConfig& cfg);
EngineResult run_popularity_engine(const ExperimentConfig& cfg);
EngineResult run_latent_engine(const ExperimentConfig& cfg);
EngineResult run_retrain_engine(const ExperimentConfig& cfg);
/// Catalog and constrained-decoding self checks; run by `accept`.
EngineResult run_generative_engine(const ExperimentConfig& cfg);

/// Dispatch by name; also accepts "generative". Throws std::invalid_argument
/// for anything else.
EngineResult run_engine(const std::string& name, const ExperimentConfig& cfg);

std::vector<std::string> engine_names();

struct RunManifest {
  std::string config_hash;
  std::string version;
  std::uint64_t seed = 0;
  std::string started;   // UTC, ISO 8601
  std::string finished;
  std::vector<std::string> files;  // relative to the output dir

  nlohmann::json to_json() const;
};

struct RunResult {
  RunManifest manifest;
  std::vector<EngineResult> engines;

  bool pass() const;
};

/// Runs every requested engine (plus `extra_engines`), writes
/// <out>/<engine>/*.csv, <out>/<engine>/report.json, <out>/verdict.json and
/// <out>/manifest.json. Result files depend only on the config minus
/// threads and output_dir. On DivergenceError a diagnostic.json is written
/// before rethrowing.
RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& extra_engines = {});

inline constexpr std::uint64_t kAcceptanceSeed = 20261014;

/// Config used by `attnbias accept`: every engine at acceptance sizes.
ExperimentConfig acceptance_config(std::uint64_t seed = kAcceptanceSeed);

std::string artifact_version();

}  // namespace attnbias
