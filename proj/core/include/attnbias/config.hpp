#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attnbias {

struct RpeEngineConfig {
  int instances = 100;
  int T = 16;
  int d = 8;
  int window = 4;  // near window = last `window` history positions
  double alpha_min = 0.0;
  double alpha_max = 5.0;
  double alpha_step = 0.1;
  std::vector<std::string> distances{"alibi", "log-decay"};
  double fd_step = 1e-5;
  double fd_rel_tol = 1e-6;

  bool operator==(const RpeEngineConfig&) const = default;
};

struct RopeEngineConfig {
  int bands = 100;
  int R = 4;
  int T = 16;
  int window = 4;
  double base = 10000.0;  // omega_r = base^{-(r-1)/R}
  int theta_points = 51;
  int reconstruct_vectors = 1000;
  double reconstruct_tol = 1e-12;
  // Free sweep outside the small-angle regime: [0, free_multiple * bound].
  double free_multiple = 20.0;
  int free_points = 401;
  int search_limit = 1000;

  bool operator==(const RopeEngineConfig&) const = default;
};

struct PopularityEngineConfig {
  std::vector<double> p{0.8, 0.2};
  int dim = 8;
  double noise = 0.1;
  double query_bound = 10.0;
  double drift_eta = 0.01;
  int drift_replicas = 10000;
  double eta = 0.05;
  int steps = 500;
  int seeds = 20;
  int fd_instances = 1000;
  double fd_rel_tol = 1e-6;

  bool operator==(const PopularityEngineConfig&) const = default;
};

struct LatentEngineConfig {
  std::vector<double> sigmas{0.3, 0.6, 1.0};
  int draws = 100000;
  double tail_c = 2.0;

  bool operator==(const LatentEngineConfig&) const = default;
};

struct RetrainEngineConfig {
  std::vector<double> p0{0.25, 0.25, 0.25, 0.25};
  int N = 10;
  int N_hat = 10;
  int rounds = 20;
  int replicas = 2000;
  bool stress = true;
  bool fresh_organic = false;

  bool operator==(const RetrainEngineConfig&) const = default;
};

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"positional-rpe", "positional-rope", "popularity", "latent", "retrain",
                                              "all"};
  return names;
}

struct ExperimentConfig {
  std::string experiment = "all";
  std::uint64_t seed = 0;
  std::optional<int> replicas;  // overrides every engine's replica count
  int threads = 1;
  std::string output_dir = "results";

  RpeEngineConfig rpe;
  RopeEngineConfig rope;
  PopularityEngineConfig popularity;
  LatentEngineConfig latent;
  RetrainEngineConfig retrain;

  bool operator==(const ExperimentConfig&) const = default;

  /// Engines to run, in fixed order.
  std::vector<std::string> engines() const;
};

struct ConfigIssue {
  int line = 0;
  std::string key;
  std::string message;
};

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<ConfigIssue> issues);

  const std::vector<ConfigIssue>& issues() const { return issues_; }

 private:
  std::vector<ConfigIssue> issues_;
};

/// Flat `key = value` lines, `#` comments, optional `[section]` prefixes.
/// Collects every problem before throwing ConfigError. `experiment` and
/// `seed` are required.
ExperimentConfig parse_config(std::string_view text);

/// Canonical `key = value` text, keys sorted. parse_config(canonical(c)) == c.
std::string canonical_text(const ExperimentConfig& cfg);

/// FNV-1a 64 over the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Every recognized key.
std::vector<std::string> config_keys();

std::size_t edit_distance(std::string_view a, std::string_view b);

}  // namespace attnbias
