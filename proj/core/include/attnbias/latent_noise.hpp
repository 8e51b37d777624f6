#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbias/attention.hpp"
#include "attnbias/rng.hpp"

namespace attnbias {

// Per-position logit standard deviations. Positions are 0-based here.
struct NoiseSpec {
  std::vector<double> sigmas;

  void validate() const;  // T >= 2, every sigma finite and >= 0
  std::size_t size() const { return sigmas.size(); }
};

/// Z_j ~ N(0, sigma_j^2) independently; returns softmax(Z). The logits are
/// written to `logits` when it is non-null.
WeightVector sample_attention(const NoiseSpec& spec, CounterRng& rng, Vector* logits = nullptr);

/// log p_j - log p_k. Throws std::domain_error on j == k, a bad index or a
/// nonpositive weight.
double log_odds(std::span<const double> weights, std::size_t j, std::size_t k);

/// exp((sigma_j^2 + sigma_k^2) / 2).
double expected_odds(double sigma_j, double sigma_k);

/// 1 - Phi(log c / sqrt(sigma_j^2 + sigma_k^2)). Needs c > 1 and a nonzero
/// total variance.
double dominance_probability(double c, double sigma_j, double sigma_k);

/// Standard normal CDF through erfc.
double normal_cdf(double x);

struct MomentReport {
  int n_draws = 0;
  std::size_t j = 0, k = 1;
  double sigma_j = 0.0, sigma_k = 0.0;

  double empirical_mean = 0.0;
  double empirical_var = 0.0;
  double predicted_mean = 0.0;
  double predicted_var = 0.0;
  double mean_z = 0.0;
  double var_z = 0.0;

  double tail_c = 2.0;
  double tail_empirical = 0.0;
  double tail_predicted = 0.0;
  double tail_se = 0.0;
  double tail_z = 0.0;

  double ratio_mean = 0.0;
  double ratio_predicted = 1.0;
  double ratio_rel_err = 0.0;
  bool ratio_checked = false;  // only for sigma_j, sigma_k <= 1

  bool pass = false;
};

inline constexpr double kRatioCheckSigmaMax = 1.0;
inline constexpr double kRatioRelTol = 0.05;

/// n_draws >= 100 samples of the log odds between positions j and k. Draw i
/// uses CounterRng::stream(seed, latent, i).
MomentReport mc_moments(const NoiseSpec& spec, std::size_t j, std::size_t k, int n_draws, std::uint64_t seed,
                        double tail_c = 2.0, unsigned threads = 1);

nlohmann::json to_json(const MomentReport& report);

}  // namespace attnbias
