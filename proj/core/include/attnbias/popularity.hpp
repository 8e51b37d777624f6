#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "attnbias/matrix.hpp"
#include "attnbias/rng.hpp"

namespace attnbias {

// Per-token history statistics: occurrence counts |S_h| (p_h = |S_h| / T)
// and conditional query means w_h (one row per token).
class TokenStats {
 public:
  TokenStats(std::vector<int> counts, Matrix cond_query_means);

  std::size_t tokens() const { return counts_.size(); }
  std::size_t dim() const { return means_.cols(); }
  int history_length() const { return total_; }

  int count(std::size_t h) const { return counts_[h]; }
  double freq(std::size_t h) const { return freqs_[h]; }
  const std::vector<double>& freqs() const { return freqs_; }
  std::span<const double> cond_query_mean(std::size_t h) const { return means_.row(h); }
  const Matrix& cond_query_means() const { return means_; }

  /// w-bar = sum_h p_h w_h.
  Vector mean_query() const;

 private:
  std::vector<int> counts_;
  std::vector<double> freqs_;
  Matrix means_;
  int total_ = 0;
};

// Shared key parameters mu_h, one row per token.
struct HeadParams {
  Matrix mu;

  static HeadParams symmetric(std::size_t tokens, std::span<const double> init);
};

struct TrainConfig {
  double eta = 0.05;
  int steps = 500;  // N-hat
  int dim = 8;
  double query_bound = 10.0;  // B_q
  double query_noise_std = 0.1;
  int snapshot_stride = 0;  // 0: keep only the initial and final iterate
};

struct QueryLabel {
  Vector query;
  std::size_t label = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// M_h = |S_h| e^{<q,mu_h>/sqrt d} / sum_h' |S_h'| e^{<q,mu_h'>/sqrt d}.
Vector token_exposure(std::span<const double> query, const HeadParams& params, const TokenStats& stats);

/// -log M_label(q). Throws std::domain_error for an unknown label.
double surrogate_loss(std::span<const double> query, std::size_t label, const HeadParams& params,
                      const TokenStats& stats);

/// Row h holds (M_h(q) - 1{h = label}) q / sqrt(d).
Matrix surrogate_gradient(std::span<const double> query, std::size_t label, const HeadParams& params,
                          const TokenStats& stats);

/// Label ~ p, query = w_label + N(0, sigma_q^2 I), rescaled onto the ball of
/// radius B_q if it falls outside.
QueryLabel sample_pair(const TokenStats& stats, const TrainConfig& cfg, CounterRng& rng);

struct Snapshot {
  int step = 0;
  Matrix mu;
};

struct Trajectory {
  std::vector<Snapshot> snapshots;  // first = init, last = step N-hat

  const Matrix& final_params() const { return snapshots.back().mu; }
};

/// mu <- mu - eta * grad for N-hat steps. Throws DivergenceError on a
/// non-finite iterate.
Trajectory sgd_run(const TokenStats& stats, const TrainConfig& cfg, const HeadParams& init, CounterRng& rng);

struct TokenDrift {
  Vector empirical_mean;  // mean of mu^(1) - mu^(0)
  Vector predicted;       // (eta p_h / sqrt d)(w_h - w-bar)
  double direction_norm = 0.0;  // ||w_h - w-bar||
  // Projection onto the unit direction (w_h - w-bar)/||w_h - w-bar||.
  double projected = 0.0;
  double projected_se = 0.0;
  double projected_predicted = 0.0;
  double projected_z = 0.0;
  // Coefficient c in proj = c (w_h - w-bar); predicted eta p_h / sqrt d.
  double rate = 0.0;
  double rate_se = 0.0;
  double rate_predicted = 0.0;
  std::vector<double> component_z;
};

struct DriftReport {
  int replicas = 0;
  std::vector<TokenDrift> tokens;
  bool pass = true;  // every |projected_z| <= 3
};

/// One SGD step from a common init, repeated over independent replicas.
/// Replica i uses CounterRng::stream(seed, popularity, i).
DriftReport early_drift_check(const TokenStats& stats, const TrainConfig& cfg, std::span<const double> init,
                              int replicas, std::uint64_t seed, unsigned threads = 1);

struct ARReport {
  double ar_estimate = 0.0;
  double lower_bound = 0.0;
  double leading_exponent = 0.0;  // (eta N / d) <q, p_h(w_h - wbar) - p_h'(w_h' - wbar)>
  double xi_estimate = 0.0;
  int seeds = 0;
  bool pass = false;  // ar_estimate >= lower_bound
  std::vector<double> exposure_ratios;  // M_h / M_h' per seed
};

/// AR(h, h') at the final iterate of `seeds` independent runs from a common
/// init, plus the exponential lower bound evaluated with the measured xi.
ARReport amplification_ratio(std::span<const double> test_query, const TokenStats& stats, const TrainConfig& cfg,
                             std::pair<std::size_t, std::size_t> pair, std::span<const double> init, int seeds,
                             std::uint64_t seed, unsigned threads = 1);

/// xi = max_h || mean_r mu_h^(N) - (mu^(0) + (eta N p_h / sqrt d)(w_h - w-bar)) ||
/// over the final iterates of the given runs.
double residual_estimate(const std::vector<Trajectory>& runs, const TokenStats& stats, const TrainConfig& cfg);

/// Ratio identity M_h / M_h' = (p_h/p_h') exp(<q, mu_h - mu_h'>/sqrt d).
double exposure_ratio(std::span<const double> query, const HeadParams& params, const TokenStats& stats,
                      std::size_t h, std::size_t h_prime);

}  // namespace attnbias
