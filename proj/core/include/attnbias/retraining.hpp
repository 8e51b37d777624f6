#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnbias/matrix.hpp"
#include "attnbias/rng.hpp"

namespace attnbias {

// One context of the closed loop. The retrained model is the empirical
// histogram of its training data (frequency matching), so no classifier is
// fitted here.
struct RetrainContext {
  std::vector<double> p0;  // ground-truth distribution over s options
  int organic_n = 10;      // N
  int delegated_n = 10;    // N-hat
  // false: the N organic draws of round 1 are kept as the organic part of
  // every later round. true: redraw them each round.
  bool fresh_organic = false;

  void validate() const;  // s >= 2, p0 sums to 1 within 1e-12, N, N-hat > 1
  std::size_t options() const { return p0.size(); }
};

struct ClosedFormParams {
  double alpha = 0.0;
  double beta = 0.0;
  double s0 = 0.0;
  double n = 0.0;

  static ClosedFormParams from_context(const RetrainContext& ctx);
};

struct RoundState {
  std::vector<int> counts;
  std::vector<int> organic_counts;
  int round = 0;
  int total = 0;

  std::vector<double> p() const;
};

/// N-hat / (N + N-hat). Throws std::domain_error for N <= 0 or N-hat < 0.
double delegation_share(int n, int n_hat);

/// sum_k p_k^2.
double concentration(std::span<const double> p);
double concentration(const RoundState& state);

/// Round 1 when `prev` is null, otherwise round prev->round + 1.
RoundState sample_round(const RetrainContext& ctx, const RoundState* prev, CounterRng& rng);

double closed_form_S(const ClosedFormParams& params, int round);

/// The closed form with beta^r dropped. Throws std::domain_error if beta >= 1.
double limit_concentration(const ClosedFormParams& params);

struct RoundStat {
  int round = 0;
  double mc_mean = 0.0;
  double mc_se = 0.0;
  double closed_form = 0.0;
  double z = 0.0;
  std::vector<double> mean_p;      // componentwise mean of p^(r)
  std::vector<double> mean_p_z;    // against p0
};

struct ConcentrationTrajectory {
  int replicas = 0;
  std::vector<RoundStat> rounds;
};

/// Replica i uses CounterRng::stream(seed, retrain, i).
ConcentrationTrajectory run_rounds(const RetrainContext& ctx, int rounds, int replicas, std::uint64_t seed,
                                   unsigned threads = 1);

struct RetrainComparison {
  ConcentrationTrajectory trajectory;
  double max_abs_z = 0.0;
  double max_abs_mean_p_z = 0.0;
  double limit = 0.0;
  bool closed_form_increasing = false;
  bool pass = false;  // max |z| <= 3
};

RetrainComparison mc_vs_closed_form(const RetrainContext& ctx, int rounds, int replicas, std::uint64_t seed,
                                    unsigned threads = 1);

/// {p0, N, N_hat, s}.
nlohmann::json to_json(const RetrainContext& ctx);

}  // namespace attnbias
