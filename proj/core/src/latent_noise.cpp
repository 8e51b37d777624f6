#include "attnbias/latent_noise.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

#include "attnbias/parallel.hpp"

namespace attnbias {

namespace {

double z_score(double diff, double se) {
  if (se > 0.0) return diff / se;
  return std::abs(diff) <= 1e-15 ? 0.0 : std::numeric_limits<double>::infinity();
}

}  // namespace

void NoiseSpec::validate() const {
  if (sigmas.size() < 2) throw std::domain_error("NoiseSpec: need at least two positions");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!std::isfinite(sigmas[i]) || sigmas[i] < 0.0) {
      throw std::domain_error("NoiseSpec: sigma[" + std::to_string(i) + "] must be finite and nonnegative");
    }
  }
}

WeightVector sample_attention(const NoiseSpec& spec, CounterRng& rng, Vector* logits) {
  spec.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(spec.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    // sigma = 0 must give an exact zero logit, not 0 * draw.
    z[i] = spec.sigmas[i] > 0.0 ? spec.sigmas[i] * normal(rng) : 0.0;
  }
  WeightVector w = softmax(z);
  if (logits) *logits = std::move(z);
  return w;
}

double log_odds(std::span<const double> weights, std::size_t j, std::size_t k) {
  if (j == k) throw std::domain_error("log_odds: j and k must differ");
  if (j >= weights.size() || k >= weights.size()) throw std::domain_error("log_odds: index out of range");
  if (!(weights[j] > 0.0) || !(weights[k] > 0.0)) throw std::domain_error("log_odds: zero weight");
  return std::log(weights[j]) - std::log(weights[k]);
}

double expected_odds(double sigma_j, double sigma_k) {
  if (sigma_j < 0.0 || sigma_k < 0.0) throw std::domain_error("expected_odds: negative sigma");
  return std::exp(0.5 * (sigma_j * sigma_j + sigma_k * sigma_k));
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double dominance_probability(double c, double sigma_j, double sigma_k) {
  if (!(c > 1.0)) throw std::domain_error("dominance_probability: need c > 1");
  if (sigma_j < 0.0 || sigma_k < 0.0) throw std::domain_error("dominance_probability: negative sigma");
  const double var = sigma_j * sigma_j + sigma_k * sigma_k;
  if (var == 0.0) throw std::domain_error("dominance_probability: degenerate noise (both sigma zero)");
  return 1.0 - normal_cdf(std::log(c) / std::sqrt(var));
}

MomentReport mc_moments(const NoiseSpec& spec, std::size_t j, std::size_t k, int n_draws, std::uint64_t seed,
                        double tail_c, unsigned threads) {
  spec.validate();
  if (n_draws < 100) throw std::domain_error("mc_moments: need at least 100 draws");
  if (j == k || j >= spec.size() || k >= spec.size()) throw std::domain_error("mc_moments: bad position pair");
  if (!(tail_c > 1.0)) throw std::domain_error("mc_moments: tail threshold must exceed 1");

  std::vector<double> xs(static_cast<std::size_t>(n_draws));
  parallel_for(xs.size(), threads, [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(seed, EngineId::latent, i);
    const WeightVector w = sample_attention(spec, rng);
    xs[i] = log_odds(w, j, k);
  });

  MomentReport r;
  r.n_draws = n_draws;
  r.j = j;
  r.k = k;
  r.sigma_j = spec.sigmas[j];
  r.sigma_k = spec.sigmas[k];
  r.tail_c = tail_c;
  const double n = n_draws;

  double sum = 0.0, ratio_sum = 0.0, hits = 0.0;
  const double log_c = std::log(tail_c);
  for (double x : xs) {
    sum += x;
    ratio_sum += std::exp(x);
    if (x >= log_c) hits += 1.0;
  }
  r.empirical_mean = sum / n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : xs) {
    const double dx = x - r.empirical_mean;
    m2 += dx * dx;
    m4 += dx * dx * dx * dx;
  }
  r.empirical_var = m2 / (n - 1.0);
  m4 /= n;

  r.predicted_var = r.sigma_j * r.sigma_j + r.sigma_k * r.sigma_k;
  r.mean_z = z_score(r.empirical_mean - r.predicted_mean, std::sqrt(r.empirical_var / n));
  const double var_se = std::sqrt(std::max(0.0, m4 - (m2 / n) * (m2 / n)) / n);
  r.var_z = z_score(r.empirical_var - r.predicted_var, var_se);

  r.tail_empirical = hits / n;
  r.tail_predicted = r.predicted_var > 0.0 ? dominance_probability(tail_c, r.sigma_j, r.sigma_k) : 0.0;
  r.tail_se = std::sqrt(r.tail_predicted * (1.0 - r.tail_predicted) / n);
  r.tail_z = z_score(r.tail_empirical - r.tail_predicted, r.tail_se);

  r.ratio_mean = ratio_sum / n;
  r.ratio_predicted = expected_odds(r.sigma_j, r.sigma_k);
  r.ratio_rel_err = std::abs(r.ratio_mean - r.ratio_predicted) / r.ratio_predicted;
  r.ratio_checked = r.sigma_j <= kRatioCheckSigmaMax && r.sigma_k <= kRatioCheckSigmaMax;

  r.pass = std::abs(r.mean_z) <= 3.0 && std::abs(r.var_z) <= 3.0 && std::abs(r.tail_z) <= 3.0 &&
           (!r.ratio_checked || r.ratio_rel_err <= kRatioRelTol);
  return r;
}

nlohmann::json to_json(const MomentReport& r) {
  return nlohmann::json{
      {"n_draws", r.n_draws},
      {"j", r.j},
      {"k", r.k},
      {"sigma_j", r.sigma_j},
      {"sigma_k", r.sigma_k},
      {"empirical_mean", r.empirical_mean},
      {"empirical_var", r.empirical_var},
      {"predicted_mean", r.predicted_mean},
      {"predicted_var", r.predicted_var},
      {"mean_z", r.mean_z},
      {"var_z", r.var_z},
      {"tail_c", r.tail_c},
      {"tail_empirical", r.tail_empirical},
      {"tail_predicted", r.tail_predicted},
      {"tail_se", r.tail_se},
      {"tail_z", r.tail_z},
      {"ratio_mean", r.ratio_mean},
      {"ratio_predicted", r.ratio_predicted},
      {"ratio_rel_err", r.ratio_rel_err},
      {"ratio_checked", r.ratio_checked},
      {"pass", r.pass},
  };
}

}  // namespace attnbias
