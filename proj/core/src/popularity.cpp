#include "attnbias/popularity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "attnbias/parallel.hpp"

namespace attnbias {

namespace {

double inv_sqrt(std::size_t d) { return 1.0 / std::sqrt(static_cast<double>(d)); }

void check_params(const HeadParams& params, const TokenStats& stats) {
  if (params.mu.rows() != stats.tokens() || params.mu.cols() != stats.dim()) {
    throw std::domain_error("popularity: parameter shape differs from token statistics");
  }
}

void check_query(std::span<const double> query, const TokenStats& stats) {
  if (query.size() != stats.dim()) throw std::domain_error("popularity: query length differs from d");
}

void check_config(const TrainConfig& cfg, const TokenStats& stats) {
  if (cfg.dim != static_cast<int>(stats.dim())) throw std::domain_error("TrainConfig: dim differs from w_h length");
  if (!(cfg.eta >= 0.0)) throw std::domain_error("TrainConfig: eta must be nonnegative");
  if (cfg.steps < 0) throw std::domain_error("TrainConfig: steps must be nonnegative");
  if (!(cfg.query_bound > 0.0)) throw std::domain_error("TrainConfig: query bound must be positive");
  if (!(cfg.query_noise_std >= 0.0)) throw std::domain_error("TrainConfig: query noise must be nonnegative");
}

double z_score(double diff, double se) {
  if (se > 0.0) return diff / se;
  return std::abs(diff) <= 1e-15 ? 0.0 : std::numeric_limits<double>::infinity();
}

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& xs) {
  MeanSe out;
  const double n = static_cast<double>(xs.size());
  for (double x : xs) out.mean += x;
  out.mean /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - out.mean) * (x - out.mean);
  out.se = xs.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  return out;
}

// Difference w_h - w-bar.
Vector centered_mean(const TokenStats& stats, std::size_t h) {
  const Vector wbar = stats.mean_query();
  Vector v(stats.dim());
  const auto w = stats.cond_query_mean(h);
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = w[c] - wbar[c];
  return v;
}

}  // namespace

// -------------------------------------------------------------- TokenStats

TokenStats::TokenStats(std::vector<int> counts, Matrix cond_query_means)
    : counts_(std::move(counts)), means_(std::move(cond_query_means)) {
  if (counts_.empty()) throw std::domain_error("TokenStats: no tokens");
  if (means_.rows() != counts_.size() || means_.cols() == 0) {
    throw std::domain_error("TokenStats: need one conditional query mean per token");
  }
  for (int c : counts_) {
    if (c < 0) throw std::domain_error("TokenStats: counts must be nonnegative");
    total_ += c;
  }
  if (total_ == 0) throw std::domain_error("TokenStats: all counts are zero");
  for (int c : counts_) freqs_.push_back(static_cast<double>(c) / total_);
}

Vector TokenStats::mean_query() const {
  Vector wbar(dim(), 0.0);
  for (std::size_t h = 0; h < tokens(); ++h) {
    const auto w = means_.row(h);
    for (std::size_t c = 0; c < wbar.size(); ++c) wbar[c] += freqs_[h] * w[c];
  }
  return wbar;
}

HeadParams HeadParams::symmetric(std::size_t tokens, std::span<const double> init) {
  HeadParams p{Matrix(tokens, init.size())};
  for (std::size_t h = 0; h < tokens; ++h) std::copy(init.begin(), init.end(), p.mu.row(h).begin());
  return p;
}

// ------------------------------------------------------------- exposure

Vector token_exposure(std::span<const double> query, const HeadParams& params, const TokenStats& stats) {
  check_query(query, stats);
  check_params(params, stats);
  const double scale = inv_sqrt(stats.dim());
  Vector z(stats.tokens());
  double shift = -std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < z.size(); ++h) {
    z[h] = dot(query, params.mu.row(h)) * scale;
    if (stats.count(h) > 0) shift = std::max(shift, z[h]);
  }
  Vector m(z.size(), 0.0);
  double total = 0.0;
  for (std::size_t h = 0; h < z.size(); ++h) {
    if (stats.count(h) == 0) continue;
    m[h] = stats.count(h) * std::exp(z[h] - shift);
    total += m[h];
  }
  for (double& x : m) x /= total;
  return m;
}

double surrogate_loss(std::span<const double> query, std::size_t label, const HeadParams& params,
                      const TokenStats& stats) {
  if (label >= stats.tokens()) throw std::domain_error("surrogate_loss: unknown label");
  return -std::log(token_exposure(query, params, stats)[label]);
}

Matrix surrogate_gradient(std::span<const double> query, std::size_t label, const HeadParams& params,
                          const TokenStats& stats) {
  if (label >= stats.tokens()) throw std::domain_error("surrogate_gradient: unknown label");
  const Vector m = token_exposure(query, params, stats);
  const double scale = inv_sqrt(stats.dim());
  Matrix g(stats.tokens(), stats.dim());
  for (std::size_t h = 0; h < stats.tokens(); ++h) {
    const double coef = (m[h] - (h == label ? 1.0 : 0.0)) * scale;
    auto row = g.row(h);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = coef * query[c];
  }
  return g;
}

double exposure_ratio(std::span<const double> query, const HeadParams& params, const TokenStats& stats,
                      std::size_t h, std::size_t h_prime) {
  const Vector m = token_exposure(query, params, stats);
  return m.at(h) / m.at(h_prime);
}

// --------------------------------------------------------------- sampling

QueryLabel sample_pair(const TokenStats& stats, const TrainConfig& cfg, CounterRng& rng) {
  std::discrete_distribution<std::size_t> label_dist(stats.freqs().begin(), stats.freqs().end());
  std::normal_distribution<double> noise(0.0, 1.0);
  QueryLabel out;
  out.label = label_dist(rng);
  const auto w = stats.cond_query_mean(out.label);
  out.query.assign(w.begin(), w.end());
  if (cfg.query_noise_std > 0.0) {
    for (double& x : out.query) x += cfg.query_noise_std * noise(rng);
  }
  const double n = norm(out.query);
  if (n > cfg.query_bound) {
    for (double& x : out.query) x *= cfg.query_bound / n;
  }
  return out;
}

// -------------------------------------------------------------------- SGD

Trajectory sgd_run(const TokenStats& stats, const TrainConfig& cfg, const HeadParams& init, CounterRng& rng) {
  check_config(cfg, stats);
  check_params(init, stats);
  Trajectory traj;
  traj.snapshots.push_back({0, init.mu});
  HeadParams params = init;
  for (int n = 0; n < cfg.steps; ++n) {
    const QueryLabel pair = sample_pair(stats, cfg, rng);
    const Matrix g = surrogate_gradient(pair.query, pair.label, params, stats);
    for (std::size_t h = 0; h < stats.tokens(); ++h) {
      auto mu = params.mu.row(h);
      const auto gh = g.row(h);
      for (std::size_t c = 0; c < mu.size(); ++c) {
        mu[c] -= cfg.eta * gh[c];
        if (!std::isfinite(mu[c])) {
          throw DivergenceError("sgd_run: non-finite parameter for token " + std::to_string(h) + " at step " +
                                std::to_string(n + 1));
        }
      }
    }
    const int step = n + 1;
    if (step == cfg.steps || (cfg.snapshot_stride > 0 && step % cfg.snapshot_stride == 0)) {
      traj.snapshots.push_back({step, params.mu});
    }
  }
  return traj;
}

// ------------------------------------------------------------ early drift

DriftReport early_drift_check(const TokenStats& stats, const TrainConfig& cfg, std::span<const double> init,
                              int replicas, std::uint64_t seed, unsigned threads) {
  check_config(cfg, stats);
  if (replicas < 2) throw std::domain_error("early_drift_check: need at least two replicas");
  const HeadParams start = HeadParams::symmetric(stats.tokens(), init);
  const std::size_t H = stats.tokens(), d = stats.dim();

  std::vector<Matrix> steps(static_cast<std::size_t>(replicas));
  parallel_for(steps.size(), threads, [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(seed, EngineId::popularity, i);
    const QueryLabel pair = sample_pair(stats, cfg, rng);
    Matrix g = surrogate_gradient(pair.query, pair.label, start, stats);
    for (std::size_t h = 0; h < H; ++h) {
      for (double& x : g.row(h)) x *= -cfg.eta;
    }
    steps[i] = std::move(g);
  });

  DriftReport report;
  report.replicas = replicas;
  const double scale = inv_sqrt(d);
  for (std::size_t h = 0; h < H; ++h) {
    TokenDrift t;
    const Vector dir = centered_mean(stats, h);
    t.direction_norm = norm(dir);
    t.predicted.resize(d);
    for (std::size_t c = 0; c < d; ++c) t.predicted[c] = cfg.eta * stats.freq(h) * scale * dir[c];

    t.empirical_mean.assign(d, 0.0);
    bool components_ok = true;
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<double> xs;
      xs.reserve(steps.size());
      for (const Matrix& s : steps) xs.push_back(s(h, c));
      const MeanSe ms = mean_se(xs);
      t.empirical_mean[c] = ms.mean;
      t.component_z.push_back(z_score(ms.mean - t.predicted[c], ms.se));
      components_ok = components_ok && std::abs(t.component_z.back()) <= 3.0;
    }

    if (t.direction_norm > 0.0) {
      std::vector<double> proj;
      proj.reserve(steps.size());
      for (const Matrix& s : steps) proj.push_back(dot(s.row(h), dir) / t.direction_norm);
      const MeanSe ms = mean_se(proj);
      t.projected = ms.mean;
      t.projected_se = ms.se;
      t.projected_predicted = cfg.eta * stats.freq(h) * scale * t.direction_norm;
      t.projected_z = z_score(t.projected - t.projected_predicted, t.projected_se);
      t.rate = t.projected / t.direction_norm;
      t.rate_se = t.projected_se / t.direction_norm;
      t.rate_predicted = cfg.eta * stats.freq(h) * scale;
      report.pass = report.pass && std::abs(t.projected_z) <= 3.0;
    } else {
      report.pass = report.pass && components_ok;
    }
    report.tokens.push_back(std::move(t));
  }
  return report;
}

// -------------------------------------------------------- amplification

double residual_estimate(const std::vector<Trajectory>& runs, const TokenStats& stats, const TrainConfig& cfg) {
  if (runs.empty()) throw std::domain_error("residual_estimate: no runs");
  const std::size_t H = stats.tokens(), d = stats.dim();
  const Matrix& init = runs.front().snapshots.front().mu;
  const double steps = runs.front().snapshots.back().step;
  Matrix mean(H, d);
  for (const Trajectory& run : runs) {
    const Matrix& mu = run.final_params();
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t c = 0; c < d; ++c) mean(h, c) += mu(h, c) / static_cast<double>(runs.size());
    }
  }
  double xi = 0.0;
  for (std::size_t h = 0; h < H; ++h) {
    const Vector dir = centered_mean(stats, h);
    const double coef = cfg.eta * steps * stats.freq(h) * inv_sqrt(d);
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dev = mean(h, c) - (init(h, c) + coef * dir[c]);
      ss += dev * dev;
    }
    xi = std::max(xi, std::sqrt(ss));
  }
  return xi;
}

ARReport amplification_ratio(std::span<const double> test_query, const TokenStats& stats, const TrainConfig& cfg,
                             std::pair<std::size_t, std::size_t> pair, std::span<const double> init, int seeds,
                             std::uint64_t seed, unsigned threads) {
  check_config(cfg, stats);
  check_query(test_query, stats);
  const auto [h, hp] = pair;
  if (h >= stats.tokens() || hp >= stats.tokens()) throw std::domain_error("amplification_ratio: unknown token");
  if (stats.count(h) == 0 || stats.count(hp) == 0) {
    throw std::domain_error("amplification_ratio: both tokens need nonzero frequency");
  }
  if (seeds < 1) throw std::domain_error("amplification_ratio: need at least one seed");

  const HeadParams start = HeadParams::symmetric(stats.tokens(), init);
  std::vector<Trajectory> runs(static_cast<std::size_t>(seeds));
  parallel_for(runs.size(), threads, [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(seed, EngineId::popularity, i);
    runs[i] = sgd_run(stats, cfg, start, rng);
  });

  ARReport report;
  report.seeds = seeds;
  const std::size_t d = stats.dim();
  const double scale = inv_sqrt(d);
  double sum = 0.0;
  for (const Trajectory& run : runs) {
    const Matrix& mu = run.final_params();
    double gap = 0.0;
    for (std::size_t c = 0; c < d; ++c) gap += test_query[c] * (mu(h, c) - mu(hp, c));
    // Frequencies cancel analytically in (M_h / M_h') / (p_h / p_h').
    sum += std::exp(gap * scale);
    report.exposure_ratios.push_back(exposure_ratio(test_query, HeadParams{mu}, stats, h, hp));
  }
  report.ar_estimate = sum / seeds;
  report.xi_estimate = residual_estimate(runs, stats, cfg);

  const Vector dh = centered_mean(stats, h);
  const Vector dhp = centered_mean(stats, hp);
  double lead = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    lead += test_query[c] * (stats.freq(h) * dh[c] - stats.freq(hp) * dhp[c]);
  }
  report.leading_exponent = cfg.eta * cfg.steps / static_cast<double>(d) * lead;
  report.lower_bound = std::exp(report.leading_exponent - 2.0 * report.xi_estimate * norm(test_query) * scale);
  report.pass = report.ar_estimate >= report.lower_bound;
  return report;
}

}  // namespace attnbias
