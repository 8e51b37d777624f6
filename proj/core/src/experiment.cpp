#include "attnbias/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <limits>
#include <numbers>
#include <random>

#include "attnbias/generative_model.hpp"
#include "attnbias/latent_noise.hpp"
#include "attnbias/parallel.hpp"
#include "attnbias/popularity.hpp"
#include "attnbias/positional_bias.hpp"
#include "attnbias/retraining.hpp"
#include "attnbias/rng.hpp"

#ifndef ATTNBIAS_VERSION
#define ATTNBIAS_VERSION "0.0.0"
#endif

namespace attnbias {

namespace {

// Sub-seed tags.
enum : std::uint64_t {
  kTagDrift = 1,
  kTagAmplification = 2,
  kTagGradient = 3,
  kTagReconstruct = 5,
  kTagCounterexample = 6,
  kTagStress = 100,
  kTagLatentPair = 200,
};

Check make_check(std::string name, bool pass, double value, double threshold, std::string detail = {}) {
  return Check{std::move(name), pass, value, threshold, std::move(detail)};
}

nlohmann::json checks_json(const std::vector<Check>& checks) {
  nlohmann::json out = nlohmann::json::array();
  for (const Check& c : checks) {
    out.push_back({{"name", c.name}, {"pass", c.pass}, {"value", c.value}, {"threshold", c.threshold},
                   {"detail", c.detail}});
  }
  return out;
}

std::vector<double> linspace(double lo, double hi, int points) {
  std::vector<double> out(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) out[i] = lo + (hi - lo) * i / (points - 1);
  out.back() = hi;
  return out;
}

std::vector<double> step_grid(double lo, double hi, double step) {
  const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  std::vector<double> out;
  for (int k = 0; k < n; ++k) out.push_back(std::min(hi, lo + k * step));
  return out;
}

Vector gaussian_vector(std::size_t n, CounterRng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, CounterRng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (double& x : m.row(r)) x = normal(rng);
  }
  return m;
}

std::vector<int> tail_window(int T, int size) {
  std::vector<int> idx;
  for (int j = T - size + 1; j <= T; ++j) idx.push_back(j);
  return idx;
}

std::string join_ints(const std::vector<int>& xs) {
  std::string s;
  for (int x : xs) s += (s.empty() ? "" : " ") + std::to_string(x);
  return s;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

unsigned worker_count(const ExperimentConfig& cfg) { return static_cast<unsigned>(std::max(1, cfg.threads)); }

// ------------------------------------------------------------------ RPE

struct RpeInstance {
  std::string distance;
  std::vector<int> window;
  SweepReport sweep;
  std::vector<double> fd;
  std::vector<double> rel_err;
};

// Relative error of an analytic derivative against a central difference.
double rel_error(double analytic, double fd) {
  const double scale = std::abs(analytic);
  if (scale == 0.0) return std::abs(fd);
  return std::abs(analytic - fd) / scale;
}

}  // namespace

bool EngineResult::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

EngineResult run_rpe_engine(const ExperimentConfig& cfg) {
  const RpeEngineConfig& e = cfg.rpe;
  const DistanceRegistry registry = DistanceRegistry::defaults();
  const std::vector<double> grid = step_grid(e.alpha_min, e.alpha_max, e.alpha_step);
  const int decoder_pos = e.T + 1;

  std::vector<RpeInstance> inst(static_cast<std::size_t>(e.instances));
  parallel_for(inst.size(), worker_count(cfg), [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(cfg.seed, EngineId::positional_rpe, i);
    const Vector q = gaussian_vector(e.d, rng);
    const Matrix keys = gaussian_matrix(e.T, e.d, rng);
    const LogitVector content = scaled_dot_logits(q, keys, e.d);
    std::uniform_int_distribution<int> size_dist(1, e.window);
    RpeInstance& out = inst[i];
    out.distance = e.distances[i % e.distances.size()];
    const DistanceFunction b = registry.make(out.distance);
    out.window = tail_window(e.T, size_dist(rng));
    const NearWindow window = NearWindow::for_rpe(out.window, e.T, b, decoder_pos);
    out.sweep = rpe_monotonicity_sweep(content, window, b, decoder_pos, grid);
    for (const SweepPoint& pt : out.sweep.points) {
      // Near saturation M_S rounds to 1; difference the far mass instead
      // (M_F = 1 - M_S) so the reference keeps its relative precision.
      const bool far = pt.near_mass > 0.5;
      auto mass = [&](double alpha) {
        const WeightVector w = softmax(rpe_logits(content, RpeConfig{alpha, b, decoder_pos}));
        if (!far) return near_mass(w, window);
        double m = 0.0;
        for (int j = 1; j <= e.T; ++j) {
          if (!window.contains(j)) m -= w[j - 1];
        }
        return m;
      };
      const double fd = (mass(pt.grid_value + e.fd_step) - mass(pt.grid_value - e.fd_step)) / (2.0 * e.fd_step);
      out.fd.push_back(fd);
      out.rel_err.push_back(rel_error(pt.derivative, fd));
    }
  });

  EngineResult res;
  res.engine = "positional-rpe";
  Table sweep{"rpe_sweep", {"seed", "distance", "window", "grid_value", "near_mass", "derivative", "fd_derivative",
                            "rel_err", "verdict"}, {}};
  int monotone = 0;
  double max_rel = 0.0, min_increment = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const RpeInstance& r = inst[i];
    if (r.sweep.monotone) ++monotone;
    for (std::size_t k = 0; k < r.sweep.points.size(); ++k) {
      const SweepPoint& pt = r.sweep.points[k];
      sweep.add_row({static_cast<long long>(i), r.distance, join_ints(r.window), pt.grid_value, pt.near_mass,
                     pt.derivative, r.fd[k], r.rel_err[k], std::string(r.sweep.monotone ? "pass" : "fail")});
      max_rel = std::max(max_rel, r.rel_err[k]);
      if (k > 0) min_increment = std::min(min_increment, pt.near_mass - r.sweep.points[k - 1].near_mass);
    }
  }
  res.tables.push_back(std::move(sweep));
  res.checks.push_back(make_check("near mass nondecreasing in alpha", monotone == e.instances, min_increment,
                                  -kMonotoneSlack,
                                  std::to_string(monotone) + "/" + std::to_string(e.instances) + " instances"));
  res.checks.push_back(make_check("derivative matches central difference", max_rel <= e.fd_rel_tol, max_rel,
                                  e.fd_rel_tol));
  res.report = {{"instances", e.instances}, {"T", e.T}, {"d", e.d}, {"grid_points", grid.size()},
                {"monotone_instances", monotone}, {"min_increment", min_increment}, {"max_rel_err", max_rel},
                {"checks", checks_json(res.checks)}};
  return res;
}

// ----------------------------------------------------------------- RoPE

namespace {

RopeConfig rope_config(const RopeEngineConfig& e, double theta) {
  RopeConfig c;
  c.theta = theta;
  c.head_dim = 2 * e.R;
  for (int r = 0; r < e.R; ++r) c.freqs.push_back(std::pow(e.base, -static_cast<double>(r) / e.R));
  std::sort(c.freqs.begin(), c.freqs.end());
  return c;
}

struct Band {
  CoherentBand band;
  std::vector<int> window;
};

Band random_band(const RopeEngineConfig& e, CounterRng& rng) {
  std::uniform_real_distribution<double> amp(0.0, 1.0);
  std::uniform_int_distribution<int> size_dist(1, e.window);
  Band b;
  for (int r = 0; r < e.R; ++r) b.band.amplitudes.push_back(amp(rng));
  // Decoding right after the history: d_j = T + 1 - j.
  for (int j = 1; j <= e.T; ++j) b.band.distances.push_back(e.T + 1 - j);
  b.window = tail_window(e.T, size_dist(rng));
  return b;
}

}  // namespace

EngineResult run_rope_engine(const ExperimentConfig& cfg) {
  const RopeEngineConfig& e = cfg.rope;
  const RopeConfig base_cfg = rope_config(e, 0.0);
  const double bound = small_angle_bound(base_cfg, e.T);
  const std::vector<double> grid = linspace(0.0, bound, e.theta_points);

  std::vector<Band> bands(static_cast<std::size_t>(e.bands));
  std::vector<SweepReport> sweeps(bands.size());
  parallel_for(bands.size(), worker_count(cfg), [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(cfg.seed, EngineId::positional_rope, i);
    bands[i] = random_band(e, rng);
    const NearWindow window = NearWindow::for_rope(bands[i].window, bands[i].band.distances);
    sweeps[i] = coherent_band_sweep(bands[i].band, base_cfg, window, grid);
  });

  EngineResult res;
  res.engine = "positional-rope";
  Table sweep{"rope_band_sweep", {"seed", "window", "grid_value", "near_mass", "derivative", "verdict"}, {}};
  int monotone = 0;
  for (std::size_t i = 0; i < bands.size(); ++i) {
    if (sweeps[i].monotone) ++monotone;
    for (const SweepPoint& pt : sweeps[i].points) {
      sweep.add_row({static_cast<long long>(i), join_ints(bands[i].window), pt.grid_value, pt.near_mass,
                     pt.derivative, std::string(sweeps[i].monotone ? "pass" : "fail")});
    }
  }
  res.tables.push_back(std::move(sweep));
  res.checks.push_back(make_check("coherent band monotone below small-angle bound", monotone == e.bands, monotone,
                                  e.bands));

  // Exact rotary logits against the kappa/psi cosine form.
  std::vector<double> err(static_cast<std::size_t>(e.reconstruct_vectors));
  const CounterRng recon_base = CounterRng::stream(derive_seed(cfg.seed, kTagReconstruct), EngineId::positional_rope, 0);
  parallel_for(err.size(), worker_count(cfg), [&](std::size_t i) {
    CounterRng rng = recon_base.split(i);
    std::uniform_real_distribution<double> theta_dist(0.0, 1.0);
    std::uniform_int_distribution<int> pos_dist(e.T + 1, 4 * e.T);
    const RopeConfig rc = rope_config(e, theta_dist(rng));
    const Vector q = gaussian_vector(rc.head_dim, rng);
    const Matrix keys = gaussian_matrix(e.T, rc.head_dim, rng);
    const int decoder_pos = pos_dist(rng);
    const LogitVector exact = rope_logits(q, keys, decoder_pos, rc);
    double worst = 0.0;
    for (int j = 1; j <= e.T; ++j) {
      const auto terms = rope_decompose(q, keys.row(j - 1), rc);
      worst = std::max(worst, std::abs(exact[j - 1] - rope_reconstruct(terms, rc, decoder_pos - j)));
    }
    err[i] = worst;
  });
  const double max_err = *std::max_element(err.begin(), err.end());
  res.checks.push_back(make_check("rotary logits equal cosine reconstruction", max_err <= e.reconstruct_tol, max_err,
                                  e.reconstruct_tol));

  // Outside the small-angle regime: search for a documented decrease.
  const std::vector<double> free_grid = linspace(0.0, e.free_multiple * bound, e.free_points);
  int found = -1;
  SweepReport counter;
  Band counter_band;
  for (int a = 0; a < e.search_limit && found < 0; ++a) {
    CounterRng rng = CounterRng::stream(derive_seed(cfg.seed, kTagCounterexample), EngineId::positional_rope, a);
    Band b = random_band(e, rng);
    const NearWindow window = NearWindow::for_rope(b.window, b.band.distances);
    SweepReport s = coherent_band_free_sweep(b.band, base_cfg, window, free_grid);
    if (!s.monotone) {
      found = a;
      counter = std::move(s);
      counter_band = std::move(b);
    }
  }
  nlohmann::json counterexample = nullptr;
  if (found >= 0) {
    Table t{"rope_counterexample", {"grid_value", "near_mass", "derivative", "small_angle"}, {}};
    double first_drop = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t k = 0; k < counter.points.size(); ++k) {
      const SweepPoint& pt = counter.points[k];
      t.add_row({pt.grid_value, pt.near_mass, pt.derivative, static_cast<long long>(pt.grid_value <= bound)});
      if (k > 0 && std::isnan(first_drop) && pt.near_mass < counter.points[k - 1].near_mass - kMonotoneSlack) {
        first_drop = pt.grid_value;
      }
    }
    res.tables.push_back(std::move(t));
    counterexample = {{"attempt", found}, {"amplitudes", counter_band.band.amplitudes},
                      {"window", counter_band.window}, {"first_decrease_theta", first_drop},
                      {"small_angle_bound", bound}};
  }
  res.checks.push_back(make_check("nonmonotone sweep outside small-angle regime", found >= 0, found, e.search_limit));
  res.report = {{"bands", e.bands}, {"R", e.R}, {"T", e.T}, {"freqs", base_cfg.freqs}, {"small_angle_bound", bound},
                {"monotone_bands", monotone}, {"max_reconstruct_err", max_err}, {"counterexample", counterexample},
                {"checks", checks_json(res.checks)}};
  return res;
}

// ----------------------------------------------------------- popularity

namespace {

TokenStats popularity_stats(const PopularityEngineConfig& e) {
  constexpr int kHistory = 1000;
  std::vector<int> counts;
  for (double p : e.p) counts.push_back(static_cast<int>(std::lround(p * kHistory)));
  Matrix w(e.p.size(), static_cast<std::size_t>(e.dim));
  for (std::size_t h = 0; h < e.p.size(); ++h) w(h, h) = 1.0;
  return TokenStats(std::move(counts), std::move(w));
}

nlohmann::json ar_json(const ARReport& ar) {
  return {{"ar_estimate", ar.ar_estimate}, {"lower_bound", ar.lower_bound}, {"xi", ar.xi_estimate},
          {"seeds", ar.seeds}, {"pass", ar.pass}, {"leading_exponent", ar.leading_exponent},
          {"exposure_ratios", ar.exposure_ratios}};
}

// Norm-wise relative error of the surrogate gradient against central
// differences of the surrogate loss, on one random instance.
double gradient_fd_error(CounterRng& rng) {
  std::uniform_int_distribution<int> tokens_dist(2, 5), dim_dist(2, 8), count_dist(1, 20);
  const int H = tokens_dist(rng), d = dim_dist(rng);
  std::vector<int> counts;
  for (int h = 0; h < H; ++h) counts.push_back(count_dist(rng));
  const TokenStats stats(counts, gaussian_matrix(H, d, rng));
  HeadParams params{gaussian_matrix(H, d, rng)};
  const Vector q = gaussian_vector(d, rng);
  std::uniform_int_distribution<int> label_dist(0, H - 1);
  const auto label = static_cast<std::size_t>(label_dist(rng));

  const Matrix g = surrogate_gradient(q, label, params, stats);
  constexpr double h = 1e-5;
  double diff = 0.0, ref = 0.0;
  for (int t = 0; t < H; ++t) {
    for (int c = 0; c < d; ++c) {
      const double keep = params.mu(t, c);
      params.mu(t, c) = keep + h;
      const double up = surrogate_loss(q, label, params, stats);
      params.mu(t, c) = keep - h;
      const double down = surrogate_loss(q, label, params, stats);
      params.mu(t, c) = keep;
      const double fd = (up - down) / (2.0 * h);
      diff += (g(t, c) - fd) * (g(t, c) - fd);
      ref += g(t, c) * g(t, c);
    }
  }
  return std::sqrt(diff / ref);
}

}  // namespace

EngineResult run_popularity_engine(const ExperimentConfig& cfg) {
  const PopularityEngineConfig& e = cfg.popularity;
  const TokenStats stats = popularity_stats(e);
  const Vector init(static_cast<std::size_t>(e.dim), 0.0);
  const unsigned threads = worker_count(cfg);
  EngineResult res;
  res.engine = "popularity";

  // Most frequent and least frequent token.
  std::size_t hi = 0, lo = 0;
  for (std::size_t h = 1; h < stats.tokens(); ++h) {
    if (stats.freq(h) > stats.freq(hi)) hi = h;
    if (stats.freq(h) < stats.freq(lo)) lo = h;
  }

  TrainConfig drift_cfg{e.drift_eta, 1, e.dim, e.query_bound, e.noise, 0};
  const int drift_replicas = cfg.replicas.value_or(e.drift_replicas);
  const DriftReport drift =
      early_drift_check(stats, drift_cfg, init, drift_replicas, derive_seed(cfg.seed, kTagDrift), threads);
  Table drift_table{"popularity_drift",
                    {"token", "p", "direction_norm", "projected", "projected_se", "projected_predicted", "projected_z",
                     "rate", "rate_se", "rate_predicted"},
                    {}};
  double max_z = 0.0;
  for (std::size_t h = 0; h < drift.tokens.size(); ++h) {
    const TokenDrift& t = drift.tokens[h];
    drift_table.add_row({static_cast<long long>(h), stats.freq(h), t.direction_norm, t.projected, t.projected_se,
                         t.projected_predicted, t.projected_z, t.rate, t.rate_se, t.rate_predicted});
    max_z = std::max(max_z, std::abs(t.projected_z));
  }
  res.tables.push_back(std::move(drift_table));
  res.checks.push_back(make_check("one-step drift within 3 SE of prediction", drift.pass, max_z, 3.0));
  const double rate_gap = drift.tokens[hi].rate - drift.tokens[lo].rate;
  res.checks.push_back(make_check("frequent-token drift rate exceeds rare-token rate", rate_gap > 0.0, rate_gap, 0.0,
                                  "rate c in proj = c (w_h - w_bar), predicted eta p_h / sqrt d"));

  TrainConfig train_cfg{e.eta, e.steps, e.dim, e.query_bound, e.noise, 0};
  Vector mid(static_cast<std::size_t>(e.dim));
  for (int c = 0; c < e.dim; ++c) mid[c] = 0.5 * (stats.cond_query_mean(hi)[c] + stats.cond_query_mean(lo)[c]);
  const ARReport ar = amplification_ratio(mid, stats, train_cfg, {hi, lo}, init, e.seeds,
                                          derive_seed(cfg.seed, kTagAmplification), threads);
  const std::span<const double> w_hi = stats.cond_query_mean(hi);
  const ARReport ar_at_w = amplification_ratio(w_hi, stats, train_cfg, {hi, lo}, init, e.seeds,
                                               derive_seed(cfg.seed, kTagAmplification), threads);
  Table ar_table{"popularity_amplification",
                 {"test_query", "ar_estimate", "lower_bound", "leading_exponent", "xi", "seeds"},
                 {}};
  ar_table.add_row({std::string("midpoint"), ar.ar_estimate, ar.lower_bound, ar.leading_exponent, ar.xi_estimate,
                    static_cast<long long>(ar.seeds)});
  ar_table.add_row({std::string("w_frequent"), ar_at_w.ar_estimate, ar_at_w.lower_bound, ar_at_w.leading_exponent,
                    ar_at_w.xi_estimate, static_cast<long long>(ar_at_w.seeds)});
  res.tables.push_back(std::move(ar_table));
  res.checks.push_back(make_check("AR at midpoint query >= lower bound", ar.pass, ar.ar_estimate, ar.lower_bound));
  res.checks.push_back(make_check("AR at midpoint query > 1", ar.ar_estimate > 1.0, ar.ar_estimate, 1.0,
                                  "leading exponent is zero at the midpoint query"));

  // One seed's trajectory, strided, for plotting.
  {
    TrainConfig snap_cfg = train_cfg;
    snap_cfg.snapshot_stride = std::max(1, e.steps / 50);
    CounterRng rng = CounterRng::stream(derive_seed(cfg.seed, kTagAmplification), EngineId::popularity, 0);
    const Trajectory traj = sgd_run(stats, snap_cfg, HeadParams::symmetric(stats.tokens(), init), rng);
    std::vector<std::string> header{"step", "token"};
    for (int c = 0; c < e.dim; ++c) header.push_back("mu_" + std::to_string(c));
    Table t{"popularity_trajectory", header, {}};
    for (const Snapshot& snap : traj.snapshots) {
      for (std::size_t h = 0; h < stats.tokens(); ++h) {
        std::vector<Cell> row{static_cast<long long>(snap.step), static_cast<long long>(h)};
        for (double x : snap.mu.row(h)) row.emplace_back(x);
        t.add_row(std::move(row));
      }
    }
    res.tables.push_back(std::move(t));
  }

  std::vector<double> grad_err(static_cast<std::size_t>(e.fd_instances));
  const CounterRng grad_base = CounterRng::stream(derive_seed(cfg.seed, kTagGradient), EngineId::popularity, 0);
  parallel_for(grad_err.size(), threads, [&](std::size_t i) {
    CounterRng rng = grad_base.split(i);
    grad_err[i] = gradient_fd_error(rng);
  });
  const double max_grad_err = *std::max_element(grad_err.begin(), grad_err.end());
  res.checks.push_back(make_check("surrogate gradient matches central difference", max_grad_err <= e.fd_rel_tol,
                                  max_grad_err, e.fd_rel_tol));

  res.report = {
      {"p", stats.freqs()},
      {"dim", e.dim},
      {"drift_replicas", drift_replicas},
      {"amplification",
       {{"midpoint", ar_json(ar)}, {"w_frequent", ar_json(ar_at_w)}}},
      {"max_gradient_rel_err", max_grad_err},
      {"checks", checks_json(res.checks)},
  };
  return res;
}

// --------------------------------------------------------------- latent

EngineResult run_latent_engine(const ExperimentConfig& cfg) {
  const LatentEngineConfig& e = cfg.latent;
  const int draws = cfg.replicas.value_or(e.draws);
  EngineResult res;
  res.engine = "latent";

  // Deterministic logit gaps.
  bool gaps_ok = true;
  nlohmann::json gaps = nlohmann::json::object();
  for (double gap : {1.0, 2.0}) {
    const WeightVector w = softmax(std::vector<double>{gap, 0.0});
    const double ratio = std::exp(log_odds(w, 0, 1));
    char got[32], want[32];
    std::snprintf(got, sizeof got, "%.3g", ratio);
    std::snprintf(want, sizeof want, "%.3g", std::exp(gap));
    gaps[format_double(gap)] = ratio;
    gaps_ok = gaps_ok && std::string(got) == (gap == 1.0 ? "2.72" : "7.39") && std::string(got) == want;
  }
  res.checks.push_back(make_check("logit gaps 1 and 2 give odds 2.72 and 7.39", gaps_ok, gaps["2"], 7.39));

  Table t{"latent_moments",
          {"sigma_j", "sigma_k", "n_draws", "empirical_mean", "empirical_var", "predicted_var", "mean_z", "var_z",
           "tail_c", "tail_empirical", "tail_predicted", "tail_z", "ratio_mean", "ratio_predicted", "ratio_rel_err",
           "ratio_checked", "pass"},
          {}};
  nlohmann::json reports = nlohmann::json::array();
  double max_z = 0.0, max_ratio_err = 0.0;
  bool moments_ok = true, ratio_ok = true;
  std::uint64_t pair = 0;
  for (double sj : e.sigmas) {
    for (double sk : e.sigmas) {
      const NoiseSpec spec{{sj, sk}};
      const MomentReport m = mc_moments(spec, 0, 1, draws, derive_seed(cfg.seed, kTagLatentPair + pair++), e.tail_c,
                                        worker_count(cfg));
      t.add_row({sj, sk, static_cast<long long>(m.n_draws), m.empirical_mean, m.empirical_var, m.predicted_var,
                 m.mean_z, m.var_z, m.tail_c, m.tail_empirical, m.tail_predicted, m.tail_z, m.ratio_mean,
                 m.ratio_predicted, m.ratio_rel_err, static_cast<long long>(m.ratio_checked),
                 static_cast<long long>(m.pass)});
      max_z = std::max({max_z, std::abs(m.mean_z), std::abs(m.var_z), std::abs(m.tail_z)});
      moments_ok = moments_ok && std::abs(m.mean_z) <= 3.0 && std::abs(m.var_z) <= 3.0 && std::abs(m.tail_z) <= 3.0;
      if (m.ratio_checked) {
        max_ratio_err = std::max(max_ratio_err, m.ratio_rel_err);
        ratio_ok = ratio_ok && m.ratio_rel_err <= kRatioRelTol;
      }
      reports.push_back(to_json(m));
    }
  }
  res.tables.push_back(std::move(t));
  res.checks.push_back(make_check("log-odds mean, variance and tail within 3 SE", moments_ok, max_z, 3.0));
  res.checks.push_back(make_check("mean odds within 5% for sigma <= 1", ratio_ok, max_ratio_err, kRatioRelTol));
  res.report = {{"gaps", gaps}, {"pairs", reports}, {"checks", checks_json(res.checks)}};
  return res;
}

// -------------------------------------------------------------- retrain

namespace {

std::vector<RetrainContext> stress_grid(bool fresh) {
  auto ctx = [fresh](std::vector<double> p0, int n, int n_hat) { return RetrainContext{std::move(p0), n, n_hat, fresh}; };
  return {
      ctx({0.25, 0.25, 0.25, 0.25}, 4, 36),
      ctx({0.5, 0.3, 0.2}, 10, 10),
      ctx({0.7, 0.1, 0.1, 0.1}, 20, 5),
      ctx({1.0 / 3, 1.0 / 3, 1.0 - 2.0 / 3}, 5, 20),
      ctx({0.4, 0.3, 0.2, 0.1, 0.0, 0.0}, 50, 50),
      ctx({0.9, 0.1}, 3, 12),
  };
}

}  // namespace

EngineResult run_retrain_engine(const ExperimentConfig& cfg) {
  const RetrainEngineConfig& e = cfg.retrain;
  const int replicas = cfg.replicas.value_or(e.replicas);
  EngineResult res;
  res.engine = "retrain";

  std::vector<RetrainContext> contexts{RetrainContext{e.p0, e.N, e.N_hat, e.fresh_organic}};
  if (e.stress) {
    for (auto& c : stress_grid(e.fresh_organic)) contexts.push_back(std::move(c));
  }

  Table t{"retrain_trajectory", {"context", "round", "mc_mean", "mc_se", "closed_form", "z"}, {}};
  nlohmann::json ctx_json = nlohmann::json::array();
  bool primary_shape = true;
  double primary_z = 0.0, stress_z = 0.0;
  bool stress_ok = true, primary_ok = true;
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    const std::uint64_t seed = c == 0 ? cfg.seed : derive_seed(cfg.seed, kTagStress + c);
    const RetrainComparison cmp = mc_vs_closed_form(contexts[c], e.rounds, replicas, seed, worker_count(cfg));
    for (const RoundStat& st : cmp.trajectory.rounds) {
      t.add_row({static_cast<long long>(c), static_cast<long long>(st.round), st.mc_mean, st.mc_se, st.closed_form,
                 st.z});
    }
    nlohmann::json j = to_json(contexts[c]);
    j["max_abs_z"] = cmp.max_abs_z;
    j["max_abs_mean_p_z"] = cmp.max_abs_mean_p_z;
    j["limit"] = cmp.limit;
    j["closed_form_increasing"] = cmp.closed_form_increasing;
    j["pass"] = cmp.pass;
    ctx_json.push_back(std::move(j));
    if (c == 0) {
      const ClosedFormParams params = ClosedFormParams::from_context(contexts[0]);
      const double s1 = cmp.trajectory.rounds.front().closed_form;
      const double expected_s1 = 1.0 / params.n + (1.0 - 1.0 / params.n) * params.s0;
      primary_shape = std::abs(s1 - expected_s1) <= 1e-12 && cmp.closed_form_increasing &&
                      cmp.trajectory.rounds.back().closed_form < cmp.limit;
      primary_z = cmp.max_abs_z;
      primary_ok = cmp.pass;
    } else {
      stress_z = std::max(stress_z, cmp.max_abs_z);
      stress_ok = stress_ok && cmp.pass;
    }
  }
  res.tables.push_back(std::move(t));
  res.checks.push_back(make_check("MC concentration within 3 SE of closed form", primary_ok, primary_z, 3.0));
  res.checks.push_back(make_check("closed form starts at 1/N + (1-1/N) S0 and rises below its limit", primary_shape,
                                  primary_shape, 1.0));
  if (e.stress) {
    res.checks.push_back(make_check("stress grid within 3 SE at every round", stress_ok, stress_z, 3.0,
                                    std::to_string(contexts.size() - 1) + " contexts"));
  }
  res.report = {{"rounds", e.rounds}, {"replicas", replicas}, {"contexts", ctx_json},
                {"checks", checks_json(res.checks)}};
  return res;
}

// ----------------------------------------------------------- generative

EngineResult run_generative_engine(const ExperimentConfig& cfg) {
  EngineResult res;
  res.engine = "generative";

  constexpr int kPairs = 100;
  std::vector<double> sum_err(kPairs);
  parallel_for(sum_err.size(), worker_count(cfg), [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(cfg.seed, EngineId::generative, i);
    std::uniform_int_distribution<int> vocab_dist(2, 6), len_dist(1, 3), hist_dist(1, 6);
    const int vocab = vocab_dist(rng), L = len_dist(rng);
    int full = 1;
    for (int l = 0; l < L; ++l) full *= vocab;
    std::uniform_int_distribution<int> items_dist(1, std::min(full, 20));
    const Catalog catalog = Catalog::random(TokenVocab{vocab}, L, items_dist(rng), rng);
    const ModelWeights w = ModelWeights::gaussian(vocab, 4, rng, 0.5);
    History h;
    std::uniform_int_distribution<int> item_dist(0, catalog.size() - 1);
    for (int k = hist_dist(rng); k > 0; --k) h.items.push_back(item_dist(rng));
    const Vector p = constrained_decode(w, catalog, h);
    double s = 0.0;
    for (double x : p) s += x;
    sum_err[i] = std::abs(s - 1.0);
  });
  const double max_sum_err = *std::max_element(sum_err.begin(), sum_err.end());
  res.checks.push_back(make_check("constrained decoding sums to 1", max_sum_err <= 1e-12, max_sum_err, 1e-12));

  // Brute force over every code of {0..3}^2 against the trie descent.
  double max_enum_err = 0.0;
  {
    CounterRng rng = CounterRng::stream(derive_seed(cfg.seed, 1), EngineId::generative, 0);
    const Catalog catalog = Catalog::random(TokenVocab{4}, 2, 9, rng);
    const ModelWeights w = ModelWeights::gaussian(4, 4, rng, 0.5);
    const History h{{0, 3, 5}};
    const Vector p = constrained_decode(w, catalog, h);
    std::vector<double> brute(static_cast<std::size_t>(catalog.size()), 0.0);
    double z1 = 0.0;
    const auto first = forward_step(w, catalog, h, {}).probs;
    for (int a = 0; a < 4; ++a) {
      bool any = false;
      for (int b = 0; b < 4; ++b) {
        try {
          (void)catalog.decode(std::vector<int>{a, b});
          any = true;
        } catch (const std::out_of_range&) {
        }
      }
      if (any) z1 += first[a];
    }
    for (int a = 0; a < 4; ++a) {
      const std::vector<int> prefix{a};
      const auto second = forward_step(w, catalog, h, prefix).probs;
      double z2 = 0.0;
      std::vector<int> members(4, -1);
      for (int b = 0; b < 4; ++b) {
        try {
          members[b] = catalog.decode(std::vector<int>{a, b});
          z2 += second[b];
        } catch (const std::out_of_range&) {
        }
      }
      for (int b = 0; b < 4; ++b) {
        if (members[b] >= 0) brute[members[b]] = first[a] / z1 * second[b] / z2;
      }
    }
    for (std::size_t i = 0; i < brute.size(); ++i) max_enum_err = std::max(max_enum_err, std::abs(brute[i] - p[i]));
  }
  res.checks.push_back(make_check("brute-force enumeration equals constrained decode", max_enum_err <= 1e-10,
                                  max_enum_err, 1e-10));

  int roundtrip_failures = 0;
  {
    CounterRng rng = CounterRng::stream(derive_seed(cfg.seed, 2), EngineId::generative, 0);
    const Catalog catalog = Catalog::random(TokenVocab{8}, 2, 50, rng);
    for (int i = 0; i < catalog.size(); ++i) {
      if (catalog.decode(catalog.encode(i)) != i) ++roundtrip_failures;
    }
    int decoded = 0;
    for (int a = 0; a < 8; ++a) {
      for (int b = 0; b < 8; ++b) {
        try {
          const std::vector<int> code{a, b};
          const int item = catalog.decode(code);
          if (catalog.encode(item) != code) ++roundtrip_failures;
          ++decoded;
        } catch (const std::out_of_range&) {
        }
      }
    }
    if (decoded != catalog.size()) ++roundtrip_failures;
  }
  res.checks.push_back(make_check("item/code bijection round trip on 50 items", roundtrip_failures == 0,
                                  roundtrip_failures, 0.0));
  Table t{"generative_checks", {"check", "pass", "value", "threshold"}, {}};
  for (const Check& c : res.checks) t.add_row({c.name, static_cast<long long>(c.pass), c.value, c.threshold});
  res.tables.push_back(std::move(t));
  res.report = {{"checks", checks_json(res.checks)}};
  return res;
}

// -------------------------------------------------------------- runner

std::vector<std::string> engine_names() {
  return {"positional-rpe", "positional-rope", "popularity", "latent", "retrain", "generative"};
}

EngineResult run_engine(const std::string& name, const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  EngineResult res;
  if (name == "positional-rpe") res = run_rpe_engine(cfg);
  else if (name == "positional-rope") res = run_rope_engine(cfg);
  else if (name == "popularity") res = run_popularity_engine(cfg);
  else if (name == "latent") res = run_latent_engine(cfg);
  else if (name == "retrain") res = run_retrain_engine(cfg);
  else if (name == "generative") res = run_generative_engine(cfg);
  else throw std::invalid_argument("unknown engine \"" + name + "\"");
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

nlohmann::json RunManifest::to_json() const {
  return {{"config_hash", config_hash}, {"version", version}, {"seed", seed}, {"started", started},
          {"finished", finished}, {"files", files}};
}

bool RunResult::pass() const {
  return std::all_of(engines.begin(), engines.end(), [](const EngineResult& e) { return e.pass(); });
}

std::string artifact_version() { return ATTNBIAS_VERSION; }

RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& extra_engines) {
  namespace fs = std::filesystem;
  const fs::path out = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError(out, "cannot create output directory: " + ec.message());

  RunResult run;
  run.manifest.config_hash = config_hash(cfg);
  run.manifest.version = artifact_version();
  run.manifest.seed = cfg.seed;
  run.manifest.started = utc_now();

  std::vector<std::string> names = cfg.engines();
  for (const auto& x : extra_engines) {
    if (std::find(names.begin(), names.end(), x) == names.end()) names.push_back(x);
  }

  nlohmann::json verdict = nlohmann::json::object();
  for (const std::string& name : names) {
    EngineResult res;
    try {
      res = run_engine(name, cfg);
    } catch (const DivergenceError& err) {
      const nlohmann::json diag{{"engine", name}, {"error", err.what()}, {"seed", cfg.seed},
                                {"config_hash", run.manifest.config_hash}};
      write_atomic(out / "diagnostic.json", to_json_text(diag));
      throw;
    }
    const fs::path dir = out / name;
    for (const std::string& f : emit_results(res.tables, dir)) run.manifest.files.push_back(name + "/" + f);
    write_atomic(dir / "report.json", to_json_text(res.report));
    run.manifest.files.push_back(name + "/report.json");
    verdict[name] = {{"pass", res.pass()}, {"checks", checks_json(res.checks)}};
    run.engines.push_back(std::move(res));
  }

  const nlohmann::json summary{{"engines", verdict}, {"pass", run.pass()}, {"seed", cfg.seed},
                               {"config_hash", run.manifest.config_hash}};
  write_atomic(out / "verdict.json", to_json_text(summary));
  run.manifest.files.push_back("verdict.json");
  run.manifest.files.push_back("manifest.json");
  run.manifest.finished = utc_now();
  write_atomic(out / "manifest.json", to_json_text(run.manifest.to_json()));
  return run;
}

ExperimentConfig acceptance_config(std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.experiment = "all";
  cfg.seed = seed;
  cfg.output_dir = "acceptance";
  return cfg;
}

}  // namespace attnbias
