#include "attnbias/positional_bias.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace attnbias {

// ----------------------------------------------------------- distances

DistanceFunction alibi_distance() {
  return {"alibi", [](double x) { return -x; }};
}

DistanceFunction log_decay_distance() {
  return {"log-decay", [](double x) { return -std::log1p(x); }};
}

DistanceFunction gaussian_decay_distance(double tau) {
  if (!(tau > 0.0)) throw std::domain_error("gaussian-decay: tau must be positive");
  return {"gaussian-decay", [tau](double x) { return -x * x / (2.0 * tau * tau); }};
}

DistanceRegistry DistanceRegistry::defaults() {
  DistanceRegistry r;
  r.add("alibi", [](double) { return alibi_distance(); });
  r.add("log-decay", [](double) { return log_decay_distance(); });
  r.add("gaussian-decay", [](double tau) { return gaussian_decay_distance(tau); });
  return r;
}

void DistanceRegistry::add(std::string name, Factory factory) { factories_[std::move(name)] = std::move(factory); }

DistanceFunction DistanceRegistry::make(const std::string& name, double param) const {
  const auto it = factories_.find(name);
  if (it == factories_.end()) throw std::invalid_argument("unknown distance function \"" + name + "\"");
  return it->second(param);
}

std::vector<std::string> DistanceRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : factories_) out.push_back(name);
  return out;
}

// --------------------------------------------------------------- window

NearWindow::NearWindow(std::vector<int> indices, int T) : indices_(std::move(indices)), member_(T + 1, 0), T_(T) {
  for (int i : indices_) member_[i] = 1;
}

NearWindow NearWindow::unchecked(std::vector<int> indices, int T) {
  if (T < 2) throw std::domain_error("NearWindow: history needs at least two positions");
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  if (indices.empty()) throw std::domain_error("NearWindow: window is empty");
  if (static_cast<int>(indices.size()) >= T) throw std::domain_error("NearWindow: window must be a proper subset");
  if (indices.front() < 1 || indices.back() > T) throw std::domain_error("NearWindow: index out of range 1..T");
  return NearWindow(std::move(indices), T);
}

NearWindow NearWindow::for_rpe(std::vector<int> indices, int T, const DistanceFunction& b, int decoder_pos) {
  NearWindow w = unchecked(std::move(indices), T);
  double near_min = INFINITY;
  double far_max = -INFINITY;
  for (int j = 1; j <= T; ++j) {
    const double v = b(std::abs(static_cast<double>(decoder_pos - j)));
    if (w.contains(j)) {
      near_min = std::min(near_min, v);
    } else {
      far_max = std::max(far_max, v);
    }
  }
  if (near_min < far_max) {
    throw std::domain_error("NearWindow: near positions must receive weakly larger positional logits");
  }
  return w;
}

NearWindow NearWindow::for_rope(std::vector<int> indices, const std::vector<double>& distances) {
  const int T = static_cast<int>(distances.size());
  NearWindow w = unchecked(std::move(indices), T);
  double near_max = -INFINITY;
  double far_min = INFINITY;
  for (int j = 1; j <= T; ++j) {
    const double d = distances[j - 1];
    if (w.contains(j)) {
      near_max = std::max(near_max, d);
    } else {
      far_min = std::min(far_min, d);
    }
  }
  if (near_max > far_min) throw std::domain_error("NearWindow: near positions must be no farther than far ones");
  return w;
}

std::vector<int> NearWindow::recent_item_positions(int items, int code_length, int recent_items) {
  if (recent_items < 1 || recent_items > items) throw std::domain_error("NearWindow: bad recent item count");
  std::vector<int> out;
  for (int pos = (items - recent_items) * code_length + 1; pos <= items * code_length; ++pos) out.push_back(pos);
  return out;
}

bool NearWindow::contains(int position) const {
  return position >= 1 && position <= T_ && member_[position] != 0;
}

// ------------------------------------------------------------------ RPE

LogitVector rpe_logits(std::span<const double> content, const RpeConfig& cfg) {
  LogitVector z(content.begin(), content.end());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double dist = std::abs(static_cast<double>(cfg.decoder_pos) - static_cast<double>(j + 1));
    z[j] += cfg.alpha * cfg.distance(dist);
  }
  return z;
}

double near_mass(std::span<const double> weights, const NearWindow& window) {
  double m = 0.0;
  for (int i : window.indices()) {
    if (i < 1 || i > static_cast<int>(weights.size())) throw std::domain_error("near_mass: index out of range");
    m += weights[static_cast<std::size_t>(i - 1)];
  }
  return m;
}

namespace {

// alpha_S alpha_F (mu_S - mu_F) for weights A and per-position slopes g.
double split_covariance(std::span<const double> weights, std::span<const double> slopes, const NearWindow& window) {
  double mass_s = 0.0, mass_f = 0.0, moment_s = 0.0, moment_f = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (window.contains(static_cast<int>(j + 1))) {
      mass_s += weights[j];
      moment_s += weights[j] * slopes[j];
    } else {
      mass_f += weights[j];
      moment_f += weights[j] * slopes[j];
    }
  }
  if (mass_s <= 0.0 || mass_f <= 0.0) return 0.0;
  return mass_s * mass_f * (moment_s / mass_s - moment_f / mass_f);
}

void require_sorted(std::span<const double> grid, const char* what) {
  if (grid.empty()) throw std::domain_error(std::string(what) + ": empty grid");
  if (!std::is_sorted(grid.begin(), grid.end())) throw std::domain_error(std::string(what) + ": grid must be ascending");
}

}  // namespace

double near_mass_derivative(std::span<const double> content, const RpeConfig& cfg, const NearWindow& window) {
  const WeightVector a = softmax(rpe_logits(content, cfg));
  Vector b(content.size());
  for (std::size_t j = 0; j < b.size(); ++j) {
    b[j] = cfg.distance(std::abs(static_cast<double>(cfg.decoder_pos) - static_cast<double>(j + 1)));
  }
  return split_covariance(a, b, window);
}

bool nondecreasing(const std::vector<SweepPoint>& points, double slack) {
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].near_mass - points[i - 1].near_mass < -slack) return false;
  }
  return true;
}

SweepReport rpe_monotonicity_sweep(std::span<const double> content, const NearWindow& window,
                                   const DistanceFunction& b, int decoder_pos, std::span<const double> alpha_grid) {
  require_sorted(alpha_grid, "rpe_monotonicity_sweep");
  SweepReport report;
  for (double alpha : alpha_grid) {
    const RpeConfig cfg{alpha, b, decoder_pos};
    const WeightVector a = softmax(rpe_logits(content, cfg));
    report.points.push_back({alpha, near_mass(a, window), near_mass_derivative(content, cfg, window)});
  }
  report.monotone = nondecreasing(report.points);
  return report;
}

// ----------------------------------------------------------------- RoPE

void RopeConfig::validate() const {
  if (head_dim < 2 || head_dim % 2 != 0) throw std::domain_error("RopeConfig: head_dim must be even");
  if (static_cast<int>(freqs.size()) * 2 != head_dim) throw std::domain_error("RopeConfig: need head_dim/2 frequencies");
  if (!(theta >= 0.0)) throw std::domain_error("RopeConfig: theta must be nonnegative");
  for (std::size_t r = 0; r < freqs.size(); ++r) {
    if (!(freqs[r] > 0.0)) throw std::domain_error("RopeConfig: frequencies must be positive");
    if (r > 0 && freqs[r] < freqs[r - 1]) throw std::domain_error("RopeConfig: frequencies must be ascending");
  }
}

namespace {

Vector rotate(std::span<const double> x, const RopeConfig& cfg, double position) {
  Vector out(x.size());
  for (std::size_t r = 0; r < cfg.freqs.size(); ++r) {
    const double angle = cfg.freqs[r] * cfg.theta * position;
    const double c = std::cos(angle), s = std::sin(angle);
    const double x1 = x[2 * r], x2 = x[2 * r + 1];
    out[2 * r] = x1 * c - x2 * s;
    out[2 * r + 1] = x1 * s + x2 * c;
  }
  return out;
}

}  // namespace

LogitVector rope_logits(std::span<const double> query, const Matrix& keys, int decoder_pos, const RopeConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(query.size()) != cfg.head_dim || static_cast<int>(keys.cols()) != cfg.head_dim) {
    throw std::domain_error("rope_logits: vector length differs from head_dim");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  const Vector q = rotate(query, cfg, decoder_pos);
  LogitVector z(keys.rows());
  for (std::size_t j = 0; j < keys.rows(); ++j) {
    z[j] = dot(q, rotate(keys.row(j), cfg, static_cast<double>(j + 1))) * scale;
  }
  return z;
}

std::vector<RotaryTerm> rope_decompose(std::span<const double> query, std::span<const double> key,
                                       const RopeConfig& cfg) {
  if (cfg.head_dim < 2 || cfg.head_dim % 2 != 0) throw std::domain_error("rope_decompose: head_dim must be even");
  if (static_cast<int>(query.size()) != cfg.head_dim || static_cast<int>(key.size()) != cfg.head_dim) {
    throw std::domain_error("rope_decompose: vector length differs from head_dim");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));
  std::vector<RotaryTerm> terms(static_cast<std::size_t>(cfg.head_dim / 2));
  for (std::size_t r = 0; r < terms.size(); ++r) {
    const double q1 = query[2 * r], q2 = query[2 * r + 1];
    const double k1 = key[2 * r], k2 = key[2 * r + 1];
    const double a = (q1 * k1 + q2 * k2) * scale;
    const double b = (q1 * k2 - q2 * k1) * scale;
    const double kappa = std::hypot(a, b);
    terms[r] = {kappa, kappa == 0.0 ? 0.0 : std::atan2(b, a)};
  }
  return terms;
}

double rope_reconstruct(const std::vector<RotaryTerm>& terms, const RopeConfig& cfg, double distance) {
  if (terms.size() != cfg.freqs.size()) throw std::domain_error("rope_reconstruct: term count differs from R");
  double z = 0.0;
  for (std::size_t r = 0; r < terms.size(); ++r) {
    z += terms[r].amplitude * std::cos(cfg.freqs[r] * cfg.theta * distance - terms[r].phase);
  }
  return z;
}

double small_angle_bound(const RopeConfig& cfg, double d_max) {
  if (cfg.freqs.empty()) throw std::domain_error("small_angle_bound: no frequencies");
  if (!(d_max > 0.0)) throw std::domain_error("small_angle_bound: d_max must be positive");
  const double omega_max = *std::max_element(cfg.freqs.begin(), cfg.freqs.end());
  return std::numbers::pi / (2.0 * omega_max * d_max);
}

namespace {

void validate_band(const CoherentBand& band, const RopeConfig& cfg) {
  if (band.amplitudes.size() != cfg.freqs.size()) throw std::domain_error("CoherentBand: need one amplitude per block");
  for (double k : band.amplitudes) {
    if (!(k >= 0.0)) throw std::domain_error("CoherentBand: amplitudes must be nonnegative");
  }
  for (double d : band.distances) {
    if (!(d >= 0.0)) throw std::domain_error("CoherentBand: distances must be nonnegative");
  }
}

SweepReport sweep_band(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window,
                       std::span<const double> theta_grid) {
  SweepReport report;
  RopeConfig at = cfg;
  for (double theta : theta_grid) {
    at.theta = theta;
    const WeightVector a = softmax(coherent_logits(band, at));
    report.points.push_back({theta, near_mass(a, window), coherent_near_mass_derivative(band, at, window)});
  }
  report.monotone = nondecreasing(report.points);
  return report;
}

}  // namespace

LogitVector coherent_logits(const CoherentBand& band, const RopeConfig& cfg) {
  validate_band(band, cfg);
  LogitVector z(band.distances.size(), 0.0);
  for (std::size_t j = 0; j < z.size(); ++j) {
    for (std::size_t r = 0; r < cfg.freqs.size(); ++r) {
      z[j] += band.amplitudes[r] * std::cos(cfg.freqs[r] * cfg.theta * band.distances[j]);
    }
  }
  return z;
}

double coherent_near_mass_derivative(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window) {
  const WeightVector a = softmax(coherent_logits(band, cfg));
  Vector g(band.distances.size(), 0.0);
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double d = band.distances[j];
    for (std::size_t r = 0; r < cfg.freqs.size(); ++r) {
      g[j] -= band.amplitudes[r] * cfg.freqs[r] * d * std::sin(cfg.freqs[r] * cfg.theta * d);
    }
  }
  return split_covariance(a, g, window);
}

SweepReport coherent_band_sweep(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window,
                                std::span<const double> theta_grid) {
  require_sorted(theta_grid, "coherent_band_sweep");
  validate_band(band, cfg);
  const double d_max = band.distances.empty() ? 0.0 : *std::max_element(band.distances.begin(), band.distances.end());
  const double bound = small_angle_bound(cfg, d_max);
  // Grids built as k * bound / n may overshoot by an ulp.
  if (theta_grid.front() < 0.0 || theta_grid.back() > bound * (1.0 + 1e-12)) {
    throw std::domain_error("coherent_band_sweep: grid must lie within [0, small_angle_bound]");
  }
  return sweep_band(band, cfg, window, theta_grid);
}

SweepReport coherent_band_free_sweep(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window,
                                     std::span<const double> theta_grid) {
  require_sorted(theta_grid, "coherent_band_free_sweep");
  return sweep_band(band, cfg, window, theta_grid);
}

}  // namespace attnbias
