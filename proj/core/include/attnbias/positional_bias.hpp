#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "attnbias/attention.hpp"
#include "attnbias/matrix.hpp"

namespace attnbias {

// ----------------------------------------------------------------- RPE

// Distance function b(x), x >= 0, for the additive positional term.
struct DistanceFunction {
  std::string name;
  std::function<double(double)> eval;

  double operator()(double x) const { return eval(x); }
};

// Named families of distance functions. `defaults()` ships alibi (-x),
// log-decay (-log(1+x)) and gaussian-decay (-x^2 / (2 tau^2)).
class DistanceRegistry {
 public:
  using Factory = std::function<DistanceFunction(double /*param*/)>;

  static DistanceRegistry defaults();

  void add(std::string name, Factory factory);
  DistanceFunction make(const std::string& name, double param = 1.0) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, Factory> factories_;
};

DistanceFunction alibi_distance();
DistanceFunction log_decay_distance();
DistanceFunction gaussian_decay_distance(double tau);

struct RpeConfig {
  double alpha = 0.0;
  DistanceFunction distance;
  int decoder_pos = 1;  // l~ = l + T
};

// Positions are 1-based history indices 1..T throughout this module.
class NearWindow {
 public:
  /// Validates: nonempty proper subset of 1..T and, for every i in S and
  /// j in F, b(|l~ - i|) >= b(|l~ - j|).
  static NearWindow for_rpe(std::vector<int> indices, int T, const DistanceFunction& b, int decoder_pos);

  /// Validates: nonempty proper subset and d_i <= d_j for i in S, j in F.
  static NearWindow for_rope(std::vector<int> indices, const std::vector<double>& distances);

  /// Only checks the subset shape; for counterexample search.
  static NearWindow unchecked(std::vector<int> indices, int T);

  /// Token positions of the last `recent_items` items of a t-item history
  /// with codes of length L (recency grouped by item).
  static std::vector<int> recent_item_positions(int items, int code_length, int recent_items);

  const std::vector<int>& indices() const { return indices_; }
  int history_length() const { return T_; }
  bool contains(int position) const;

 private:
  NearWindow(std::vector<int> indices, int T);

  std::vector<int> indices_;
  std::vector<char> member_;
  int T_ = 0;
};

/// content_j + alpha * b(|l~ - j|).
LogitVector rpe_logits(std::span<const double> content, const RpeConfig& cfg);

/// Sum of weights over the window. Throws std::domain_error if an index
/// falls outside 1..weights.size().
double near_mass(std::span<const double> weights, const NearWindow& window);

/// dM_S/dalpha = alpha_S * alpha_F * (mu_S - mu_F).
double near_mass_derivative(std::span<const double> content, const RpeConfig& cfg, const NearWindow& window);

struct SweepPoint {
  double grid_value = 0.0;
  double near_mass = 0.0;
  double derivative = 0.0;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  bool monotone = true;  // nondecreasing within -slack
};

inline constexpr double kMonotoneSlack = 1e-9;

bool nondecreasing(const std::vector<SweepPoint>& points, double slack = kMonotoneSlack);

/// M_S at every alpha of an ascending grid. Throws on an unsorted grid.
SweepReport rpe_monotonicity_sweep(std::span<const double> content, const NearWindow& window,
                                   const DistanceFunction& b, int decoder_pos,
                                   std::span<const double> alpha_grid);

// ---------------------------------------------------------------- RoPE

struct RopeConfig {
  double theta = 0.0;
  std::vector<double> freqs;  // omega_1 <= ... <= omega_R, positive
  int head_dim = 2;           // 2R

  void validate() const;
};

struct RotaryTerm {
  double amplitude = 0.0;  // kappa_r
  double phase = 0.0;      // psi_r
};

/// Rotates the query at l~ and key j at position j block by block, then
/// takes scaled dot products. Key row j-1 sits at history position j.
LogitVector rope_logits(std::span<const double> query, const Matrix& keys, int decoder_pos,
                        const RopeConfig& cfg);

/// Per-block (kappa_r, psi_r) with a_r = <q_r, k_r>/sqrt(d) and
/// b_r = (q_{2r-1} k_{2r} - q_{2r} k_{2r-1})/sqrt(d). psi = 0 when kappa = 0.
std::vector<RotaryTerm> rope_decompose(std::span<const double> query, std::span<const double> key,
                                       const RopeConfig& cfg);

/// sum_r kappa_r cos(omega_r theta d - psi_r).
double rope_reconstruct(const std::vector<RotaryTerm>& terms, const RopeConfig& cfg, double distance);

struct CoherentBand {
  std::vector<double> amplitudes;  // kappa_r >= 0
  std::vector<double> distances;   // d_j >= 0, one per history position
};

/// pi / (2 omega_max d_max).
double small_angle_bound(const RopeConfig& cfg, double d_max);

/// sum_r kappa_r cos(omega_r theta d_j) at theta = cfg.theta.
LogitVector coherent_logits(const CoherentBand& band, const RopeConfig& cfg);

/// dM_S/dtheta = alpha_S * alpha_F * (mu_S^g - mu_F^g) for the coherent band.
double coherent_near_mass_derivative(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window);

/// Sweep restricted to [0, small_angle_bound]; throws std::domain_error if
/// the grid leaves that range or is unsorted.
SweepReport coherent_band_sweep(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window,
                                std::span<const double> theta_grid);

/// Same sweep without the small-angle restriction. Nonmonotonicity is
/// reported, not raised.
SweepReport coherent_band_free_sweep(const CoherentBand& band, const RopeConfig& cfg, const NearWindow& window,
                                     std::span<const double> theta_grid);

}  // namespace attnbias
