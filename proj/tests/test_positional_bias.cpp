#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "attnbias/positional_bias.hpp"
#include "test_util.hpp"

using namespace attnbias;

namespace {

std::vector<double> content(testutil::Gen& g, int T) { return g.vec(T); }

std::vector<int> tail(int T, int k) {
  std::vector<int> s;
  for (int j = T - k + 1; j <= T; ++j) s.push_back(j);
  return s;
}

// Mass outside the window, so saturated windows keep relative precision.
double far_mass(const std::vector<double>& w, const NearWindow& win) {
  double m = 0.0;
  for (int j = 1; j <= static_cast<int>(w.size()); ++j)
    if (!win.contains(j)) m += w[j - 1];
  return m;
}

RopeConfig rope(int R, double theta, double base = 10000.0) {
  RopeConfig c;
  c.theta = theta;
  c.head_dim = 2 * R;
  for (int r = R - 1; r >= 0; --r) c.freqs.push_back(std::pow(base, -static_cast<double>(r) / R));
  return c;
}

// Rotate each 2-block by angle omega_r theta pos.
std::vector<double> rotate(const std::vector<double>& x, const RopeConfig& c, double pos) {
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < c.freqs.size(); ++r) {
    const double a = c.freqs[r] * c.theta * pos;
    y[2 * r] = x[2 * r] * std::cos(a) - x[2 * r + 1] * std::sin(a);
    y[2 * r + 1] = x[2 * r] * std::sin(a) + x[2 * r + 1] * std::cos(a);
  }
  return y;
}

}  // namespace

TEST(Registry, DefaultsAndCustom) {
  DistanceRegistry reg = DistanceRegistry::defaults();
  EXPECT_EQ(reg.names(), (std::vector<std::string>{"alibi", "gaussian-decay", "log-decay"}));
  EXPECT_EQ(reg.make("alibi")(3.0), -3.0);
  EXPECT_DOUBLE_EQ(reg.make("log-decay")(std::exp(1.0) - 1.0), -1.0);
  EXPECT_DOUBLE_EQ(reg.make("gaussian-decay", 2.0)(2.0), -0.5);
  EXPECT_THROW(reg.make("gaussian-decay", 0.0), std::domain_error);
  EXPECT_THROW(reg.make("nope"), std::invalid_argument);
  reg.add("flat", [](double) { return DistanceFunction{"flat", [](double) { return 0.0; }}; });
  EXPECT_EQ(reg.make("flat")(9.0), 0.0);
}

TEST(RpeLogits, AlphaZeroIsContent) {
  testutil::Gen g(1);
  const auto z = content(g, 10);
  EXPECT_EQ(rpe_logits(z, RpeConfig{0.0, alibi_distance(), 11}), z);
}

TEST(RpeLogits, AlibiShift) {
  const int T = 8;
  const std::vector<double> z(T, 0.0);
  const auto out = rpe_logits(z, RpeConfig{1.0, alibi_distance(), T + 1});
  for (int j = 1; j <= T; ++j) EXPECT_EQ(out[j - 1], -(T + 1.0 - j));
}

TEST(RpeLogits, LogDecayElementwise) {
  testutil::Gen g(2);
  const auto z = content(g, 12);
  const double alpha = 1.7;
  const auto out = rpe_logits(z, RpeConfig{alpha, log_decay_distance(), 15});
  for (int j = 1; j <= 12; ++j) EXPECT_NEAR(out[j - 1], z[j - 1] + alpha * -std::log1p(15.0 - j), 1e-15);
}

TEST(NearWindow, Validation) {
  const auto b = alibi_distance();
  EXPECT_NO_THROW(NearWindow::for_rpe({7, 8}, 8, b, 9));
  EXPECT_THROW(NearWindow::for_rpe({1, 2}, 8, b, 9), std::domain_error);
  EXPECT_THROW(NearWindow::for_rpe({}, 8, b, 9), std::domain_error);
  EXPECT_THROW(NearWindow::unchecked({1, 2, 3}, 3), std::domain_error);
  EXPECT_THROW(NearWindow::unchecked({0, 1}, 3), std::domain_error);
  EXPECT_THROW(NearWindow::unchecked({1}, 1), std::domain_error);
  EXPECT_NO_THROW(NearWindow::for_rope({3}, {3, 2, 1}));
  EXPECT_THROW(NearWindow::for_rope({1}, {3, 2, 1}), std::domain_error);
}

TEST(NearWindow, RecentItemPositions) {
  EXPECT_EQ(NearWindow::recent_item_positions(3, 2, 1), (std::vector<int>{5, 6}));
  EXPECT_EQ(NearWindow::recent_item_positions(4, 3, 2), (std::vector<int>{7, 8, 9, 10, 11, 12}));
  EXPECT_THROW(NearWindow::recent_item_positions(3, 2, 4), std::domain_error);
}

TEST(NearMass, UniformCases) {
  const int T = 10;
  std::vector<int> all_but_one;
  for (int j = 2; j <= T; ++j) all_but_one.push_back(j);
  const std::vector<double> w(T, 1.0 / T);
  EXPECT_NEAR(near_mass(w, NearWindow::unchecked(all_but_one, T)), (T - 1.0) / T, 1e-15);

  const std::vector<double> z(T, 0.3);
  const auto win = NearWindow::for_rpe(tail(T, 3), T, alibi_distance(), T + 1);
  EXPECT_NEAR(near_mass(softmax(rpe_logits(z, RpeConfig{0.0, alibi_distance(), T + 1})), win), 0.3, 1e-15);
}

TEST(NearMass, RandomAgainstOracle) {
  testutil::Gen g(3);
  const int T = 16;
  const auto z = content(g, T);
  const auto win = NearWindow::for_rpe(tail(T, 5), T, alibi_distance(), T + 1);
  const auto w = testutil::softmax_ld(rpe_logits(z, RpeConfig{0.8, alibi_distance(), T + 1}));
  double ref = 0.0;
  for (int j = T - 4; j <= T; ++j) ref += w[j - 1];
  EXPECT_NEAR(near_mass(softmax(rpe_logits(z, RpeConfig{0.8, alibi_distance(), T + 1})), win), ref, 1e-14);
  EXPECT_THROW(near_mass(std::vector<double>{0.5, 0.5}, win), std::domain_error);
}

TEST(NearMassDerivative, FlatDistanceIsZero) {
  testutil::Gen g(4);
  const DistanceFunction flat{"flat", [](double) { return -2.0; }};
  const auto win = NearWindow::for_rpe(tail(8, 2), 8, flat, 9);
  EXPECT_NEAR(near_mass_derivative(content(g, 8), RpeConfig{1.3, flat, 9}, win), 0.0, 1e-16);
}

TEST(NearMassDerivative, MatchesCentralDifference) {
  // 1000 random instances, T <= 32, d <= 16, step 1e-5.
  testutil::Gen g(5);
  const auto reg = DistanceRegistry::defaults();
  const std::vector<std::string> families{"alibi", "log-decay", "gaussian-decay"};
  for (int t = 0; t < 1000; ++t) {
    const int T = g.integer(2, 32), d = g.integer(1, 16);
    const auto q = g.vec(d);
    const Matrix k = g.mat(T, d);
    const auto z = scaled_dot_logits(q, k, d);
    const auto b = reg.make(families[t % 3], g.uniform(1.0, 8.0));
    const int decoder_pos = T + g.integer(1, 4);
    const auto win = NearWindow::for_rpe(tail(T, g.integer(1, T - 1)), T, b, decoder_pos);
    const double alpha = g.uniform(0.0, 5.0), h = 1e-5;
    const double an = near_mass_derivative(z, RpeConfig{alpha, b, decoder_pos}, win);
    EXPECT_GE(an, -1e-12);
    auto w_at = [&](double a) { return softmax(rpe_logits(z, RpeConfig{a, b, decoder_pos})); };
    const double fd = -(far_mass(w_at(alpha + h), win) - far_mass(w_at(alpha - h), win)) / (2 * h);
    if (an == 0.0) {
      EXPECT_NEAR(fd, 0.0, 1e-12);
    } else {
      EXPECT_LE(std::abs(an - fd) / std::abs(an), 1e-6) << "instance " << t << " T=" << T << " alpha=" << alpha;
    }
  }
}

TEST(RpeSweep, MonotoneForAssumptionWindows) {
  testutil::Gen g(6);
  std::vector<double> grid;
  for (int k = 0; k <= 50; ++k) grid.push_back(0.1 * k);
  for (int t = 0; t < 100; ++t) {
    const int T = 16;
    const auto z = content(g, T);
    const auto b = t % 2 ? alibi_distance() : log_decay_distance();
    const auto win = NearWindow::for_rpe(tail(T, g.integer(1, 8)), T, b, T + 1);
    const auto rep = rpe_monotonicity_sweep(z, win, b, T + 1, grid);
    EXPECT_TRUE(rep.monotone);
    ASSERT_EQ(rep.points.size(), grid.size());
    for (std::size_t i = 1; i < grid.size(); ++i)
      EXPECT_GE(rep.points[i].near_mass - rep.points[i - 1].near_mass, -kMonotoneSlack);
  }
}

TEST(RpeSweep, SinglePointAndErrors) {
  const std::vector<double> z(4, 0.0);
  const auto win = NearWindow::for_rpe({4}, 4, alibi_distance(), 5);
  EXPECT_TRUE(rpe_monotonicity_sweep(z, win, alibi_distance(), 5, std::vector<double>{2.0}).monotone);
  EXPECT_THROW(rpe_monotonicity_sweep(z, win, alibi_distance(), 5, std::vector<double>{1.0, 0.5}),
               std::domain_error);
}

TEST(RpeSweep, FarWindowDecreases) {
  // Violates the near-logit assumption on purpose.
  testutil::Gen g(7);
  const int T = 12;
  const auto z = content(g, T);
  const auto win = NearWindow::unchecked({1, 2, 3}, T);
  std::vector<double> grid;
  for (int k = 0; k <= 50; ++k) grid.push_back(0.1 * k);
  const auto rep = rpe_monotonicity_sweep(z, win, alibi_distance(), T + 1, grid);
  EXPECT_FALSE(rep.monotone);
  EXPECT_LT(rep.points.back().near_mass, rep.points.front().near_mass);
}

TEST(Nondecreasing, Slack) {
  std::vector<SweepPoint> pts{{0, 0.5, 0}, {1, 0.5 - 5e-10, 0}, {2, 0.6, 0}};
  EXPECT_TRUE(nondecreasing(pts));
  pts[1].near_mass = 0.5 - 2e-9;
  EXPECT_FALSE(nondecreasing(pts));
}

TEST(Rope, ThetaZeroIsPlainDot) {
  testutil::Gen g(8);
  const auto cfg = rope(4, 0.0);
  const auto q = g.vec(8);
  const Matrix k = g.mat(6, 8);
  const auto a = rope_logits(q, k, 9, cfg);
  const auto b = scaled_dot_logits(q, k, 8);
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(a[j], b[j], 1e-15);
}

TEST(Rope, SamePositionInvariant) {
  testutil::Gen g(9);
  const auto cfg = rope(3, 0.37);
  const auto q = g.vec(6);
  Matrix k(3, 6);
  for (int c = 0; c < 6; ++c) k(2, c) = g.normal();
  // Key row 2 sits at position 3 = decoder position.
  const auto z = rope_logits(q, k, 3, cfg);
  double plain = 0.0;
  for (int c = 0; c < 6; ++c) plain += q[c] * k(2, c);
  EXPECT_NEAR(z[2], plain / std::sqrt(6.0), 1e-14);
}

TEST(Rope, MatchesExplicitRotation) {
  testutil::Gen g(10);
  for (int t = 0; t < 50; ++t) {
    const auto cfg = rope(4, g.uniform(0.0, 2.0));
    const auto q = g.vec(8);
    const Matrix k = g.mat(10, 8);
    const int lt = g.integer(10, 40);
    const auto z = rope_logits(q, k, lt, cfg);
    const auto qr = rotate(q, cfg, lt);
    for (int j = 1; j <= 10; ++j) {
      std::vector<double> kj(8);
      for (int c = 0; c < 8; ++c) kj[c] = k(j - 1, c);
      const auto kr = rotate(kj, cfg, j);
      double s = 0.0;
      for (int c = 0; c < 8; ++c) s += qr[c] * kr[c];
      EXPECT_NEAR(z[j - 1], s / std::sqrt(8.0), 1e-12);
    }
  }
}

TEST(Rope, DecomposeExamples) {
  RopeConfig c;
  c.head_dim = 2;
  c.freqs = {1.0};
  const auto t = rope_decompose(std::vector<double>{1, 0}, std::vector<double>{1, 0}, c);
  EXPECT_NEAR(t[0].amplitude, 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(t[0].phase, 0.0);
  const auto u = rope_decompose(std::vector<double>{1, 0}, std::vector<double>{0, 1}, c);
  EXPECT_NEAR(u[0].phase, std::numbers::pi / 2, 1e-15);
  const auto z = rope_decompose(std::vector<double>{0, 0}, std::vector<double>{0, 1}, c);
  EXPECT_EQ(z[0].amplitude, 0.0);
  EXPECT_EQ(z[0].phase, 0.0);
  EXPECT_THROW(rope_decompose(std::vector<double>{1, 0, 0}, std::vector<double>{1, 0, 0}, c), std::domain_error);
}

TEST(Rope, ReconstructionIdentity) {
  testutil::Gen g(11);
  for (int t = 0; t < 1000; ++t) {
    const auto q = g.vec(8), kk = g.vec(8);
    Matrix k(1, 8);
    for (int c = 0; c < 8; ++c) k(0, c) = kk[c];
    const auto cfg = rope(4, g.uniform(0.0, 3.0));
    const int lt = g.integer(1, 200);
    const auto terms = rope_decompose(q, kk, cfg);
    EXPECT_NEAR(rope_logits(q, k, lt, cfg)[0], rope_reconstruct(terms, cfg, lt - 1), 1e-12);
  }
}

TEST(Rope, OddDimensionRejected) {
  RopeConfig c;
  c.head_dim = 3;
  c.freqs = {1.0};
  EXPECT_THROW(c.validate(), std::domain_error);
  RopeConfig d = rope(2, 0.1);
  std::swap(d.freqs[0], d.freqs[1]);
  EXPECT_THROW(d.validate(), std::domain_error);
}

TEST(SmallAngle, Examples) {
  RopeConfig c;
  c.head_dim = 2;
  c.freqs = {1.0};
  EXPECT_NEAR(small_angle_bound(c, std::numbers::pi / 2), 1.0, 1e-15);
  c.head_dim = 4;
  c.freqs = {0.5, 2.0};
  EXPECT_NEAR(small_angle_bound(c, 8.0), std::numbers::pi / 32, 1e-15);
  c.freqs = {1e-4};
  c.head_dim = 2;
  EXPECT_NEAR(small_angle_bound(c, std::numbers::pi / (2 * 1e-4)), 1.0, 1e-12);
  EXPECT_THROW(small_angle_bound(c, 0.0), std::domain_error);
  c.freqs.clear();
  EXPECT_THROW(small_angle_bound(c, 1.0), std::domain_error);
}

TEST(CoherentBand, DerivativeMatchesCentralDifference) {
  testutil::Gen g(12);
  for (int t = 0; t < 200; ++t) {
    const int T = g.integer(3, 24), R = g.integer(1, 4);
    CoherentBand band;
    for (int r = 0; r < R; ++r) band.amplitudes.push_back(g.uniform(0.0, 2.0));
    for (int j = 1; j <= T; ++j) band.distances.push_back(T + 1 - j);
    auto cfg = rope(R, 0.0, 100.0);
    const auto win = NearWindow::for_rope(tail(T, g.integer(1, T - 1)), band.distances);
    cfg.theta = g.uniform(0.0, small_angle_bound(cfg, T));
    const double an = coherent_near_mass_derivative(band, cfg, win);
    const double h = 1e-6;
    auto m = [&](double th) {
      auto c2 = cfg;
      c2.theta = th;
      return far_mass(softmax(coherent_logits(band, c2)), win);
    };
    const double fd = -(m(cfg.theta + h) - m(cfg.theta - h)) / (2 * h);
    EXPECT_GE(an, -1e-12);
    if (std::abs(an) > 1e-9) EXPECT_LE(std::abs(an - fd) / std::abs(an), 1e-6) << t;
    else EXPECT_NEAR(fd, 0.0, 1e-8);
  }
}

TEST(CoherentBand, MonotoneBelowBound) {
  testutil::Gen g(13);
  for (int t = 0; t < 100; ++t) {
    const int T = 16;
    CoherentBand band;
    for (int r = 0; r < 4; ++r) band.amplitudes.push_back(g.uniform(0.0, 1.5));
    for (int j = 1; j <= T; ++j) band.distances.push_back(T + 1 - j);
    const auto cfg = rope(4, 0.0);
    const auto win = NearWindow::for_rope(tail(T, g.integer(1, 6)), band.distances);
    const double bound = small_angle_bound(cfg, T);
    std::vector<double> grid;
    for (int k = 0; k <= 40; ++k) grid.push_back(bound * k / 40);
    grid.back() = bound;
    EXPECT_TRUE(coherent_band_sweep(band, cfg, win, grid).monotone);
  }
}

TEST(CoherentBand, GridBeyondBoundRejected) {
  CoherentBand band{{1.0}, {3, 2, 1}};
  RopeConfig cfg;
  cfg.head_dim = 2;
  cfg.freqs = {1.0};
  const auto win = NearWindow::for_rope({3}, band.distances);
  const double bound = small_angle_bound(cfg, 3);
  EXPECT_TRUE(coherent_band_sweep(band, cfg, win, std::vector<double>{0.0}).monotone);
  EXPECT_THROW(coherent_band_sweep(band, cfg, win, std::vector<double>{0.0, 1.5 * bound}), std::domain_error);
  EXPECT_NO_THROW(coherent_band_free_sweep(band, cfg, win, std::vector<double>{0.0, 1.5 * bound}));
}

TEST(CoherentBand, NonmonotoneOutsideRegime) {
  // Single block, far positions swing past pi and regain mass.
  CoherentBand band{{2.0}, {}};
  const int T = 8;
  for (int j = 1; j <= T; ++j) band.distances.push_back(T + 1 - j);
  RopeConfig cfg;
  cfg.head_dim = 2;
  cfg.freqs = {1.0};
  const auto win = NearWindow::for_rope({T}, band.distances);
  const double bound = small_angle_bound(cfg, T);
  std::vector<double> grid;
  for (int k = 0; k <= 400; ++k) grid.push_back(20 * bound * k / 400);
  const auto rep = coherent_band_free_sweep(band, cfg, win, grid);
  EXPECT_FALSE(rep.monotone);
}
