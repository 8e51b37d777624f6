#include <gtest/gtest.h>

#include <cmath>

#include "attnbias/latent_noise.hpp"

using namespace attnbias;

TEST(NoiseSpec, Validate) {
  EXPECT_NO_THROW((NoiseSpec{{0.0, 1.0}}).validate());
  EXPECT_THROW((NoiseSpec{{1.0}}).validate(), std::domain_error);
  EXPECT_THROW((NoiseSpec{{1.0, -0.1}}).validate(), std::domain_error);
  EXPECT_THROW((NoiseSpec{{1.0, NAN}}).validate(), std::domain_error);
}

TEST(SampleAttention, ZeroNoiseIsUniform) {
  CounterRng rng(1);
  Vector z;
  const auto w = sample_attention(NoiseSpec{{0, 0, 0, 0}}, rng, &z);
  for (int i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(w[i], 0.25);
    EXPECT_EQ(z[i], 0.0);
  }
}

TEST(SampleAttention, WeightsAreSoftmaxOfLogits) {
  CounterRng rng(2);
  for (int t = 0; t < 100; ++t) {
    Vector z;
    const auto w = sample_attention(NoiseSpec{{0.5, 1.0, 2.0}}, rng, &z);
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += std::exp(z[i]);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(w[i], std::exp(z[i]) / s, 1e-14);
    EXPECT_NEAR(log_odds(w, 0, 2), z[0] - z[2], 1e-12);
  }
}

TEST(LogOdds, ExamplesAndErrors) {
  const std::vector<double> w{0.5, 0.25, 0.25};
  EXPECT_NEAR(log_odds(w, 0, 1), std::log(2.0), 1e-15);
  EXPECT_EQ(log_odds(w, 1, 2), 0.0);
  EXPECT_THROW(log_odds(w, 1, 1), std::domain_error);
  EXPECT_THROW(log_odds(w, 0, 3), std::domain_error);
  EXPECT_THROW(log_odds(std::vector<double>{1.0, 0.0}, 0, 1), std::domain_error);
}

TEST(ExpectedOdds, Values) {
  EXPECT_DOUBLE_EQ(expected_odds(0, 0), 1.0);
  EXPECT_NEAR(expected_odds(1, 1), std::exp(1.0), 1e-15);
  EXPECT_NEAR(expected_odds(0.3, 0.4), std::exp(0.125), 1e-15);
  // Strictly increasing in each sigma.
  double prev = 0.0;
  for (double s = 0.0; s <= 3.0; s += 0.1) {
    const double v = expected_odds(s, 0.5);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(NormalCdf, Values) {
  EXPECT_DOUBLE_EQ(normal_cdf(0.0), 0.5);
  EXPECT_NEAR(normal_cdf(1.0), 0.841344746068543, 1e-15);
  EXPECT_NEAR(normal_cdf(-1.96), 0.024997895148220435, 1e-15);
  EXPECT_NEAR(normal_cdf(-10.0), 7.619853024160593e-24, 1e-36);
}

TEST(Dominance, ValuesAndMonotone) {
  // log 2 / sqrt(0.5) = 0.98025...
  EXPECT_NEAR(dominance_probability(2.0, 0.5, 0.5), 0.16347935512873757, 1e-14);
  EXPECT_NEAR(dominance_probability(2.0, 1.0, 0.0), 0.24410859578558275, 1e-14);
  double prev = 0.0;
  for (double s = 0.1; s <= 4.0; s += 0.1) {
    const double v = dominance_probability(3.0, s, 0.2);
    EXPECT_GT(v, prev);
    EXPECT_LT(v, 0.5);
    prev = v;
  }
  EXPECT_THROW(dominance_probability(1.0, 1, 1), std::domain_error);
  EXPECT_THROW(dominance_probability(2.0, 0, 0), std::domain_error);
}

TEST(McMoments, MatchesLognormalPrediction) {
  const NoiseSpec spec{{0.3, 0.6, 1.0}};
  const auto r = mc_moments(spec, 0, 2, 50000, 7);
  EXPECT_EQ(r.n_draws, 50000);
  EXPECT_DOUBLE_EQ(r.predicted_mean, 0.0);
  EXPECT_NEAR(r.predicted_var, 1.09, 1e-15);
  EXPECT_LE(std::abs(r.mean_z), 4.0);
  EXPECT_LE(std::abs(r.var_z), 4.0);
  EXPECT_LE(std::abs(r.tail_z), 4.0);
  EXPECT_TRUE(r.ratio_checked);
  EXPECT_NEAR(r.ratio_predicted, std::exp(0.545), 1e-12);
  EXPECT_LE(r.ratio_rel_err, kRatioRelTol);
  EXPECT_TRUE(r.pass);
}

TEST(McMoments, ZeroNoisePair) {
  const auto r = mc_moments(NoiseSpec{{0.0, 0.0, 1.0}}, 0, 1, 200, 3);
  EXPECT_EQ(r.empirical_mean, 0.0);
  EXPECT_EQ(r.empirical_var, 0.0);
  EXPECT_EQ(r.ratio_mean, 1.0);
  EXPECT_TRUE(r.pass);
}

TEST(McMoments, LargeSigmaSkipsRatio) {
  const auto r = mc_moments(NoiseSpec{{2.0, 0.5}}, 0, 1, 1000, 4);
  EXPECT_FALSE(r.ratio_checked);
}

TEST(McMoments, ThreadsAndErrors) {
  const NoiseSpec spec{{0.4, 0.7}};
  const auto a = mc_moments(spec, 0, 1, 5000, 9, 2.0, 1);
  const auto b = mc_moments(spec, 0, 1, 5000, 9, 2.0, 3);
  EXPECT_EQ(a.empirical_mean, b.empirical_mean);
  EXPECT_EQ(a.empirical_var, b.empirical_var);
  EXPECT_EQ(a.tail_empirical, b.tail_empirical);
  EXPECT_THROW(mc_moments(spec, 0, 1, 99, 1), std::domain_error);
  EXPECT_THROW(mc_moments(spec, 0, 0, 1000, 1), std::domain_error);
  EXPECT_THROW(mc_moments(spec, 0, 2, 1000, 1), std::domain_error);
}

TEST(McMoments, Json) {
  const auto j = to_json(mc_moments(NoiseSpec{{0.4, 0.7}}, 0, 1, 500, 9));
  EXPECT_EQ(j.at("n_draws"), 500);
  EXPECT_TRUE(j.contains("pass"));
  EXPECT_TRUE(j.contains("predicted_var"));
}
