#include "attnbias/retraining.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "attnbias/parallel.hpp"

namespace attnbias {

namespace {

double z_score(double diff, double se) {
  if (se > 0.0) return diff / se;
  return std::abs(diff) <= 1e-12 ? 0.0 : std::numeric_limits<double>::infinity();
}

void add_draws(std::vector<int>& counts, std::span<const double> p, int draws, CounterRng& rng) {
  std::discrete_distribution<std::size_t> dist(p.begin(), p.end());
  for (int i = 0; i < draws; ++i) ++counts[dist(rng)];
}

}  // namespace

void RetrainContext::validate() const {
  if (p0.size() < 2) throw std::domain_error("RetrainContext: need at least two options");
  double sum = 0.0;
  for (double x : p0) {
    if (!std::isfinite(x) || x < 0.0) throw std::domain_error("RetrainContext: p0 entries must be nonnegative");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-12) throw std::domain_error("RetrainContext: p0 must sum to 1");
  if (organic_n <= 1) throw std::domain_error("RetrainContext: N must exceed 1");
  if (delegated_n <= 1) throw std::domain_error("RetrainContext: N_hat must exceed 1");
}

ClosedFormParams ClosedFormParams::from_context(const RetrainContext& ctx) {
  ctx.validate();
  ClosedFormParams p;
  p.n = ctx.organic_n;
  p.alpha = delegation_share(ctx.organic_n, ctx.delegated_n);
  p.beta = p.alpha * ((1.0 + 1.0 / p.n) * p.alpha - 1.0 / p.n);
  p.s0 = concentration(ctx.p0);
  return p;
}

std::vector<double> RoundState::p() const {
  std::vector<double> out(counts.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(counts[i]) / total;
  return out;
}

double delegation_share(int n, int n_hat) {
  if (n <= 0) throw std::domain_error("delegation_share: N must be positive");
  if (n_hat < 0) throw std::domain_error("delegation_share: N_hat must be nonnegative");
  return static_cast<double>(n_hat) / (n + n_hat);
}

double concentration(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) s += x * x;
  return s;
}

double concentration(const RoundState& state) {
  // Integer sum of squares first, one division at the end.
  long long ss = 0;
  for (int c : state.counts) ss += static_cast<long long>(c) * c;
  return static_cast<double>(ss) / (static_cast<double>(state.total) * state.total);
}

RoundState sample_round(const RetrainContext& ctx, const RoundState* prev, CounterRng& rng) {
  ctx.validate();
  const std::size_t s = ctx.options();
  RoundState next;
  if (!prev) {
    next.round = 1;
    next.organic_counts.assign(s, 0);
    add_draws(next.organic_counts, ctx.p0, ctx.organic_n, rng);
    next.counts = next.organic_counts;
    next.total = ctx.organic_n;
    return next;
  }
  if (prev->counts.size() != s) throw std::domain_error("sample_round: previous state has the wrong size");
  next.round = prev->round + 1;
  if (ctx.fresh_organic) {
    next.organic_counts.assign(s, 0);
    add_draws(next.organic_counts, ctx.p0, ctx.organic_n, rng);
  } else {
    next.organic_counts = prev->organic_counts;
  }
  next.counts = next.organic_counts;
  add_draws(next.counts, prev->p(), ctx.delegated_n, rng);
  next.total = ctx.organic_n + ctx.delegated_n;
  return next;
}

double closed_form_S(const ClosedFormParams& params, int round) {
  if (round < 1) throw std::domain_error("closed_form_S: rounds start at 1");
  const double inv_n = 1.0 / params.n;
  if (round == 1) return inv_n + (1.0 - inv_n) * params.s0;
  const double a = params.alpha;
  const double denom = 1.0 + (1.0 + inv_n) * a;
  const double stationary = (inv_n * (1.0 + 2.0 * a) + (1.0 - inv_n) * (1.0 + a) * params.s0) / denom;
  const double transient = inv_n * (1.0 - inv_n) * (1.0 - params.s0) * a * std::pow(params.beta, round - 1) / denom;
  return stationary - transient;
}

double limit_concentration(const ClosedFormParams& params) {
  if (params.beta >= 1.0) throw std::domain_error("limit_concentration: beta must be below 1");
  const double inv_n = 1.0 / params.n;
  const double a = params.alpha;
  return (inv_n * (1.0 + 2.0 * a) + (1.0 - inv_n) * (1.0 + a) * params.s0) / (1.0 + (1.0 + inv_n) * a);
}

ConcentrationTrajectory run_rounds(const RetrainContext& ctx, int rounds, int replicas, std::uint64_t seed,
                                   unsigned threads) {
  ctx.validate();
  if (rounds < 1) throw std::domain_error("run_rounds: need at least one round");
  if (replicas < 2) throw std::domain_error("run_rounds: need at least two replicas");
  const std::size_t R = static_cast<std::size_t>(rounds), s = ctx.options();

  // conc[i][r], p[i][r * s + k]
  std::vector<std::vector<double>> conc(static_cast<std::size_t>(replicas));
  std::vector<std::vector<double>> probs(static_cast<std::size_t>(replicas));
  parallel_for(conc.size(), threads, [&](std::size_t i) {
    CounterRng rng = CounterRng::stream(seed, EngineId::retrain, i);
    conc[i].reserve(R);
    probs[i].reserve(R * s);
    RoundState state = sample_round(ctx, nullptr, rng);
    for (std::size_t r = 0; r < R; ++r) {
      if (r > 0) state = sample_round(ctx, &state, rng);
      conc[i].push_back(concentration(state));
      const auto p = state.p();
      probs[i].insert(probs[i].end(), p.begin(), p.end());
    }
  });

  const ClosedFormParams params = ClosedFormParams::from_context(ctx);
  const double n = replicas;
  ConcentrationTrajectory out;
  out.replicas = replicas;
  for (std::size_t r = 0; r < R; ++r) {
    RoundStat st;
    st.round = static_cast<int>(r) + 1;
    double sum = 0.0;
    for (const auto& c : conc) sum += c[r];
    st.mc_mean = sum / n;
    double ss = 0.0;
    for (const auto& c : conc) ss += (c[r] - st.mc_mean) * (c[r] - st.mc_mean);
    st.mc_se = std::sqrt(ss / (n - 1.0) / n);
    st.closed_form = closed_form_S(params, st.round);
    st.z = z_score(st.mc_mean - st.closed_form, st.mc_se);

    for (std::size_t k = 0; k < s; ++k) {
      double m = 0.0;
      for (const auto& p : probs) m += p[r * s + k];
      m /= n;
      double v = 0.0;
      for (const auto& p : probs) v += (p[r * s + k] - m) * (p[r * s + k] - m);
      st.mean_p.push_back(m);
      st.mean_p_z.push_back(z_score(m - ctx.p0[k], std::sqrt(v / (n - 1.0) / n)));
    }
    out.rounds.push_back(std::move(st));
  }
  return out;
}

RetrainComparison mc_vs_closed_form(const RetrainContext& ctx, int rounds, int replicas, std::uint64_t seed,
                                    unsigned threads) {
  if (replicas < 100) throw std::domain_error("mc_vs_closed_form: need at least 100 replicas");
  RetrainComparison cmp;
  cmp.trajectory = run_rounds(ctx, rounds, replicas, seed, threads);
  const ClosedFormParams params = ClosedFormParams::from_context(ctx);
  cmp.limit = limit_concentration(params);
  cmp.closed_form_increasing = true;
  double prev = -std::numeric_limits<double>::infinity();
  for (const RoundStat& st : cmp.trajectory.rounds) {
    cmp.max_abs_z = std::max(cmp.max_abs_z, std::abs(st.z));
    for (double z : st.mean_p_z) cmp.max_abs_mean_p_z = std::max(cmp.max_abs_mean_p_z, std::abs(z));
    cmp.closed_form_increasing = cmp.closed_form_increasing && st.closed_form > prev;
    prev = st.closed_form;
  }
  cmp.pass = cmp.max_abs_z <= 3.0;
  return cmp;
}

nlohmann::json to_json(const RetrainContext& ctx) {
  return nlohmann::json{{"p0", ctx.p0}, {"N", ctx.organic_n}, {"N_hat", ctx.delegated_n}, {"s", ctx.options()}};
}

}  // namespace attnbias
