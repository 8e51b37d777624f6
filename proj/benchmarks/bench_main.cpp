#include <benchmark/benchmark.h>

#include <random>

#include "attnbias/attention.hpp"
#include "attnbias/generative_model.hpp"
#include "attnbias/latent_noise.hpp"
#include "attnbias/popularity.hpp"
#include "attnbias/positional_bias.hpp"
#include "attnbias/retraining.hpp"

using namespace attnbias;

namespace {

std::vector<double> random_vec(std::size_t n, CounterRng& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

void BM_Softmax(benchmark::State& state) {
  CounterRng rng(1);
  const auto z = random_vec(static_cast<std::size_t>(state.range(0)), rng);
  for (auto _ : state) benchmark::DoNotOptimize(softmax(z));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Softmax)->Arg(16)->Arg(256)->Arg(4096);

void BM_RpeSweep(benchmark::State& state) {
  CounterRng rng(2);
  const int T = static_cast<int>(state.range(0));
  const auto content = random_vec(static_cast<std::size_t>(T), rng);
  const DistanceFunction b = alibi_distance();
  const NearWindow w = NearWindow::for_rpe({T - 1, T}, T, b, T + 1);
  std::vector<double> grid;
  for (int i = 0; i <= 50; ++i) grid.push_back(0.1 * i);
  for (auto _ : state) benchmark::DoNotOptimize(rpe_monotonicity_sweep(content, w, b, T + 1, grid));
}
BENCHMARK(BM_RpeSweep)->Arg(16)->Arg(256);

void BM_ConstrainedDecode(benchmark::State& state) {
  CounterRng rng(3);
  const int items = static_cast<int>(state.range(0));
  const Catalog cat = Catalog::random(TokenVocab{8}, 3, items, rng);
  const ModelWeights w = ModelWeights::gaussian(8, 16, rng);
  History h;
  for (int i = 0; i < 8; ++i) h.items.push_back(i % items);
  for (auto _ : state) benchmark::DoNotOptimize(constrained_decode(w, cat, h));
}
BENCHMARK(BM_ConstrainedDecode)->Arg(16)->Arg(128);

void BM_SgdRun(benchmark::State& state) {
  Matrix means(2, 8);
  means(0, 0) = 1.0;
  means(1, 1) = 1.0;
  const TokenStats stats({800, 200}, means);
  TrainConfig cfg;
  cfg.steps = static_cast<int>(state.range(0));
  const HeadParams init = HeadParams::symmetric(2, std::vector<double>(8, 0.0));
  for (auto _ : state) {
    CounterRng rng(4);
    benchmark::DoNotOptimize(sgd_run(stats, cfg, init, rng));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SgdRun)->Arg(500);

void BM_LatentMoments(benchmark::State& state) {
  const NoiseSpec spec{{0.3, 0.6, 1.0}};
  for (auto _ : state) benchmark::DoNotOptimize(mc_moments(spec, 0, 2, static_cast<int>(state.range(0)), 5));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_LatentMoments)->Arg(10000);

void BM_RetrainRounds(benchmark::State& state) {
  const RetrainContext ctx{std::vector<double>(4, 0.25), 10, 10};
  for (auto _ : state) benchmark::DoNotOptimize(run_rounds(ctx, 20, static_cast<int>(state.range(0)), 6));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_RetrainRounds)->Arg(2000);

}  // namespace

BENCHMARK_MAIN();
