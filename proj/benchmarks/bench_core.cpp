#include <benchmark/benchmark.h>

#include "caat/collectives.hpp"
#include "caat/model.hpp"
#include "caat/rng.hpp"
#include "caat/transformer.hpp"

using namespace caat;

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Tensor t({rows, cols});
  CounterRng rng(seed);
  for (auto& v : t.data()) v = rng.normal();
  return t;
}

RankSet gaussian_ranks(std::size_t ranks, std::size_t rows, std::size_t cols) {
  std::vector<Tensor> ts;
  for (std::size_t m = 0; m < ranks; ++m) ts.push_back(gaussian(rows, cols, m + 1));
  return RankSet(std::move(ts));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = gaussian(n, n, 1), b = gaussian(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_PartialReduce(benchmark::State& state) {
  const double p = static_cast<double>(state.range(0)) / 100.0;
  const RankSet x = gaussian_ranks(4, 128, 512);
  const PartialReduceSpec spec(p, 512, true, 4);
  CommLedger ledger;
  for (auto _ : state)
    benchmark::DoNotOptimize(partial_channel_reduce(x, spec, PrecisionMode::full64, &ledger));
}
BENCHMARK(BM_PartialReduce)->Arg(0)->Arg(50)->Arg(100);

ModelConfig layer_config(double p) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 128;
  cfg.heads = 4;
  cfg.seq_len = 32;
  cfg.ranks = 4;
  cfg.p = p;
  return cfg;
}

void BM_LayerForward(benchmark::State& state) {
  const ModelConfig cfg = layer_config(static_cast<double>(state.range(0)) / 100.0);
  const CaatModel model = CaatModel::init(cfg);
  const RankSet x = gaussian_ranks(cfg.ranks, 4 * cfg.seq_len, cfg.hidden);
  for (auto _ : state) benchmark::DoNotOptimize(layer_forward(x, model.layers[0], cfg.seq_len, ExecContext{}));
}
BENCHMARK(BM_LayerForward)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_LayerBackward(benchmark::State& state) {
  const ModelConfig cfg = layer_config(static_cast<double>(state.range(0)) / 100.0);
  const CaatModel model = CaatModel::init(cfg);
  const RankSet x = gaussian_ranks(cfg.ranks, 4 * cfg.seq_len, cfg.hidden);
  const auto [out, cache] = layer_forward(x, model.layers[0], cfg.seq_len, ExecContext{});
  for (auto _ : state)
    benchmark::DoNotOptimize(
        layer_backward(out, model.layers[0], cache, BackwardPlacement::h_after_norm, ExecContext{}));
}
BENCHMARK(BM_LayerBackward)->Arg(50)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
