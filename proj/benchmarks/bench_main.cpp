#include <benchmark/benchmark.h>

#include <random>

#include "ccmd/autodiff.hpp"
#include "ccmd/batch.hpp"
#include "ccmd/model.hpp"

namespace {

using namespace ccmd;

std::vector<double> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = noise(n * n, 1), b = noise(n * n, 2);
  for (auto _ : state) {
    ad::Tape tape;
    auto y = ad::matmul(tape.variable({n, n}, a), tape.variable({n, n}, b));
    tape.backward(ad::sum(y));
    benchmark::DoNotOptimize(tape.grad(y).data());
  }
  state.counters["flops"] = benchmark::Counter(3.0 * 2 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void forward_backward(benchmark::State& state, Arch arch) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.view = enc::View::ThreeD;
  const int atoms = static_cast<int>(state.range(0));
  const auto ds = mol::gen_synthetic(16, atoms, atoms, 3);
  const auto batch = mol::make_batch(std::span<const mol::Molecule>(ds.molecules));
  const auto store = init_model(cfg, 4);
  for (auto _ : state) {
    ad::Tape tape;
    ParamBinding params(tape, store);
    const auto out = model_forward(cfg, params, batch);
    tape.backward(ad::sum(out.prediction));
    benchmark::DoNotOptimize(params.gradients());
  }
  state.SetItemsProcessed(state.iterations() * 16);  // molecules
}

void BM_TransformerStep(benchmark::State& s) { forward_backward(s, Arch::Transformer); }
void BM_GinStep(benchmark::State& s) { forward_backward(s, Arch::Gin); }
BENCHMARK(BM_TransformerStep)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GinStep)->Arg(8)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
