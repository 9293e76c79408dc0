#include <benchmark/benchmark.h>

#include <random>

#include "capslid/model.hpp"
#include "capslid/train.hpp"

namespace {

capslid::ModelInput random_input(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  capslid::ModelInput input;
  input.pixels.resize(32 * 25);
  for (double& v : input.pixels)
    v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return input;
}

void BM_ForwardReduced(benchmark::State& state) {
  auto params = capslid::ModelParams::init(capslid::ModelConfig::reduced(), 1);
  capslid::CapsNetGraph graph(params);
  auto input = random_input(2);
  graph.set_example(input, 0);
  for (auto _ : state) {
    graph.forward_norms_only();
    benchmark::DoNotOptimize(graph.outputs());
  }
}
BENCHMARK(BM_ForwardReduced);

void BM_ForwardFull(benchmark::State& state) {
  auto params = capslid::ModelParams::init(capslid::ModelConfig{}, 1);
  capslid::CapsNetGraph graph(params);
  graph.set_example(random_input(2), 0);
  for (auto _ : state) {
    graph.forward_norms_only();
    benchmark::DoNotOptimize(graph.outputs());
  }
}
BENCHMARK(BM_ForwardFull)->Unit(benchmark::kMillisecond);

void BM_ForwardBackwardFull(benchmark::State& state) {
  auto params = capslid::ModelParams::init(capslid::ModelConfig{}, 1);
  capslid::CapsNetGraph graph(params);
  graph.set_example(random_input(2), 0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(graph.forward_total_loss());
    graph.backward();
  }
}
BENCHMARK(BM_ForwardBackwardFull)->Unit(benchmark::kMillisecond);

void BM_DynamicRouting(benchmark::State& state) {
  std::mt19937_64 rng(3);
  capslid::Tensor uhat({800, 32, 8});
  for (double& v : uhat.data)
    v = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
  for (auto _ : state)
    benchmark::DoNotOptimize(capslid::dynamic_routing(uhat, 3));
}
BENCHMARK(BM_DynamicRouting)->Unit(benchmark::kMillisecond);

void BM_Predict(benchmark::State& state) {
  auto params = capslid::ModelParams::init(capslid::ModelConfig{}, 1);
  capslid::Predictor predictor(params);
  auto input = random_input(4);
  for (auto _ : state) benchmark::DoNotOptimize(predictor(input));
}
BENCHMARK(BM_Predict)->Unit(benchmark::kMillisecond);

}  // namespace
