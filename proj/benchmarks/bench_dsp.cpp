#include <benchmark/benchmark.h>

#include <random>

#include "capslid/datagen.hpp"
#include "capslid/dataset.hpp"
#include "capslid/dsp.hpp"

namespace {

capslid::PcmSignal noise_clip(double seconds) {
  std::mt19937_64 rng(1);
  capslid::PcmSignal s;
  s.sample_rate_hz = 16000;
  const std::size_t n = static_cast<std::size_t>(seconds * 16000);
  for (std::size_t i = 0; i < n; ++i)
    s.samples.push_back(2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) -
                        1.0);
  return s;
}

void BM_Stft5s(benchmark::State& state) {
  auto clip = noise_clip(5.0);
  auto cfg = capslid::StftConfig::for_clip_seconds(5);
  for (auto _ : state) benchmark::DoNotOptimize(capslid::stft(clip, cfg));
}
BENCHMARK(BM_Stft5s);

void BM_Stft10s(benchmark::State& state) {
  auto clip = noise_clip(10.0);
  auto cfg = capslid::StftConfig::for_clip_seconds(10);
  for (auto _ : state) benchmark::DoNotOptimize(capslid::stft(clip, cfg));
}
BENCHMARK(BM_Stft10s);

void BM_ResizeToModelInput(benchmark::State& state) {
  auto spec = capslid::stft(noise_clip(5.0), capslid::StftConfig::for_clip_seconds(5));
  for (auto _ : state)
    benchmark::DoNotOptimize(capslid::resize_to_model_input(spec));
}
BENCHMARK(BM_ResizeToModelInput);

void BM_PreprocessClip(benchmark::State& state) {
  auto clip = noise_clip(5.0);
  for (auto _ : state)
    benchmark::DoNotOptimize(capslid::preprocess_clip(clip, 5));
}
BENCHMARK(BM_PreprocessClip);

void BM_GenerateClip(benchmark::State& state) {
  auto sig = capslid::default_signatures()[0];
  std::uint64_t seed = 0;
  for (auto _ : state)
    benchmark::DoNotOptimize(capslid::generate_clip(sig, 5.0, seed++));
}
BENCHMARK(BM_GenerateClip);

}  // namespace
