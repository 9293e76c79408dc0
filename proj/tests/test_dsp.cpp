#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "capslid/dsp.hpp"
#include "capslid/error.hpp"

using namespace capslid;

namespace {

PcmSignal sine(double freq_hz, double seconds, int rate = 16000,
               double amp = 0.5) {
  PcmSignal s;
  s.sample_rate_hz = rate;
  const std::size_t n = static_cast<std::size_t>(seconds * rate);
  for (std::size_t i = 0; i < n; ++i)
    s.samples.push_back(amp *
                        std::sin(2.0 * std::numbers::pi * freq_hz * i / rate));
  return s;
}

PcmSignal noise(double seconds, std::uint64_t seed, int rate = 16000) {
  std::mt19937_64 rng(seed);
  PcmSignal s;
  s.sample_rate_hz = rate;
  const std::size_t n = static_cast<std::size_t>(seconds * rate);
  for (std::size_t i = 0; i < n; ++i)
    s.samples.push_back(2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) -
                        1.0);
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("dsp");

TEST_CASE("clip segmentation drops the trailing remainder") {
  auto segs = clip_segments(noise(12.0, 1), 5);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].samples.size() == 5 * 16000);
  CHECK(segs[1].samples.size() == 5 * 16000);
}

TEST_CASE("exactly one clip") {
  CHECK(clip_segments(noise(5.0, 2), 5).size() == 1);
}

TEST_CASE("too-short signal") {
  try {
    clip_segments(noise(3.0, 3), 5);
    FAIL("expected TooShort");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::TooShort);
  }
}

TEST_CASE("hann window: periodic symmetry and zero start") {
  for (int n_bins : {64, 129}) {
    const int fft = 2 * (n_bins - 1);
    auto w = hann_window(fft);
    CHECK(w[0] == 0.0);
    for (int n = 1; n < fft; ++n)
      CHECK(w[n] == doctest::Approx(w[fft - n]).epsilon(1e-14));
    CHECK(w[fft / 2] == doctest::Approx(1.0));
  }
}

TEST_CASE("stft config derivations") {
  StftConfig five = StftConfig::for_clip_seconds(5);
  CHECK(five.n_bins == 64);
  CHECK(five.fft_size() == 126);
  CHECK(five.hop_samples(16000) == 1600);
  StftConfig ten = StftConfig::for_clip_seconds(10);
  CHECK(ten.n_bins == 129);
  CHECK(ten.fft_size() == 256);
  CHECK(ten.hop_samples(16000) == 320);
}

TEST_CASE("frame count arithmetic") {
  // 16 kHz, 16384 samples, fft 256, hop 1600 -> 11 frames
  StftConfig cfg;
  cfg.n_bins = 129;
  cfg.pps = 10;
  PcmSignal s = noise(16384.0 / 16000.0, 4);
  s.samples.resize(16384);
  auto spec = stft(s, cfg);
  CHECK(spec.time_px == 11);
  CHECK(spec.n_bins == 129);
}

TEST_CASE("all-zero signal hits the dB floor everywhere") {
  PcmSignal s;
  s.sample_rate_hz = 16000;
  s.samples.assign(16000, 0.0);
  auto spec = stft(s, StftConfig::for_clip_seconds(5));
  for (double v : spec.magnitudes_db) CHECK(v == -80.0);
}

TEST_CASE("bin-centered sine peaks at its own bin") {
  StftConfig cfg = StftConfig::for_clip_seconds(10);  // fft 256
  const int fft = cfg.fft_size();
  for (int k : {3, 17, 60, 100}) {
    const double freq = static_cast<double>(k) * 16000.0 / fft;
    auto spec = stft(sine(freq, 1.0), cfg);
    for (std::size_t t = 0; t < spec.time_px; ++t) {
      std::size_t best = 0;
      for (std::size_t b = 1; b < spec.n_bins; ++b)
        if (spec.at(t, b) > spec.at(t, best)) best = b;
      CHECK(best == static_cast<std::size_t>(k));
    }
  }
}

TEST_CASE("parseval identity on a windowed frame") {
  StftConfig cfg = StftConfig::for_clip_seconds(10);  // fft 256, full half-spectrum
  const int fft = cfg.fft_size();
  auto signal = noise(1.0, 9);
  auto mags = stft_frame_magnitudes(signal, 100, cfg);

  auto w = hann_window(fft);
  double time_energy = 0.0;
  for (int n = 0; n < fft; ++n) {
    const double v = signal.samples[100 + n] * w[n];
    time_energy += v * v;
  }
  // real-signal spectrum: bins 1..N/2-1 appear twice
  double freq_energy = mags[0] * mags[0] + mags[fft / 2] * mags[fft / 2];
  for (int k = 1; k < fft / 2; ++k) freq_energy += 2.0 * mags[k] * mags[k];
  freq_energy /= fft;
  CHECK(freq_energy ==
        doctest::Approx(time_energy).epsilon(1e-6));
}

TEST_CASE("stft is deterministic") {
  auto s = noise(5.0, 11);
  auto a = stft(s, StftConfig::for_clip_seconds(5));
  auto b = stft(s, StftConfig::for_clip_seconds(5));
  CHECK(a.magnitudes_db == b.magnitudes_db);
}

TEST_CASE("native sizes for the two rendering modes") {
  auto spec5 = stft(noise(5.0, 12), StftConfig::for_clip_seconds(5));
  CHECK(spec5.time_px == 50);
  CHECK(spec5.n_bins == 64);
  auto spec10 = stft(noise(10.0, 13), StftConfig::for_clip_seconds(10));
  CHECK(spec10.time_px == 500);
  CHECK(spec10.n_bins == 129);
}

TEST_CASE("bilinear resize matches the reference formula") {
  // upsample [[0,1],[0,1]] and check against a direct evaluation of the
  // half-pixel-center bilinear formula
  const std::vector<double> src = {0.0, 1.0, 0.0, 1.0};
  const std::size_t dst_rows = 5, dst_cols = 7;
  auto out = resize_bilinear(src, 2, 2, dst_rows, dst_cols);
  for (std::size_t r = 0; r < dst_rows; ++r)
    for (std::size_t c = 0; c < dst_cols; ++c) {
      double sy = (r + 0.5) * (2.0 / dst_rows) - 0.5;
      double sx = (c + 0.5) * (2.0 / dst_cols) - 0.5;
      sy = std::clamp(sy, 0.0, 1.0);
      sx = std::clamp(sx, 0.0, 1.0);
      const std::size_t y0 = static_cast<std::size_t>(sy);
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min<std::size_t>(y0 + 1, 1);
      const std::size_t x1 = std::min<std::size_t>(x0 + 1, 1);
      const double fy = sy - y0, fx = sx - x0;
      const double expected =
          src[y0 * 2 + x0] * (1 - fy) * (1 - fx) +
          src[y0 * 2 + x1] * (1 - fy) * fx +
          src[y1 * 2 + x0] * fy * (1 - fx) + src[y1 * 2 + x1] * fy * fx;
      CHECK(out[r * dst_cols + c] == doctest::Approx(expected).epsilon(1e-14));
    }
}

TEST_CASE("identity-size resize passes values through") {
  std::mt19937_64 rng(21);
  std::vector<double> src(32 * 25);
  for (double& v : src) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  auto out = resize_bilinear(src, 32, 25, 32, 25);
  CHECK(out == src);
}

TEST_CASE("resize preserves value bounds") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 2 + rng() % 60, cols = 2 + rng() % 60;
    std::vector<double> src(rows * cols);
    for (double& v : src)
      v = -80.0 + 80.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
    const double lo = *std::min_element(src.begin(), src.end());
    const double hi = *std::max_element(src.begin(), src.end());
    auto out = resize_bilinear(src, rows, cols, 32, 25);
    for (double v : out) {
      CHECK(v >= lo - 1e-12);
      CHECK(v <= hi + 1e-12);
    }
  }
}

TEST_CASE("model input is normalized to [0,1]") {
  auto spec = stft(noise(5.0, 23), StftConfig::for_clip_seconds(5));
  auto input = resize_to_model_input(spec);
  REQUIRE(input.pixels.size() == 32 * 25);
  const double lo = *std::min_element(input.pixels.begin(), input.pixels.end());
  const double hi = *std::max_element(input.pixels.begin(), input.pixels.end());
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
}

TEST_CASE("constant spectrogram maps to all 0.5") {
  Spectrogram spec;
  spec.time_px = 40;
  spec.n_bins = 64;
  spec.magnitudes_db.assign(40 * 64, -3.0);
  auto input = resize_to_model_input(spec);
  for (double v : input.pixels) CHECK(v == 0.5);
}

TEST_CASE("pipeline produces no NaN/Inf") {
  auto s = noise(11.0, 24);
  for (auto& seg : clip_segments(s, 5)) {
    auto input = resize_to_model_input(stft(seg, StftConfig::for_clip_seconds(5)));
    for (double v : input.pixels) CHECK(std::isfinite(v));
  }
}

TEST_CASE("pgm export shape and header") {
  auto spec = stft(sine(1000.0, 5.0), StftConfig::for_clip_seconds(5));
  auto bytes = encode_pgm(spec);
  const std::string header(bytes.begin(), bytes.begin() + 13);
  CHECK(header.substr(0, 3) == "P5\n");
  CHECK(bytes.size() >= spec.time_px * spec.n_bins);
}

TEST_SUITE_END();
