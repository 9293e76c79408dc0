// capslid/dsp.hpp
//
// Audio -> spectrogram image front end: fixed-length clipping, Hann-window
// STFT with dB magnitudes, and bilinear resize down to the 32x25 input
// image the classifier consumes.

#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include "capslid/error.hpp"
#include "capslid/wav.hpp"

namespace capslid {

struct StftConfig {
  int n_bins = 64;        // frequency bins kept (fft_size/2 + 1)
  int pps = 10;           // spectrogram pixels per second of audio
  double floor_db = -80.0;

  int fft_size() const { return 2 * (n_bins - 1); }
  int hop_samples(int sample_rate_hz) const { return sample_rate_hz / pps; }

  // The two rendering modes used by the pipeline: 5 s clips at 64 bins /
  // 10 pps (native 50x64) and 10 s clips at 129 bins / 50 pps (native
  // 500x129). Both are later resized to 32x25.
  static StftConfig for_clip_seconds(int clip_seconds);

  void validate(int sample_rate_hz) const;
};

// dB magnitudes, rows = time frames, cols = frequency bins.
struct Spectrogram {
  std::size_t time_px = 0;
  std::size_t n_bins = 0;
  std::vector<double> magnitudes_db;  // row-major [time_px x n_bins]
  StftConfig config;

  double at(std::size_t t, std::size_t b) const {
    return magnitudes_db[t * n_bins + b];
  }
};

// 32x25 image with values in [0, 1]; the network's sole input.
struct ModelInput {
  static constexpr std::size_t kRows = 32;
  static constexpr std::size_t kCols = 25;
  std::vector<double> pixels;  // row-major [kRows x kCols]

  double at(std::size_t r, std::size_t c) const { return pixels[r * kCols + c]; }
};

// Periodic Hann window w[n] = 0.5 * (1 - cos(2*pi*n/N)), n in [0, N).
std::vector<double> hann_window(int size);

// Splits into non-overlapping clip_seconds segments; the trailing remainder
// is dropped. Throws TooShort if not even one clip fits.
std::vector<PcmSignal> clip_segments(const PcmSignal& signal, int clip_seconds);

// Linear magnitudes of one Hann-windowed frame (length fft_size starting at
// `offset`), bins 0..n_bins-1. Exposed so tests can check spectral identities
// on the raw magnitudes before the dB mapping.
std::vector<double> stft_frame_magnitudes(const PcmSignal& signal,
                                          std::size_t offset,
                                          const StftConfig& config);

// Full short-time transform. Frame t starts at t*hop; magnitudes go through
// 20*log10(mag + 1e-10) and are clamped below at floor_db.
Spectrogram stft(const PcmSignal& signal, const StftConfig& config);

// Bilinear resample with half-pixel-center alignment (the convention of the
// usual image libraries). Output bounds never exceed input bounds.
std::vector<double> resize_bilinear(const std::vector<double>& src,
                                    std::size_t src_rows, std::size_t src_cols,
                                    std::size_t dst_rows, std::size_t dst_cols);

// Resize to 32x25 then min-max normalize to [0, 1]. A constant image maps
// to all 0.5 (the normalization is otherwise undefined there).
ModelInput resize_to_model_input(const Spectrogram& spec);

// P5 grey-map export for visual inspection; dB values are mapped linearly
// from [floor_db, max] to [0, 255].
std::vector<std::uint8_t> encode_pgm(const Spectrogram& spec);
void write_pgm(const std::filesystem::path& path, const Spectrogram& spec);

}  // namespace capslid
