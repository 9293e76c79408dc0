#include "capslid/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace capslid {

namespace {
constexpr double kLogEpsilon = 1e-10;
}

StftConfig StftConfig::for_clip_seconds(int clip_seconds) {
  StftConfig cfg;
  if (clip_seconds <= 5) {
    cfg.n_bins = 64;
    cfg.pps = 10;
  } else {
    cfg.n_bins = 129;
    cfg.pps = 50;
  }
  return cfg;
}

void StftConfig::validate(int sample_rate_hz) const {
  if (n_bins < 2)
    throw Error(ErrorKind::ShapeMismatch, "n_bins must be at least 2");
  if (pps <= 0) throw Error(ErrorKind::ShapeMismatch, "pps must be positive");
  if (hop_samples(sample_rate_hz) < 1)
    throw Error(ErrorKind::ShapeMismatch, "hop shorter than one sample");
}

std::vector<double> hann_window(int size) {
  std::vector<double> w(size);
  for (int n = 0; n < size; ++n)
    w[n] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / size));
  return w;
}

std::vector<PcmSignal> clip_segments(const PcmSignal& signal, int clip_seconds) {
  const std::size_t clip_len =
      static_cast<std::size_t>(clip_seconds) * signal.sample_rate_hz;
  if (signal.samples.size() < clip_len)
    throw Error(ErrorKind::TooShort,
                "signal is " + std::to_string(signal.duration_seconds()) +
                    " s, need " + std::to_string(clip_seconds) + " s");
  std::vector<PcmSignal> out;
  for (std::size_t start = 0; start + clip_len <= signal.samples.size();
       start += clip_len) {
    PcmSignal seg;
    seg.sample_rate_hz = signal.sample_rate_hz;
    seg.samples.assign(signal.samples.begin() + start,
                       signal.samples.begin() + start + clip_len);
    out.push_back(std::move(seg));
  }
  return out;
}

std::vector<double> stft_frame_magnitudes(const PcmSignal& signal,
                                          std::size_t offset,
                                          const StftConfig& config) {
  const int fft = config.fft_size();
  if (offset + fft > signal.samples.size())
    throw Error(ErrorKind::TooShort, "frame extends past end of signal");

  static thread_local std::vector<double> window;
  static thread_local int window_size = 0;
  if (window_size != fft) {
    window = hann_window(fft);
    window_size = fft;
  }

  std::vector<double> frame(fft);
  for (int n = 0; n < fft; ++n)
    frame[n] = signal.samples[offset + n] * window[n];

  // Direct real DFT over the kept bins. Frames are short (<= 256) and the
  // twiddle tables are cached per (fft, n_bins), so this stays cheap.
  static thread_local std::vector<double> cos_tab, sin_tab;
  static thread_local int tab_fft = 0, tab_bins = 0;
  if (tab_fft != fft || tab_bins != config.n_bins) {
    cos_tab.assign(static_cast<std::size_t>(config.n_bins) * fft, 0.0);
    sin_tab.assign(static_cast<std::size_t>(config.n_bins) * fft, 0.0);
    for (int k = 0; k < config.n_bins; ++k)
      for (int n = 0; n < fft; ++n) {
        double angle = -2.0 * std::numbers::pi * k * n / fft;
        cos_tab[static_cast<std::size_t>(k) * fft + n] = std::cos(angle);
        sin_tab[static_cast<std::size_t>(k) * fft + n] = std::sin(angle);
      }
    tab_fft = fft;
    tab_bins = config.n_bins;
  }

  std::vector<double> mags(config.n_bins);
  for (int k = 0; k < config.n_bins; ++k) {
    const double* ct = &cos_tab[static_cast<std::size_t>(k) * fft];
    const double* st = &sin_tab[static_cast<std::size_t>(k) * fft];
    double re = 0.0, im = 0.0;
    for (int n = 0; n < fft; ++n) {
      re += frame[n] * ct[n];
      im += frame[n] * st[n];
    }
    mags[k] = std::hypot(re, im);
  }
  return mags;
}

Spectrogram stft(const PcmSignal& signal, const StftConfig& config) {
  config.validate(signal.sample_rate_hz);
  const int fft = config.fft_size();
  const int hop = config.hop_samples(signal.sample_rate_hz);
  if (signal.samples.size() < static_cast<std::size_t>(fft))
    throw Error(ErrorKind::TooShort,
                "need at least " + std::to_string(fft) + " samples, got " +
                    std::to_string(signal.samples.size()));

  const std::size_t frames = (signal.samples.size() - fft) / hop + 1;
  Spectrogram spec;
  spec.time_px = frames;
  spec.n_bins = static_cast<std::size_t>(config.n_bins);
  spec.config = config;
  spec.magnitudes_db.resize(frames * spec.n_bins);
  for (std::size_t t = 0; t < frames; ++t) {
    auto mags = stft_frame_magnitudes(signal, t * hop, config);
    for (std::size_t b = 0; b < spec.n_bins; ++b) {
      double db = 20.0 * std::log10(mags[b] + kLogEpsilon);
      spec.magnitudes_db[t * spec.n_bins + b] = std::max(db, config.floor_db);
    }
  }
  return spec;
}

std::vector<double> resize_bilinear(const std::vector<double>& src,
                                    std::size_t src_rows, std::size_t src_cols,
                                    std::size_t dst_rows, std::size_t dst_cols) {
  if (src_rows == 0 || src_cols == 0 || src.size() != src_rows * src_cols)
    throw Error(ErrorKind::ShapeMismatch, "resize_bilinear: bad source grid");
  std::vector<double> dst(dst_rows * dst_cols);
  const double row_scale = static_cast<double>(src_rows) / dst_rows;
  const double col_scale = static_cast<double>(src_cols) / dst_cols;
  for (std::size_t r = 0; r < dst_rows; ++r) {
    double sy = (r + 0.5) * row_scale - 0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(src_rows - 1));
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, src_rows - 1);
    const double fy = sy - y0;
    for (std::size_t c = 0; c < dst_cols; ++c) {
      double sx = (c + 0.5) * col_scale - 0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(src_cols - 1));
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, src_cols - 1);
      const double fx = sx - x0;
      const double top = src[y0 * src_cols + x0] * (1 - fx) + src[y0 * src_cols + x1] * fx;
      const double bot = src[y1 * src_cols + x0] * (1 - fx) + src[y1 * src_cols + x1] * fx;
      dst[r * dst_cols + c] = top * (1 - fy) + bot * fy;
    }
  }
  return dst;
}

ModelInput resize_to_model_input(const Spectrogram& spec) {
  if (spec.time_px == 0 || spec.n_bins == 0)
    throw Error(ErrorKind::ShapeMismatch, "empty spectrogram");
  ModelInput input;
  input.pixels = resize_bilinear(spec.magnitudes_db, spec.time_px, spec.n_bins,
                                 ModelInput::kRows, ModelInput::kCols);
  auto [lo_it, hi_it] = std::minmax_element(input.pixels.begin(), input.pixels.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo <= 0.0) {
    std::fill(input.pixels.begin(), input.pixels.end(), 0.5);
  } else {
    for (double& p : input.pixels) p = (p - lo) / (hi - lo);
  }
  return input;
}

std::vector<std::uint8_t> encode_pgm(const Spectrogram& spec) {
  const double lo = spec.config.floor_db;
  double hi = lo;
  for (double v : spec.magnitudes_db) hi = std::max(hi, v);
  const double span = hi > lo ? hi - lo : 1.0;

  std::string header = "P5\n" + std::to_string(spec.n_bins) + " " +
                       std::to_string(spec.time_px) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + spec.magnitudes_db.size());
  for (double v : spec.magnitudes_db) {
    double g = (v - lo) / span * 255.0;
    out.push_back(static_cast<std::uint8_t>(std::clamp(g, 0.0, 255.0)));
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Spectrogram& spec) {
  auto bytes = encode_pgm(spec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::IoError, "write failed: " + path.string());
}

}  // namespace capslid
