// capslid/wav.hpp
//
// Minimal RIFF/WAVE support: read PCM signed 16-bit little-endian mono,
// write the same. That is the only audio container the pipeline touches.

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "capslid/error.hpp"

namespace capslid {

// Mono waveform, samples in [-1, 1].
struct PcmSignal {
  std::vector<double> samples;
  int sample_rate_hz = 0;

  double duration_seconds() const {
    return sample_rate_hz > 0
               ? static_cast<double>(samples.size()) / sample_rate_hz
               : 0.0;
  }
};

// Parses a RIFF/WAVE byte buffer. Requires PCM 16-bit mono; samples are
// scaled by 1/32768. Throws MalformedWav on structural problems and
// UnsupportedFormat on any other encoding (float, multichannel, ...).
PcmSignal decode_wav(const std::vector<std::uint8_t>& bytes);

// Serializes to PCM 16-bit mono. Samples are clamped to [-1, 1] and
// quantized with round(x * 32768) clamped to int16 range, so a decode of
// the result is within 1/32768 of the original.
std::vector<std::uint8_t> encode_wav(const PcmSignal& signal);

PcmSignal read_wav_file(const std::filesystem::path& path);
void write_wav_file(const std::filesystem::path& path, const PcmSignal& signal);

}  // namespace capslid
