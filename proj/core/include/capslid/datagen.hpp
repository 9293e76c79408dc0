// capslid/datagen.hpp
//
// Deterministic synthetic speech-like corpus. Each "language" class is a
// signature of fundamental-frequency band, three formant-like resonances,
// and a syllabic amplitude-modulation rate; clips are sums of drifting
// harmonics shaped by the resonances plus seeded noise. The classes are
// constructed to be separable in spectrogram space so a small model can
// learn them quickly.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "capslid/wav.hpp"

namespace capslid {

inline constexpr int kCorpusSampleRate = 16000;

struct ClassSignature {
  int class_id = 0;
  double f0_low_hz = 110.0;
  double f0_high_hz = 130.0;
  std::array<double, 3> resonance_hz{700.0, 1200.0, 2600.0};
  std::array<double, 3> resonance_bw_hz{80.0, 100.0, 120.0};
  double am_rate_hz = 3.0;   // syllabic rhythm
  double noise_level = 0.02; // white-noise amplitude before normalization
};

// The built-in signatures: n_in_set classification classes followed by
// n_nonclass out-of-set classes, pairwise distinct in several parameters.
std::vector<ClassSignature> default_signatures(int n_in_set = 5,
                                               int n_nonclass = 1);

// Fully determined by (signature, duration, seed); peak-normalized to 0.9
// at 16 kHz.
PcmSignal generate_clip(const ClassSignature& signature, double duration_s,
                        std::uint64_t seed);

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  int label = 0;     // >= n_in_set for the nonclass split
  std::string split; // train | test | calib | nonclass
  double duration_s = 0.0;
  std::uint64_t seed = 0;
};

struct CorpusManifest {
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> split(const std::string& name) const;
};

struct CorpusSpec {
  int n_in_set = 5;
  int n_nonclass = 1;
  int train_per_class = 200;
  int test_per_class = 50;
  int calib_per_class = 50;
  int nonclass_clips = 50;  // total across nonclass signatures
  int clip_seconds = 5;
  std::uint64_t base_seed = 1234;
};

// Writes WAV files plus manifest.jsonl under out_dir. Splits draw from
// disjoint seed ranges, so regeneration with the same base seed is
// bit-identical. Returns the manifest (also saved to out_dir).
CorpusManifest build_corpus(const CorpusSpec& spec,
                            const std::filesystem::path& out_dir,
                            int workers = 0);

void save_manifest(const std::filesystem::path& path,
                   const CorpusManifest& manifest);
CorpusManifest load_manifest(const std::filesystem::path& path);

}  // namespace capslid
