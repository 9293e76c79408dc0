// capslid/dataset.hpp
//
// Loading manifest splits into preprocessed model inputs.

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "capslid/datagen.hpp"
#include "capslid/dsp.hpp"

namespace capslid {

struct LabeledDataset {
  std::vector<ModelInput> inputs;
  std::vector<int> labels;

  std::size_t size() const { return inputs.size(); }
  bool empty() const { return inputs.empty(); }
};

// decode -> stft -> resize for one clip, using the rendering mode that
// matches the clip length (5 s: 64 bins at 10 pps; 10 s: 129 bins at 50 pps).
ModelInput preprocess_clip(const PcmSignal& signal, int clip_seconds = 5);

// Reads every record of `split`, decodes and preprocesses it. The corpus is
// fixed at 16 kHz; any other rate is rejected (UnsupportedFormat). Records
// keep manifest order.
LabeledDataset load_split(const std::filesystem::path& manifest_path,
                          const CorpusManifest& manifest,
                          const std::string& split, int workers = 0);

}  // namespace capslid
