#include "capslid/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace capslid {

ModelInput preprocess_clip(const PcmSignal& signal, int clip_seconds) {
  const StftConfig cfg = StftConfig::for_clip_seconds(clip_seconds);
  return resize_to_model_input(stft(signal, cfg));
}

LabeledDataset load_split(const std::filesystem::path& manifest_path,
                          const CorpusManifest& manifest,
                          const std::string& split, int workers) {
  const auto records = manifest.split(split);
  if (records.empty())
    throw Error(ErrorKind::EmptyDataset,
                "manifest has no '" + split + "' records");
  const auto root = manifest_path.parent_path();

  LabeledDataset data;
  data.inputs.resize(records.size());
  data.labels.resize(records.size());

  int n_threads = workers > 0 ? workers
                              : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<int>(n_threads, 8);
  std::vector<std::string> failures(n_threads);
  auto body = [&](int t) {
    try {
      for (std::size_t i = t; i < records.size(); i += n_threads) {
        const auto& rec = records[i];
        PcmSignal signal = read_wav_file(root / rec.path);
        if (signal.sample_rate_hz != kCorpusSampleRate)
          throw Error(ErrorKind::UnsupportedFormat,
                      rec.path + ": corpus requires " +
                          std::to_string(kCorpusSampleRate) + " Hz, got " +
                          std::to_string(signal.sample_rate_hz));
        const int clip_seconds =
            static_cast<int>(std::llround(rec.duration_s));
        data.inputs[i] = preprocess_clip(signal, clip_seconds);
        data.labels[i] = rec.label;
      }
    } catch (const std::exception& e) {
      failures[t] = e.what();
    }
  };
  if (n_threads <= 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(body, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(ErrorKind::IoError, f);
  return data;
}

}  // namespace capslid
