#include "capslid/datagen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>

namespace capslid {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kDriftRateHz = 0.15;      // fundamental wanders at this rate
constexpr double kAmDepth = 0.7;           // envelope floor is 1 - depth
constexpr double kHarmonicCut = 0.05;      // relative amplitude below which a
                                           // harmonic is not synthesized
constexpr int kMaxHarmonics = 60;
constexpr double kPeakTarget = 0.9;

double unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double resonance_response(const ClassSignature& sig, double freq_hz) {
  double r = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = freq_hz - sig.resonance_hz[i];
    const double bw = sig.resonance_bw_hz[i];
    r += bw * bw / (d * d + bw * bw);
  }
  return r;
}

}  // namespace

std::vector<ClassSignature> default_signatures(int n_in_set, int n_nonclass) {
  static const std::vector<ClassSignature> table = {
      {0, 110, 130, {700, 1200, 2600}, {80, 100, 120}, 3.0, 0.02},
      {1, 170, 190, {500, 1800, 3400}, {70, 110, 140}, 4.5, 0.02},
      {2, 230, 260, {900, 2200, 4200}, {90, 120, 160}, 6.0, 0.02},
      {3, 140, 160, {1100, 2900, 5200}, {90, 130, 180}, 2.2, 0.02},
      {4, 300, 340, {600, 1500, 4800}, {75, 100, 170}, 7.5, 0.02},
      {5, 200, 220, {800, 2000, 6000}, {80, 110, 200}, 5.2, 0.02},
      {6, 120, 145, {950, 2500, 3800}, {85, 115, 150}, 3.8, 0.02},
      {7, 260, 290, {750, 1650, 5600}, {70, 105, 190}, 6.8, 0.02},
  };
  const int total = n_in_set + n_nonclass;
  if (n_in_set <= 0 || n_nonclass < 0 ||
      total > static_cast<int>(table.size()))
    throw Error(ErrorKind::ShapeMismatch,
                "at most " + std::to_string(table.size()) +
                    " built-in signatures");
  return {table.begin(), table.begin() + total};
}

PcmSignal generate_clip(const ClassSignature& sig, double duration_s,
                        std::uint64_t seed) {
  if (duration_s < 5.0)
    throw Error(ErrorKind::TooShort, "clips are at least 5 s");
  const double nyquist = kCorpusSampleRate / 2.0;
  if (sig.f0_high_hz >= nyquist ||
      *std::max_element(sig.resonance_hz.begin(), sig.resonance_hz.end()) >=
          nyquist)
    throw Error(ErrorKind::UnsupportedFormat, "signature exceeds Nyquist");

  const std::size_t n =
      static_cast<std::size_t>(std::llround(duration_s * kCorpusSampleRate));
  std::mt19937_64 rng(seed);
  const double drift_phase = kTwoPi * unit(rng);
  const double am_phase = kTwoPi * unit(rng);

  const int harm_count = std::min(
      kMaxHarmonics, static_cast<int>(0.975 * nyquist / sig.f0_high_hz));
  std::vector<double> phase(harm_count), amp(harm_count);
  for (int k = 0; k < harm_count; ++k) phase[k] = kTwoPi * unit(rng);

  const double f0_mid = 0.5 * (sig.f0_low_hz + sig.f0_high_hz);
  double amp_max = 0.0;
  for (int k = 0; k < harm_count; ++k) {
    amp[k] = resonance_response(sig, (k + 1) * f0_mid);
    amp_max = std::max(amp_max, amp[k]);
  }
  std::vector<int> active;
  for (int k = 0; k < harm_count; ++k)
    if (amp[k] >= kHarmonicCut * amp_max) active.push_back(k);

  PcmSignal out;
  out.sample_rate_hz = kCorpusSampleRate;
  out.samples.resize(n);
  const double dt = 1.0 / kCorpusSampleRate;
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = i * dt;
    const double f0 =
        sig.f0_low_hz + (sig.f0_high_hz - sig.f0_low_hz) *
                            (0.5 + 0.5 * std::sin(kTwoPi * kDriftRateHz * t +
                                                  drift_phase));
    double tone = 0.0;
    for (int k : active) {
      tone += amp[k] * std::sin(phase[k]);
      // phase advances with the drifting fundamental; wrap to keep precision
      phase[k] += kTwoPi * (k + 1) * f0 * dt;
      if (phase[k] > kTwoPi) phase[k] -= kTwoPi * std::floor(phase[k] / kTwoPi);
    }
    const double env =
        1.0 - kAmDepth * (0.5 + 0.5 * std::sin(kTwoPi * sig.am_rate_hz * t +
                                               am_phase));
    const double noise = sig.noise_level * (2.0 * unit(rng) - 1.0);
    out.samples[i] = env * tone + noise;
    peak = std::max(peak, std::abs(out.samples[i]));
  }
  if (peak > 0.0) {
    const double scale = kPeakTarget / peak;
    for (double& s : out.samples) s *= scale;
  }
  return out;
}

std::vector<ManifestRecord> CorpusManifest::split(const std::string& name) const {
  std::vector<ManifestRecord> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(r);
  return out;
}

CorpusManifest build_corpus(const CorpusSpec& spec,
                            const std::filesystem::path& out_dir, int workers) {
  const auto signatures = default_signatures(spec.n_in_set, spec.n_nonclass);

  struct Job {
    ManifestRecord record;
    const ClassSignature* signature;
  };
  std::vector<Job> jobs;

  char name[64];
  auto add_in_set = [&](const std::string& split, std::uint64_t seed_base,
                        int per_class) {
    for (int c = 0; c < spec.n_in_set; ++c)
      for (int i = 0; i < per_class; ++i) {
        std::snprintf(name, sizeof(name), "%s/class%d_%04d.wav", split.c_str(),
                      c, i);
        ManifestRecord rec{name, c, split,
                           static_cast<double>(spec.clip_seconds),
                           spec.base_seed + seed_base +
                               static_cast<std::uint64_t>(c) * 10000 +
                               static_cast<std::uint64_t>(i)};
        jobs.push_back({std::move(rec), &signatures[c]});
      }
  };
  add_in_set("train", 0, spec.train_per_class);
  add_in_set("test", 1000000, spec.test_per_class);
  add_in_set("calib", 2000000, spec.calib_per_class);
  for (int i = 0; i < spec.nonclass_clips; ++i) {
    const int sig_idx = spec.n_in_set + (spec.n_nonclass > 0 ? i % spec.n_nonclass : 0);
    std::snprintf(name, sizeof(name), "nonclass/class%d_%04d.wav", sig_idx, i);
    ManifestRecord rec{name, sig_idx, "nonclass",
                       static_cast<double>(spec.clip_seconds),
                       spec.base_seed + 3000000 + static_cast<std::uint64_t>(i)};
    jobs.push_back({std::move(rec), &signatures[sig_idx]});
  }

  std::error_code ec;
  for (const char* sub : {"train", "test", "calib", "nonclass"}) {
    std::filesystem::create_directories(out_dir / sub, ec);
    if (ec)
      throw Error(ErrorKind::IoError,
                  "cannot create " + (out_dir / sub).string() + ": " + ec.message());
  }

  int n_threads = workers > 0 ? workers
                              : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<int>(n_threads, 8);
  std::vector<std::string> failures(n_threads);
  auto body = [&](int t) {
    try {
      for (std::size_t i = t; i < jobs.size(); i += n_threads) {
        const Job& job = jobs[i];
        auto clip = generate_clip(*job.signature, job.record.duration_s,
                                  job.record.seed);
        write_wav_file(out_dir / job.record.path, clip);
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

  CorpusManifest manifest;
  manifest.records.reserve(jobs.size());
  for (auto& job : jobs) manifest.records.push_back(std::move(job.record));
  save_manifest(out_dir / "manifest.jsonl", manifest);
  return manifest;
}

void save_manifest(const std::filesystem::path& path,
                   const CorpusManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::json j{{"path", r.path},
                     {"label", r.label},
                     {"split", r.split},
                     {"duration_s", r.duration_s},
                     {"seed", r.seed}};
    out << j.dump() << "\n";
  }
  if (!out) throw Error(ErrorKind::IoError, "write failed: " + path.string());
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  CorpusManifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw Error(ErrorKind::IoError,
                  path.string() + ":" + std::to_string(line_no) +
                      ": invalid JSON");
    ManifestRecord r;
    r.path = j.at("path");
    r.label = j.at("label");
    r.split = j.at("split");
    r.duration_s = j.at("duration_s");
    r.seed = j.at("seed");
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

}  // namespace capslid
