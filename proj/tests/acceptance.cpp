// Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.
// Criteria 5, 6, 9 and 10 share one synthetic corpus and one trained model;
// they are built lazily the first time a criterion needs them.
//
// Usage: acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capslid/checkpoint.hpp"
#include "capslid/datagen.hpp"
#include "capslid/dataset.hpp"
#include "capslid/dsp.hpp"
#include "capslid/eval.hpp"
#include "capslid/model.hpp"
#include "capslid/nonclass.hpp"
#include "capslid/train.hpp"
#include "routing_oracle.hpp"

using namespace capslid;
namespace fs = std::filesystem;
using clock_type = std::chrono::steady_clock;

namespace {

struct CheckFailure {
  std::string message;
};

void expect(bool ok, const std::string& message) {
  if (!ok) throw CheckFailure{message};
}

double unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

ModelInput random_input(std::mt19937_64& rng) {
  ModelInput input;
  input.pixels.resize(32 * 25);
  for (double& v : input.pixels) v = unit(rng);
  return input;
}

// ---- shared corpus + trained model ----------------------------------------

struct SharedState {
  fs::path dir;
  CorpusManifest manifest;
  LabeledDataset train_set, test_set, calib_set, nonclass_set;
  std::unique_ptr<TrainResult> trained;
  TrainConfig train_cfg;
  double train_seconds = 0.0;
  double corpus_seconds = 0.0;
};

SharedState& shared() {
  static SharedState state;
  return state;
}

void ensure_corpus() {
  SharedState& s = shared();
  if (!s.manifest.records.empty()) return;
  const auto t0 = clock_type::now();
  s.dir = fs::temp_directory_path() / "capslid_acceptance";
  fs::remove_all(s.dir);
  CorpusSpec spec;  // 5 classes x (200 train / 50 test / 50 calib) + 50 nonclass
  spec.base_seed = 20240601;
  s.manifest = build_corpus(spec, s.dir, 0);
  const auto manifest_path = s.dir / "manifest.jsonl";
  s.train_set = load_split(manifest_path, s.manifest, "train", 0);
  s.test_set = load_split(manifest_path, s.manifest, "test", 0);
  s.calib_set = load_split(manifest_path, s.manifest, "calib", 0);
  s.nonclass_set = load_split(manifest_path, s.manifest, "nonclass", 0);
  s.corpus_seconds = std::chrono::duration<double>(clock_type::now() - t0).count();
  std::fprintf(stderr, "[setup] corpus: %zu clips in %.1fs\n",
               s.manifest.records.size(), s.corpus_seconds);
}

void ensure_trained() {
  SharedState& s = shared();
  if (s.trained) return;
  ensure_corpus();
  const auto t0 = clock_type::now();
  s.train_cfg = TrainConfig{};
  s.train_cfg.epochs = 12;
  s.train_cfg.seed = 321;
  ModelConfig model_cfg;
  s.trained = std::make_unique<TrainResult>(
      train(s.train_set, model_cfg, s.train_cfg, 0,
            [](const EpochStats& e) {
              std::fprintf(stderr,
                           "[setup] epoch %d  loss %.4f  train_acc %.3f\n",
                           e.epoch, e.mean_loss, e.train_acc);
            }));
  s.train_seconds = std::chrono::duration<double>(clock_type::now() - t0).count();
  std::fprintf(stderr, "[setup] training took %.1fs\n", s.train_seconds);
}

// ---- criteria ---------------------------------------------------------------

// 1. total_loss gradients vs central finite differences on the reduced model
std::string criterion_gradients() {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelParams params = ModelParams::init(ModelConfig::reduced(), seed);
    std::mt19937_64 rng(seed * 1000 + 17);
    CapsNetGraph graph(params);
    graph.set_example(random_input(rng), static_cast<int>(rng() % 5));
    auto report = finite_diff_check(graph.tape(), graph.loss_node(), {}, 1e-5,
                                    150, seed);
    expect(report.checked > 100, "too few comparable gradient entries");
    worst = std::max(worst, report.max_rel_error);
    expect(report.max_rel_error < 1e-4,
           "seed " + std::to_string(seed) + ": max rel err " +
               std::to_string(report.max_rel_error));
  }
  std::ostringstream os;
  os << "max_rel_err " << worst << " over 5 seeds";
  return os.str();
}

// 2. routing invariants on 1000 random instances + the I=2/J=2 oracle fixture
std::string criterion_routing() {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t I = 1 + rng() % 20, J = 1 + rng() % 8, D = 1 + rng() % 16;
    Tensor uhat({I, J, D});
    for (double& v : uhat.data) v = 4.0 * (2.0 * unit(rng) - 1.0);
    auto result = dynamic_routing(uhat, 3);
    for (std::size_t i = 0; i < I; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < J; ++j) {
        expect(result.couplings.at(i, j) >= 0.0, "negative coupling");
        sum += result.couplings.at(i, j);
      }
      expect(std::abs(sum - 1.0) <= 1e-9,
             "coupling row sums to " + std::to_string(sum));
    }
    for (std::size_t j = 0; j < J; ++j) {
      double nsq = 0.0;
      for (std::size_t d = 0; d < D; ++d)
        nsq += result.outputs.at(j, d) * result.outputs.at(j, d);
      expect(std::sqrt(nsq) < 1.0, "output norm not < 1");
    }
  }

  std::vector<std::vector<std::vector<double>>> uhat(
      2, std::vector<std::vector<double>>(2, std::vector<double>(2)));
  std::mt19937_64 rng2(77);
  for (auto& pi : uhat)
    for (auto& pj : pi)
      for (double& x : pj) x = 2.0 * unit(rng2) - 1.0;
  auto expected = routing_oracle::run(uhat, 3);
  Tensor t({2, 2, 2});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t d = 0; d < 2; ++d)
        t.data[(i * 2 + j) * 2 + d] = uhat[i][j][d];
  auto result = dynamic_routing(t, 3);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t d = 0; d < 2; ++d)
      expect(std::abs(result.outputs.at(j, d) - expected.v[j][d]) <= 1e-12,
             "oracle fixture mismatch");
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      expect(std::abs(result.couplings.at(i, j) - expected.c[i][j]) <= 1e-12,
             "oracle coupling mismatch");
  return "1000 instances + oracle fixture";
}

// 3. margin-loss examples hold exactly; zero iff the hinges are inactive
std::string criterion_loss_algebra() {
  MarginLossConfig cfg;
  CapsuleOutputs out;
  out.lang_vectors = Tensor({5, 16});

  out.norms = {0.95, 0.05, 0.05, 0.05, 0.05};
  expect(margin_loss(out, 0, cfg) == 0.0, "example 1 not exactly 0");
  out.norms = {0.0, 0.0, 0.0, 0.0, 0.0};
  expect(std::abs(margin_loss(out, 0, cfg) - 0.81) < 1e-15,
         "example 2 not 0.81");
  out.norms = {0.95, 0.6, 0.05, 0.05, 0.05};
  expect(std::abs(margin_loss(out, 0, cfg) - 0.125) < 1e-15,
         "example 3 not 0.125");

  std::mt19937_64 rng(3333);
  for (int trial = 0; trial < 10000; ++trial) {
    for (double& n : out.norms) n = unit(rng);
    const int label = static_cast<int>(rng() % 5);
    const double loss = margin_loss(out, label, cfg);
    expect(loss >= 0.0, "negative margin loss");
    bool inactive = out.norms[label] >= cfg.m_plus;
    for (int c = 0; c < 5; ++c)
      if (c != label && out.norms[c] > cfg.m_minus) inactive = false;
    expect((loss == 0.0) == inactive, "zero-loss condition mismatch");
  }
  return "3 worked examples exact; 10000 random vectors";
}

// 4. 50-sample balanced subset reaches 100% training accuracy within 50 epochs
std::string criterion_overfit() {
  auto sigs = default_signatures(5, 0);
  LabeledDataset data;
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 10; ++i) {
      data.inputs.push_back(
          preprocess_clip(generate_clip(sigs[c], 5.0, 5150 + c * 100 + i), 5));
      data.labels.push_back(c);
    }
  TrainConfig cfg;  // defaults: batch 32, lr 1e-3
  cfg.epochs = 50;
  cfg.seed = 11;
  int reached_at = -1;
  auto result = train(data, ModelConfig{}, cfg, 0,
                      [&](const EpochStats& e) {
                        if (reached_at < 0 && e.train_acc == 1.0)
                          reached_at = e.epoch;
                      });
  expect(reached_at > 0, "never reached 100% training accuracy in 50 epochs");
  return "100% train accuracy at epoch " + std::to_string(reached_at);
}

// 5. default desk corpus: test accuracy >= 0.90 within the epoch budget
std::string criterion_end_to_end() {
  ensure_trained();
  SharedState& s = shared();
  expect(s.train_cfg.epochs <= 30, "epoch budget exceeded");
  auto report = evaluate(s.trained->params, s.test_set, 0);
  std::ostringstream os;
  os << "test_acc " << report.accuracy << " after " << s.train_cfg.epochs
     << " epochs";
  if (report.macro_auc) os << ", macro_auc " << *report.macro_auc;
  expect(report.accuracy >= 0.90, os.str());
  return os.str();
}

// 6. threshold calibration flags >= 60% of held-out class, <= 10% of in-set
std::string criterion_nonclass() {
  ensure_trained();
  SharedState& s = shared();
  auto table = calibrate(s.trained->params, s.calib_set, 0);
  for (double tau : table.tau)
    expect(tau > 0.1 && tau < 1.0, "tau outside (0.1, 1.0)");

  std::size_t flagged = 0;
  for (const auto& input : s.nonclass_set.inputs)
    if (detect(s.trained->params, input, table).is_non_class) ++flagged;
  const double flag_rate =
      static_cast<double>(flagged) / s.nonclass_set.inputs.size();

  std::size_t false_flags = 0;
  for (const auto& input : s.test_set.inputs)
    if (detect(s.trained->params, input, table).is_non_class) ++false_flags;
  const double false_rate =
      static_cast<double>(false_flags) / s.test_set.inputs.size();

  std::ostringstream os;
  os << "nonclass flagged " << 100.0 * flag_rate << "%, in-set falsely flagged "
     << 100.0 * false_rate << "%";
  expect(flag_rate >= 0.60, os.str());
  expect(false_rate <= 0.10, os.str());
  return os.str();
}

// 7. trapezoid AUC == pairwise-ordering statistic on 100 random fixtures
std::string criterion_auc_oracle() {
  std::mt19937_64 rng(7777);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + rng() % 191;  // up to 200 samples
    std::vector<double> scores(n);
    std::vector<bool> positive(n);
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = static_cast<double>(rng() % 25) / 24.0;  // deliberate ties
      positive[i] = rng() % 2 == 0;
      has_pos = has_pos || positive[i];
      has_neg = has_neg || !positive[i];
    }
    if (!has_pos) positive[0] = true;
    if (!has_neg) positive[n - 1] = false;

    auto curve = roc_binary(scores, positive);
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!positive[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (positive[j]) continue;
        ++pairs;
        if (scores[i] > scores[j]) wins += 1.0;
        else if (scores[i] == scores[j]) wins += 0.5;
      }
    }
    const double mw = wins / static_cast<double>(pairs);
    expect(std::abs(curve.auc - mw) <= 1e-12,
           "AUC " + std::to_string(curve.auc) + " vs pairwise " +
               std::to_string(mw));
  }
  return "100 fixtures within 1e-12";
}

// 8. bin-centered sines peak at the right bin; Parseval within 1e-6
std::string criterion_stft_oracle() {
  std::mt19937_64 rng(888);
  const int rates[] = {8000, 16000, 22050, 32000, 44100, 48000};
  for (int trial = 0; trial < 20; ++trial) {
    StftConfig cfg = (trial % 2 == 0) ? StftConfig::for_clip_seconds(5)
                                      : StftConfig::for_clip_seconds(10);
    const int fs = rates[rng() % 6];
    const int fft = cfg.fft_size();
    const int k = 1 + static_cast<int>(rng() % (cfg.n_bins - 2));
    const double freq = static_cast<double>(k) * fs / fft;

    PcmSignal s;
    s.sample_rate_hz = fs;
    const std::size_t n = static_cast<std::size_t>(fs);
    for (std::size_t i = 0; i < n; ++i)
      s.samples.push_back(
          0.5 * std::sin(2.0 * std::numbers::pi * freq * i / fs));
    auto spec = stft(s, cfg);
    for (std::size_t t = 0; t < spec.time_px; ++t) {
      std::size_t best = 0;
      for (std::size_t b = 1; b < spec.n_bins; ++b)
        if (spec.at(t, b) > spec.at(t, best)) best = b;
      expect(best == static_cast<std::size_t>(k),
             "peak at bin " + std::to_string(best) + ", expected " +
                 std::to_string(k));
    }

    // Parseval on one frame of noise at this configuration
    PcmSignal noise;
    noise.sample_rate_hz = fs;
    for (int i = 0; i < 4 * fft; ++i) noise.samples.push_back(2.0 * unit(rng) - 1.0);
    auto mags = stft_frame_magnitudes(noise, 17, cfg);
    auto w = hann_window(fft);
    double time_energy = 0.0;
    for (int i = 0; i < fft; ++i) {
      const double v = noise.samples[17 + i] * w[i];
      time_energy += v * v;
    }
    double freq_energy = mags[0] * mags[0] + mags[fft / 2] * mags[fft / 2];
    for (int b = 1; b < fft / 2; ++b) freq_energy += 2.0 * mags[b] * mags[b];
    freq_energy /= fft;
    expect(std::abs(freq_energy - time_energy) <= 1e-6 * time_energy,
           "Parseval violated");
  }
  return "20 (k, fs) combinations";
}

// 9. same-seed determinism and bit-exact checkpoint round trip
std::string criterion_determinism() {
  ensure_trained();
  SharedState& s = shared();

  LabeledDataset small;
  for (std::size_t i = 0; i < 50; ++i) {
    small.inputs.push_back(s.train_set.inputs[i * 20]);
    small.labels.push_back(s.train_set.labels[i * 20]);
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 4242;
  auto a = train(small, ModelConfig{}, cfg, 1);
  auto b = train(small, ModelConfig{}, cfg, 2);  // different worker count
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    expect(a.history[e].mean_loss == b.history[e].mean_loss,
           "epoch loss differs between same-seed runs");
    expect(a.history[e].train_acc == b.history[e].train_acc,
           "epoch accuracy differs between same-seed runs");
  }

  const auto dir = s.dir / "ckpt";
  fs::create_directories(dir);
  Checkpoint ckpt;
  ckpt.step = s.trained->opt.step;
  ckpt.params = s.trained->params;
  ckpt.opt = s.trained->opt;
  ckpt.train_config = s.train_cfg;
  save_checkpoint(dir / "model.clid", ckpt);
  auto loaded1 = load_checkpoint(dir / "model.clid");
  save_checkpoint(dir / "model2.clid", loaded1);
  auto loaded2 = load_checkpoint(dir / "model2.clid");

  std::mt19937_64 rng(99);
  for (int i = 0; i < 5; ++i) {
    const auto& input = s.test_set.inputs[rng() % s.test_set.size()];
    auto o1 = forward(input, loaded1.params);
    auto o2 = forward(input, loaded2.params);
    expect(o1.norms == o2.norms && o1.lang_vectors.data == o2.lang_vectors.data,
           "forward outputs differ after checkpoint round trip");
    auto p0 = predict(s.trained->params, input);
    auto p1 = predict(loaded1.params, input);
    expect(p0.label == p1.label, "label changed by f32 storage");
  }
  return "2 runs identical; round trip bit-exact on 5 probes";
}

// 10. two-language 250 s concatenation: switch recovered within one snippet
std::string criterion_segmentation() {
  ensure_trained();
  SharedState& s = shared();
  auto sigs = default_signatures(5, 0);
  auto first = generate_clip(sigs[0], 125.0, 5001);
  auto second = generate_clip(sigs[1], 125.0, 5002);
  PcmSignal joined;
  joined.sample_rate_hz = kCorpusSampleRate;
  joined.samples = first.samples;
  joined.samples.insert(joined.samples.end(), second.samples.begin(),
                        second.samples.end());

  auto preds = segment_and_classify(s.trained->params, joined, 5);
  expect(preds.size() == 50, "expected 50 snippets, got " +
                                 std::to_string(preds.size()));

  // best step position: minimize disagreement with (class0 then class1)
  int best_b = 0;
  int best_cost = 1 << 30;
  for (int b = 0; b <= 50; ++b) {
    int cost = 0;
    for (int i = 0; i < 50; ++i) {
      const int want = i < b ? 0 : 1;
      if (preds[i].label != want) ++cost;
    }
    if (cost < best_cost) {
      best_cost = cost;
      best_b = b;
    }
  }
  std::ostringstream os;
  os << "switch recovered at snippet " << best_b << " (true 25), "
     << best_cost << " stray labels";
  expect(std::abs(best_b - 25) <= 1, os.str());
  return os.str();
}

struct Criterion {
  int id;
  const char* name;
  std::function<std::string()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  const std::vector<Criterion> criteria = {
      {1, "gradient-correctness", criterion_gradients},
      {2, "routing-invariants", criterion_routing},
      {3, "loss-algebra", criterion_loss_algebra},
      {4, "overfit-capacity", criterion_overfit},
      {5, "synthetic-end-to-end", criterion_end_to_end},
      {6, "non-class-analogue", criterion_nonclass},
      {7, "roc-auc-oracle", criterion_auc_oracle},
      {8, "stft-oracle", criterion_stft_oracle},
      {9, "determinism-persistence", criterion_determinism},
      {10, "multilingual-segmentation", criterion_segmentation},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    if (!wanted.empty() && !wanted.count(criterion.id)) continue;
    const auto t0 = clock_type::now();
    std::string detail;
    bool ok = true;
    try {
      detail = criterion.run();
    } catch (const CheckFailure& f) {
      ok = false;
      detail = f.message;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(clock_type::now() - t0).count();
    std::printf("%s  %2d  %-26s  (%.1fs)  %s\n", ok ? "PASS" : "FAIL",
                criterion.id, criterion.name, secs, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }

  if (!shared().dir.empty()) {
    std::error_code ec;
    fs::remove_all(shared().dir, ec);
  }
  return failures == 0 ? 0 : 1;
}
