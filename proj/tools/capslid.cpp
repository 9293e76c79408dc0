// capslid CLI: corpus generation, preprocessing, training, evaluation,
// prediction, threshold calibration, out-of-set detection, and long-clip
// segmentation. Structured results go to stdout as JSON; logs go to stderr.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>

#include "capslid/checkpoint.hpp"
#include "capslid/datagen.hpp"
#include "capslid/dataset.hpp"
#include "capslid/dsp.hpp"
#include "capslid/eval.hpp"
#include "capslid/error.hpp"
#include "capslid/model.hpp"
#include "capslid/nonclass.hpp"
#include "capslid/train.hpp"
#include "capslid/wav.hpp"

namespace {

using nlohmann::json;

json prediction_json(const capslid::Prediction& pred, bool have_thresholds) {
  json j;
  j["label"] = pred.label;
  j["norms"] = pred.norms;
  j["non_class"] = have_thresholds ? json(pred.is_non_class) : json(nullptr);
  return j;
}

// First clip_seconds worth of audio as the model input.
capslid::ModelInput input_from_wav(const std::filesystem::path& wav,
                                   int clip_seconds) {
  auto signal = capslid::read_wav_file(wav);
  auto segments = capslid::clip_segments(signal, clip_seconds);
  return capslid::preprocess_clip(segments.front(), clip_seconds);
}

struct CommonOpts {
  std::uint64_t seed = 1234;
  int workers = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--seed", opts.seed, "Base RNG seed")
      ->envname("CAPSLID_SEED")
      ->capture_default_str();
  cmd->add_option("--workers", opts.workers,
                  "Worker threads (0 = available cores)")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spoken-language identification with a capsule network"};
  app.require_subcommand(1);
  std::function<void()> action;

  // ---- gen-data -----------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  {
    auto opts = std::make_shared<CommonOpts>();
    auto spec = std::make_shared<capslid::CorpusSpec>();
    auto out_dir = std::make_shared<std::string>();
    gen->add_option("--out", *out_dir, "Output directory")->required();
    gen->add_option("--classes", spec->n_in_set, "In-set classes")
        ->capture_default_str();
    gen->add_option("--nonclass-classes", spec->n_nonclass,
                    "Out-of-set classes")
        ->capture_default_str();
    gen->add_option("--train-per-class", spec->train_per_class,
                    "Training clips per class")
        ->capture_default_str();
    gen->add_option("--test-per-class", spec->test_per_class,
                    "Test clips per class")
        ->capture_default_str();
    gen->add_option("--calib-per-class", spec->calib_per_class,
                    "Calibration clips per class")
        ->capture_default_str();
    gen->add_option("--nonclass-clips", spec->nonclass_clips,
                    "Total out-of-set clips")
        ->capture_default_str();
    gen->add_option("--clip-seconds", spec->clip_seconds, "Clip length")
        ->check(CLI::IsMember({5, 10}))
        ->capture_default_str();
    add_common(gen, *opts);
    gen->callback([opts, spec, out_dir, &action] {
      action = [=] {
        spec->base_seed = opts->seed;
        std::cerr << "generating corpus under " << *out_dir << "\n";
        auto manifest = capslid::build_corpus(*spec, *out_dir, opts->workers);
        std::size_t nonclass = manifest.split("nonclass").size();
        json j{{"manifest", (std::filesystem::path(*out_dir) /
                             "manifest.jsonl").string()},
               {"clips", manifest.records.size()},
               {"in_set_clips", manifest.records.size() - nonclass},
               {"nonclass_clips", nonclass}};
        std::cout << j.dump() << "\n";
      };
    });
  }

  // ---- preprocess ---------------------------------------------------------
  auto* pre = app.add_subcommand("preprocess",
                                 "Convert a WAV clip to a spectrogram");
  {
    auto input = std::make_shared<std::string>();
    auto pgm = std::make_shared<std::string>();
    auto clip_seconds = std::make_shared<int>(5);
    auto bins = std::make_shared<int>(0);
    auto pps = std::make_shared<int>(0);
    auto floor_db = std::make_shared<double>(-80.0);
    pre->add_option("--input", *input, "Input WAV file")->required();
    pre->add_option("--clip-seconds", *clip_seconds,
                    "Rendering mode (5 or 10 s)")
        ->check(CLI::IsMember({5, 10}))
        ->capture_default_str();
    pre->add_option("--bins", *bins, "Frequency bins (overrides mode)");
    pre->add_option("--pps", *pps, "Pixels per second (overrides mode)");
    pre->add_option("--floor-db", *floor_db, "dB floor")->capture_default_str();
    pre->add_option("--pgm", *pgm, "Write the spectrogram as a P5 grey-map");
    pre->callback([=, &action] {
      action = [=] {
        auto signal = capslid::read_wav_file(*input);
        capslid::StftConfig cfg =
            capslid::StftConfig::for_clip_seconds(*clip_seconds);
        if (*bins > 0) cfg.n_bins = *bins;
        if (*pps > 0) cfg.pps = *pps;
        cfg.floor_db = *floor_db;
        auto spec = capslid::stft(signal, cfg);
        if (!pgm->empty()) capslid::write_pgm(*pgm, spec);
        json j{{"input", *input},
               {"time_px", spec.time_px},
               {"n_bins", spec.n_bins},
               {"pgm", pgm->empty() ? json(nullptr) : json(*pgm)}};
        std::cout << j.dump() << "\n";
      };
    });
  }

  // ---- train ---------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train on a corpus manifest");
  {
    auto opts = std::make_shared<CommonOpts>();
    auto manifest_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto cfg = std::make_shared<capslid::TrainConfig>();
    tr->add_option("--manifest", *manifest_path, "Corpus manifest")->required();
    tr->add_option("--out", *out, "Checkpoint output path")->required();
    tr->add_option("--epochs", cfg->epochs, "Training epochs")
        ->capture_default_str();
    tr->add_option("--batch-size", cfg->batch_size, "Mini-batch size")
        ->capture_default_str();
    tr->add_option("--lr", cfg->learning_rate, "Adam learning rate")
        ->capture_default_str();
    tr->add_option("--routing-iters", cfg->routing_iterations,
                   "Dynamic-routing iterations")
        ->capture_default_str();
    tr->add_option("--clip-norm", cfg->grad_clip_norm,
                   "Global gradient-norm clip")
        ->capture_default_str();
    add_common(tr, *opts);
    tr->callback([=, &action] {
      action = [=] {
        cfg->seed = opts->seed;
        auto manifest = capslid::load_manifest(*manifest_path);
        std::cerr << "loading train split\n";
        auto data = capslid::load_split(*manifest_path, manifest, "train",
                                        opts->workers);
        std::cerr << "training on " << data.size() << " clips\n";
        capslid::ModelConfig model_cfg;
        auto result = capslid::train(
            data, model_cfg, *cfg, opts->workers,
            [](const capslid::EpochStats& s) {
              json j{{"epoch", s.epoch},
                     {"mean_loss", s.mean_loss},
                     {"train_acc", s.train_acc}};
              std::cout << j.dump() << "\n" << std::flush;
            });
        capslid::Checkpoint ckpt;
        ckpt.step = result.opt.step;
        ckpt.params = std::move(result.params);
        ckpt.opt = std::move(result.opt);
        ckpt.train_config = *cfg;
        capslid::save_checkpoint(*out, ckpt);
        const auto& last = result.history.back();
        json j{{"checkpoint", *out},
               {"epochs", last.epoch},
               {"final_loss", last.mean_loss},
               {"final_train_acc", last.train_acc}};
        std::cout << j.dump() << "\n";
      };
    });
  }

  // ---- eval -----------------------------------------------------------------
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  {
    auto opts = std::make_shared<CommonOpts>();
    auto manifest_path = std::make_shared<std::string>();
    auto ckpt_path = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("test");
    auto csv_dir = std::make_shared<std::string>();
    ev->add_option("--manifest", *manifest_path, "Corpus manifest")->required();
    ev->add_option("--checkpoint", *ckpt_path, "Model checkpoint")->required();
    ev->add_option("--split", *split, "Manifest split")->capture_default_str();
    ev->add_option("--csv-dir", *csv_dir,
                   "Also write confusion/ROC tables as CSV files");
    add_common(ev, *opts);
    ev->callback([=, &action] {
      action = [=] {
        auto ckpt = capslid::load_checkpoint(*ckpt_path);
        auto manifest = capslid::load_manifest(*manifest_path);
        auto data =
            capslid::load_split(*manifest_path, manifest, *split, opts->workers);
        std::cerr << "evaluating " << data.size() << " clips\n";
        auto report = capslid::evaluate(ckpt.params, data, opts->workers);
        if (!csv_dir->empty()) {
          std::filesystem::create_directories(*csv_dir);
          std::ofstream conf(std::filesystem::path(*csv_dir) / "confusion.csv");
          conf << report.confusion_csv();
          std::vector<std::vector<double>> norms;
          std::vector<int> labels = data.labels;
          capslid::Predictor predictor(ckpt.params);
          for (const auto& input : data.inputs)
            norms.push_back(predictor(input).norms);
          auto curves = capslid::roc_one_vs_rest(norms, labels,
                                                 ckpt.params.config.lang_caps);
          for (std::size_t c = 0; c < curves.size(); ++c) {
            if (!curves[c]) continue;
            std::ofstream roc(std::filesystem::path(*csv_dir) /
                              ("roc_class" + std::to_string(c) + ".csv"));
            roc << capslid::roc_csv(*curves[c]);
          }
        }
        std::cout << report.to_json() << "\n";
      };
    });
  }

  // ---- predict ---------------------------------------------------------------
  auto* pr = app.add_subcommand("predict", "Classify a single clip");
  {
    auto ckpt_path = std::make_shared<std::string>();
    auto input = std::make_shared<std::string>();
    auto clip_seconds = std::make_shared<int>(5);
    pr->add_option("--checkpoint", *ckpt_path, "Model checkpoint")->required();
    pr->add_option("--input", *input, "Input WAV file")->required();
    pr->add_option("--clip-seconds", *clip_seconds, "Clip length")
        ->check(CLI::IsMember({5, 10}))
        ->capture_default_str();
    pr->callback([=, &action] {
      action = [=] {
        auto ckpt = capslid::load_checkpoint(*ckpt_path);
        auto model_input = input_from_wav(*input, *clip_seconds);
        auto pred = capslid::predict(ckpt.params, model_input);
        if (ckpt.thresholds) capslid::flag_non_class(pred, *ckpt.thresholds);
        std::cout << prediction_json(pred, ckpt.thresholds.has_value()).dump()
                  << "\n";
      };
    });
  }

  // ---- calibrate --------------------------------------------------------------
  auto* ca = app.add_subcommand(
      "calibrate", "Fit non-class thresholds from the calib split");
  {
    auto opts = std::make_shared<CommonOpts>();
    auto ckpt_path = std::make_shared<std::string>();
    auto manifest_path = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto split = std::make_shared<std::string>("calib");
    auto json_out = std::make_shared<std::string>();
    ca->add_option("--checkpoint", *ckpt_path, "Model checkpoint")->required();
    ca->add_option("--manifest", *manifest_path, "Corpus manifest")->required();
    ca->add_option("--out", *out,
                   "Checkpoint to write (defaults to --checkpoint)");
    ca->add_option("--split", *split, "Calibration split")
        ->capture_default_str();
    ca->add_option("--thresholds-json", *json_out,
                   "Also write the table as standalone JSON");
    add_common(ca, *opts);
    ca->callback([=, &action] {
      action = [=] {
        auto ckpt = capslid::load_checkpoint(*ckpt_path);
        auto manifest = capslid::load_manifest(*manifest_path);
        auto data =
            capslid::load_split(*manifest_path, manifest, *split, opts->workers);
        std::cerr << "calibrating on " << data.size() << " clips\n";
        auto table = capslid::calibrate(ckpt.params, data, opts->workers);
        ckpt.thresholds = table;
        const std::string dest = out->empty() ? *ckpt_path : *out;
        capslid::save_checkpoint(dest, ckpt);
        if (!json_out->empty()) {
          std::ofstream f(*json_out, std::ios::trunc);
          f << table.to_json() << "\n";
        }
        json j = json::parse(table.to_json());
        j["checkpoint"] = dest;
        std::cout << j.dump() << "\n";
      };
    });
  }

  // ---- detect ------------------------------------------------------------------
  auto* de = app.add_subcommand("detect",
                                "Classify with out-of-set detection");
  {
    auto ckpt_path = std::make_shared<std::string>();
    auto input = std::make_shared<std::string>();
    auto clip_seconds = std::make_shared<int>(5);
    de->add_option("--checkpoint", *ckpt_path,
                   "Model checkpoint (must be calibrated)")
        ->required();
    de->add_option("--input", *input, "Input WAV file")->required();
    de->add_option("--clip-seconds", *clip_seconds, "Clip length")
        ->check(CLI::IsMember({5, 10}))
        ->capture_default_str();
    de->callback([=, &action] {
      action = [=] {
        auto ckpt = capslid::load_checkpoint(*ckpt_path);
        if (!ckpt.thresholds)
          throw capslid::Error(capslid::ErrorKind::CalibrationInsufficient,
                               "checkpoint has no threshold table; run "
                               "`capslid calibrate` first");
        auto model_input = input_from_wav(*input, *clip_seconds);
        auto pred =
            capslid::detect(ckpt.params, model_input, *ckpt.thresholds);
        std::cout << prediction_json(pred, true).dump() << "\n";
      };
    });
  }

  // ---- segment -------------------------------------------------------------------
  auto* se = app.add_subcommand("segment",
                                "Classify a long clip snippet by snippet");
  {
    auto ckpt_path = std::make_shared<std::string>();
    auto input = std::make_shared<std::string>();
    auto clip_seconds = std::make_shared<int>(5);
    se->add_option("--checkpoint", *ckpt_path, "Model checkpoint")->required();
    se->add_option("--input", *input, "Input WAV file")->required();
    se->add_option("--clip-seconds", *clip_seconds, "Snippet length")
        ->check(CLI::IsMember({5, 10}))
        ->capture_default_str();
    se->callback([=, &action] {
      action = [=] {
        auto ckpt = capslid::load_checkpoint(*ckpt_path);
        auto signal = capslid::read_wav_file(*input);
        auto preds =
            capslid::segment_and_classify(ckpt.params, signal, *clip_seconds);
        json out;
        out["clip_seconds"] = *clip_seconds;
        auto& arr = out["predictions"] = json::array();
        for (std::size_t i = 0; i < preds.size(); ++i) {
          if (ckpt.thresholds)
            capslid::flag_non_class(preds[i], *ckpt.thresholds);
          json j = prediction_json(preds[i], ckpt.thresholds.has_value());
          j["index"] = i;
          arr.push_back(std::move(j));
        }
        std::cout << out.dump() << "\n";
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // help text on stdout, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // message to stderr
    return 1;
  }

  try {
    action();
  } catch (const capslid::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == capslid::ErrorKind::UsageError ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
