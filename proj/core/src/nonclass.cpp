#include "capslid/nonclass.hpp"

#include <nlohmann/json.hpp>

#include <limits>
#include <memory>
#include <thread>

namespace capslid {

std::string ThresholdTable::to_json() const {
  return nlohmann::json{{"tau", tau}, {"counts", counts}}.dump();
}

ThresholdTable ThresholdTable::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.contains("tau") || !j.contains("counts"))
    throw Error(ErrorKind::IoError, "threshold table: bad JSON");
  ThresholdTable t;
  t.tau = j["tau"].get<std::vector<double>>();
  t.counts = j["counts"].get<std::vector<std::size_t>>();
  if (t.tau.size() != t.counts.size())
    throw Error(ErrorKind::IoError, "threshold table: tau/counts mismatch");
  return t;
}

ThresholdTable calibrate_thresholds(const std::vector<Prediction>& predictions,
                                    const std::vector<int>& labels,
                                    int n_classes) {
  if (predictions.size() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, "predictions/labels length mismatch");
  ThresholdTable table;
  table.tau.assign(n_classes, std::numeric_limits<double>::infinity());
  table.counts.assign(n_classes, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int actual = labels[i];
    const int predicted = predictions[i].label;
    if (actual < 0 || actual >= n_classes || predicted != actual) continue;
    table.tau[actual] =
        std::min(table.tau[actual], predictions[i].norms[predicted]);
    ++table.counts[actual];
  }
  for (int c = 0; c < n_classes; ++c)
    if (table.counts[c] == 0)
      throw Error(ErrorKind::CalibrationInsufficient,
                  "language " + std::to_string(c) + " has no true positives");
  return table;
}

ThresholdTable calibrate(ModelParams& params, const LabeledDataset& calib,
                         int workers) {
  if (calib.empty())
    throw Error(ErrorKind::EmptyDataset, "empty calibration set");
  int n_threads = workers > 0 ? workers
                              : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<int>(n_threads, 8);

  std::vector<Prediction> predictions(calib.size());
  auto body = [&](int t) {
    Predictor predictor(params);
    for (std::size_t i = t; i < calib.size(); i += n_threads)
      predictions[i] = predictor(calib.inputs[i]);
  };
  if (n_threads <= 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(body, t);
    for (auto& th : pool) th.join();
  }
  return calibrate_thresholds(predictions, calib.labels, params.config.lang_caps);
}

void flag_non_class(Prediction& prediction, const ThresholdTable& thresholds) {
  if (prediction.label < 0 ||
      prediction.label >= static_cast<int>(thresholds.tau.size()))
    throw Error(ErrorKind::LabelOutOfRange,
                "prediction label outside threshold table");
  prediction.is_non_class =
      prediction.norms[prediction.label] < thresholds.tau[prediction.label];
}

Prediction detect(ModelParams& params, const ModelInput& input,
                  const ThresholdTable& thresholds) {
  Prediction pred = predict(params, input);
  flag_non_class(pred, thresholds);
  return pred;
}

}  // namespace capslid
