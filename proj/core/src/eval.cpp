#include "capslid/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

namespace capslid {

namespace {

std::vector<Prediction> predict_all(ModelParams& params,
                                    const LabeledDataset& data, int workers) {
  int n_threads = workers > 0 ? workers
                              : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<int>(n_threads, 8);
  std::vector<Prediction> predictions(data.size());
  auto body = [&](int t) {
    Predictor predictor(params);
    for (std::size_t i = t; i < data.size(); i += n_threads)
      predictions[i] = predictor(data.inputs[i]);
  };
  if (n_threads <= 1) {
    body(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(body, t);
    for (auto& th : pool) th.join();
  }
  return predictions;
}

}  // namespace

RocCurve roc_binary(const std::vector<double>& scores,
                    const std::vector<bool>& positive) {
  if (scores.size() != positive.size())
    throw Error(ErrorKind::ShapeMismatch, "roc: scores/labels length mismatch");
  std::size_t pos = 0;
  for (bool p : positive) pos += p ? 1 : 0;
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0)
    throw Error(ErrorKind::DegenerateClass,
                pos == 0 ? "no positive samples" : "no negative samples");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  RocCurve curve;
  curve.points.emplace_back(0.0, 0.0);
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    // all samples sharing a score move together (one diagonal segment)
    const double s = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == s) {
      if (positive[idx[i]]) ++tp; else ++fp;
      ++i;
    }
    curve.points.emplace_back(static_cast<double>(fp) / neg,
                              static_cast<double>(tp) / pos);
  }
  double auc = 0.0;
  for (std::size_t k = 1; k < curve.points.size(); ++k) {
    const auto& [x0, y0] = curve.points[k - 1];
    const auto& [x1, y1] = curve.points[k];
    auc += (x1 - x0) * (y0 + y1) / 2.0;
  }
  curve.auc = auc;
  return curve;
}

std::vector<std::optional<RocCurve>> roc_one_vs_rest(
    const std::vector<std::vector<double>>& norms,
    const std::vector<int>& labels, int n_classes) {
  if (norms.size() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, "roc: norms/labels length mismatch");
  std::vector<std::optional<RocCurve>> curves(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    std::vector<double> scores(norms.size());
    std::vector<bool> positive(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) {
      scores[i] = norms[i][c];
      positive[i] = labels[i] == c;
    }
    try {
      curves[c] = roc_binary(scores, positive);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::DegenerateClass) throw;
      curves[c] = std::nullopt;
    }
  }
  return curves;
}

std::string roc_csv(const RocCurve& curve) {
  std::ostringstream out;
  out << "fpr,tpr\n";
  for (const auto& [fpr, tpr] : curve.points) out << fpr << "," << tpr << "\n";
  return out.str();
}

MetricsReport metrics_from_predictions(const std::vector<Prediction>& predictions,
                                       const std::vector<int>& labels,
                                       int n_classes) {
  if (predictions.empty()) throw Error(ErrorKind::EmptyDataset, "no predictions");
  if (predictions.size() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, "predictions/labels length mismatch");
  for (int label : labels)
    if (label < 0 || label >= n_classes)
      throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(label));

  MetricsReport report;
  report.confusion.assign(n_classes, std::vector<int>(n_classes, 0));
  for (std::size_t i = 0; i < predictions.size(); ++i)
    ++report.confusion[labels[i]][predictions[i].label];

  std::size_t correct = 0;
  for (int c = 0; c < n_classes; ++c) correct += report.confusion[c][c];
  report.accuracy =
      static_cast<double>(correct) / static_cast<double>(predictions.size());

  report.per_class.resize(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    int predicted_as = 0, actual = 0;
    for (int o = 0; o < n_classes; ++o) {
      predicted_as += report.confusion[o][c];
      actual += report.confusion[c][o];
    }
    const int tp = report.confusion[c][c];
    ClassMetrics& m = report.per_class[c];
    m.precision = predicted_as > 0 ? static_cast<double>(tp) / predicted_as : 0.0;
    m.recall = actual > 0 ? static_cast<double>(tp) / actual : 0.0;
    if (predicted_as == 0)
      report.notices.push_back("class " + std::to_string(c) +
                               " never predicted; precision defined 0");
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
  }

  std::vector<std::vector<double>> norms(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i)
    norms[i] = predictions[i].norms;
  auto curves = roc_one_vs_rest(norms, labels, n_classes);
  report.auc.resize(n_classes);
  double auc_sum = 0.0;
  int auc_count = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (curves[c]) {
      report.auc[c] = curves[c]->auc;
      auc_sum += curves[c]->auc;
      ++auc_count;
    } else {
      report.auc[c] = std::nullopt;
      report.notices.push_back("class " + std::to_string(c) +
                               " degenerate; ROC curve omitted");
    }
  }
  if (auc_count > 0) report.macro_auc = auc_sum / auc_count;
  return report;
}

MetricsReport evaluate(ModelParams& params, const LabeledDataset& test,
                       int workers) {
  if (test.empty()) throw Error(ErrorKind::EmptyDataset, "empty test set");
  auto predictions = predict_all(params, test, workers);
  return metrics_from_predictions(predictions, test.labels,
                                  params.config.lang_caps);
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["accuracy"] = accuracy;
  auto& pc = j["per_class"] = nlohmann::json::array();
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    nlohmann::json entry{{"precision", per_class[c].precision},
                         {"recall", per_class[c].recall},
                         {"f1", per_class[c].f1}};
    entry["auc"] = auc[c] ? nlohmann::json(*auc[c]) : nlohmann::json(nullptr);
    pc.push_back(std::move(entry));
  }
  j["confusion"] = confusion;
  j["macro_auc"] = macro_auc ? nlohmann::json(*macro_auc) : nlohmann::json(nullptr);
  j["macro_auc_aggregation"] = "mean over defined one-vs-rest curves";
  j["notices"] = notices;
  return j.dump();
}

std::string MetricsReport::confusion_csv() const {
  std::ostringstream out;
  out << "actual\\predicted";
  for (std::size_t c = 0; c < confusion.size(); ++c) out << "," << c;
  out << "\n";
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    out << r;
    for (int v : confusion[r]) out << "," << v;
    out << "\n";
  }
  return out.str();
}

std::vector<Prediction> segment_and_classify(ModelParams& params,
                                             const PcmSignal& signal,
                                             int clip_seconds) {
  auto segments = clip_segments(signal, clip_seconds);
  Predictor predictor(params);
  std::vector<Prediction> out;
  out.reserve(segments.size());
  for (const auto& segment : segments)
    out.push_back(predictor(preprocess_clip(segment, clip_seconds)));
  return out;
}

}  // namespace capslid
