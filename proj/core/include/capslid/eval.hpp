// capslid/eval.hpp
//
// Classification metrics: accuracy, per-class precision/recall/F1, row=actual
// confusion matrix, and one-vs-rest ROC/AUC from the capsule norms. Also the
// long-clip experiment: split a signal into snippets and classify each.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "capslid/dataset.hpp"
#include "capslid/train.hpp"
#include "capslid/wav.hpp"

namespace capslid {

struct RocCurve {
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), (0,0)..(1,1)
  double auc = 0.0;
};

struct ClassMetrics {
  double precision = 0.0;  // defined 0 when the class is never predicted
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<int>> confusion;  // rows = actual, cols = predicted
  std::vector<std::optional<double>> auc;   // one-vs-rest; omitted if degenerate
  std::optional<double> macro_auc;          // mean over the defined curves
  std::vector<std::string> notices;

  std::string to_json() const;
  std::string confusion_csv() const;
};

// Binary ROC by threshold sweep over descending scores; tied scores form one
// diagonal segment, so the trapezoid AUC gives ties half credit (the
// Mann-Whitney convention). Throws DegenerateClass when positives or
// negatives are missing.
RocCurve roc_binary(const std::vector<double>& scores,
                    const std::vector<bool>& positive);

// One curve per class, scored by that class's capsule norm. Degenerate
// classes come back as nullopt instead of a curve.
std::vector<std::optional<RocCurve>> roc_one_vs_rest(
    const std::vector<std::vector<double>>& norms,
    const std::vector<int>& labels, int n_classes);

std::string roc_csv(const RocCurve& curve);

// Metric computation from already-made predictions (evaluate() is this plus
// the forward passes).
MetricsReport metrics_from_predictions(const std::vector<Prediction>& predictions,
                                       const std::vector<int>& labels,
                                       int n_classes);

MetricsReport evaluate(ModelParams& params, const LabeledDataset& test,
                       int workers = 0);

// clip_segments -> preprocess -> predict, per snippet in temporal order.
std::vector<Prediction> segment_and_classify(ModelParams& params,
                                             const PcmSignal& signal,
                                             int clip_seconds = 5);

}  // namespace capslid
