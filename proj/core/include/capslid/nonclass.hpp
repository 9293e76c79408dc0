// capslid/nonclass.hpp
//
// Out-of-set ("non-class") detection. Thresholds are the per-language
// minimum capsule norm over calibration true positives; at detection time
// a sample whose winning norm falls below its language's threshold is
// flagged out-of-set. The winning norm equal to the threshold stays
// in-class (the strict "less than" rule triggers the flag).

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "capslid/dataset.hpp"
#include "capslid/train.hpp"

namespace capslid {

struct ThresholdTable {
  std::vector<double> tau;          // one per in-set language, each in (0,1)
  std::vector<std::size_t> counts;  // true positives that contributed

  std::string to_json() const;
  static ThresholdTable from_json(const std::string& text);
};

// Threshold construction from precomputed predictions: among samples with
// predicted == actual == l, tau[l] is the minimum winning norm. Throws
// CalibrationInsufficient if some language has no true positives.
ThresholdTable calibrate_thresholds(const std::vector<Prediction>& predictions,
                                    const std::vector<int>& labels,
                                    int n_classes);

// Runs the model over the calibration split and builds the table.
ThresholdTable calibrate(ModelParams& params, const LabeledDataset& calib,
                         int workers = 0);

// Sets is_non_class on an existing prediction; never changes the label.
void flag_non_class(Prediction& prediction, const ThresholdTable& thresholds);

Prediction detect(ModelParams& params, const ModelInput& input,
                  const ThresholdTable& thresholds);

}  // namespace capslid
