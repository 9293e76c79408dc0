#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "capslid/eval.hpp"

using namespace capslid;

namespace {

Prediction pred_of(int label) {
  Prediction p;
  p.label = label;
  p.norms.assign(5, 0.1);
  p.norms[label] = 0.8;
  return p;
}

// brute-force pairwise AUC: fraction of (positive, negative) pairs ordered
// correctly, ties half-weighted
double pairwise_auc(const std::vector<double>& scores,
                    const std::vector<bool>& positive) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("hand-computed 20-sample fixture") {
  // confusion (rows actual, 3 classes padded to 5):
  //   class0: 6 correct, 2 -> class1
  //   class1: 5 correct, 1 -> class0, 1 -> class2
  //   class2: 4 correct, 1 -> class0
  std::vector<Prediction> preds;
  std::vector<int> labels;
  auto add = [&](int actual, int predicted, int count) {
    for (int i = 0; i < count; ++i) {
      preds.push_back(pred_of(predicted));
      labels.push_back(actual);
    }
  };
  add(0, 0, 6); add(0, 1, 2);
  add(1, 1, 5); add(1, 0, 1); add(1, 2, 1);
  add(2, 2, 4); add(2, 0, 1);
  REQUIRE(preds.size() == 20);

  auto report = metrics_from_predictions(preds, labels, 5);
  CHECK(report.accuracy == doctest::Approx(15.0 / 20.0));
  CHECK(report.confusion[0][0] == 6);
  CHECK(report.confusion[0][1] == 2);
  CHECK(report.confusion[1][2] == 1);
  CHECK(report.confusion[2][0] == 1);

  // precision = tp / column sum, recall = tp / row sum
  CHECK(report.per_class[0].precision == doctest::Approx(6.0 / 8.0));
  CHECK(report.per_class[0].recall == doctest::Approx(6.0 / 8.0));
  CHECK(report.per_class[0].f1 == doctest::Approx(0.75));
  CHECK(report.per_class[1].precision == doctest::Approx(5.0 / 7.0));
  CHECK(report.per_class[1].recall == doctest::Approx(5.0 / 7.0));
  CHECK(report.per_class[2].precision == doctest::Approx(4.0 / 5.0));
  CHECK(report.per_class[2].recall == doctest::Approx(4.0 / 5.0));

  // classes 3 and 4 never appear nor get predicted
  CHECK(report.per_class[3].precision == 0.0);
  CHECK(report.per_class[3].recall == 0.0);
  CHECK(report.per_class[3].f1 == 0.0);
  CHECK_FALSE(report.notices.empty());

  int total = 0;
  for (const auto& row : report.confusion)
    for (int v : row) total += v;
  CHECK(total == 20);
}

TEST_CASE("all-correct predictions give accuracy 1 and a diagonal matrix") {
  std::vector<Prediction> preds;
  std::vector<int> labels;
  for (int i = 0; i < 25; ++i) {
    preds.push_back(pred_of(i % 5));
    labels.push_back(i % 5);
  }
  auto report = metrics_from_predictions(preds, labels, 5);
  CHECK(report.accuracy == 1.0);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      CHECK(report.confusion[r][c] == (r == c ? 5 : 0));
}

TEST_CASE("micro-averaged recall equals accuracy") {
  std::mt19937_64 rng(81);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Prediction> preds;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
      preds.push_back(pred_of(static_cast<int>(rng() % 5)));
      labels.push_back(static_cast<int>(rng() % 5));
    }
    auto report = metrics_from_predictions(preds, labels, 5);
    double weighted_recall = 0.0;
    for (int c = 0; c < 5; ++c) {
      int actual = 0;
      for (int o = 0; o < 5; ++o) actual += report.confusion[c][o];
      weighted_recall += report.per_class[c].recall * actual;
    }
    CHECK(weighted_recall / 60.0 == doctest::Approx(report.accuracy).epsilon(1e-12));
  }
}

TEST_CASE("metric order invariance") {
  std::mt19937_64 rng(82);
  std::vector<Prediction> preds;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    Prediction p;
    p.label = static_cast<int>(rng() % 5);
    p.norms.assign(5, 0.0);
    for (double& n : p.norms) n = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    p.norms[p.label] = 0.9;  // keep label consistent with argmax
    preds.push_back(p);
    labels.push_back(static_cast<int>(rng() % 5));
  }
  auto before = metrics_from_predictions(preds, labels, 5);

  std::vector<std::size_t> perm(preds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  for (std::size_t i = perm.size(); i > 1; --i)
    std::swap(perm[i - 1], perm[rng() % i]);
  std::vector<Prediction> preds2;
  std::vector<int> labels2;
  for (std::size_t i : perm) {
    preds2.push_back(preds[i]);
    labels2.push_back(labels[i]);
  }
  auto after = metrics_from_predictions(preds2, labels2, 5);
  CHECK(before.accuracy == after.accuracy);
  CHECK(before.confusion == after.confusion);
  for (int c = 0; c < 5; ++c) {
    CHECK(before.per_class[c].f1 == after.per_class[c].f1);
    CHECK(before.auc[c].has_value() == after.auc[c].has_value());
    if (before.auc[c])
      CHECK(*before.auc[c] == doctest::Approx(*after.auc[c]).epsilon(1e-12));
  }
}

TEST_CASE("roc: perfectly separated scores give AUC 1") {
  std::vector<double> scores{0.9, 0.8, 0.85, 0.2, 0.1, 0.15};
  std::vector<bool> positive{true, true, true, false, false, false};
  auto curve = roc_binary(scores, positive);
  CHECK(curve.auc == doctest::Approx(1.0));
  CHECK(curve.points.front() == std::pair{0.0, 0.0});
  CHECK(curve.points.back() == std::pair{1.0, 1.0});
}

TEST_CASE("roc: all-identical scores give AUC 0.5") {
  std::vector<double> scores(10, 0.42);
  std::vector<bool> positive{true, false, true, false, true,
                             false, true, false, true, false};
  auto curve = roc_binary(scores, positive);
  CHECK(curve.auc == doctest::Approx(0.5));
}

TEST_CASE("roc points are monotone and span the unit square") {
  std::mt19937_64 rng(83);
  std::vector<double> scores;
  std::vector<bool> positive;
  for (int i = 0; i < 57; ++i) {
    scores.push_back(static_cast<double>(rng() % 16) / 16.0);
    positive.push_back(rng() % 3 == 0);
  }
  positive[0] = true;
  positive[1] = false;
  auto curve = roc_binary(scores, positive);
  for (std::size_t k = 1; k < curve.points.size(); ++k) {
    CHECK(curve.points[k].first >= curve.points[k - 1].first);
    CHECK(curve.points[k].second >= curve.points[k - 1].second);
  }
  CHECK(curve.points.front() == std::pair{0.0, 0.0});
  CHECK(curve.points.back() == std::pair{1.0, 1.0});
}

TEST_CASE("trapezoid AUC equals the pairwise-ordering statistic") {
  std::mt19937_64 rng(84);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 10 + rng() % 40;
    std::vector<double> scores;
    std::vector<bool> positive;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      scores.push_back(static_cast<double>(rng() % 12) / 12.0);  // many ties
      const bool p = rng() % 2 == 0;
      positive.push_back(p);
      has_pos |= p;
      has_neg |= !p;
    }
    if (!has_pos) positive[0] = true;
    if (!has_neg) positive[1] = false;
    auto curve = roc_binary(scores, positive);
    CHECK(curve.auc ==
          doctest::Approx(pairwise_auc(scores, positive)).epsilon(1e-12));
  }
}

TEST_CASE("degenerate one-vs-rest classes are omitted with a notice") {
  std::vector<double> scores{0.5, 0.6};
  std::vector<bool> positive{true, true};
  try {
    roc_binary(scores, positive);
    FAIL("expected DegenerateClass");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateClass);
  }

  std::vector<std::vector<double>> norms{{0.9, 0.1, 0.1, 0.1, 0.1},
                                         {0.1, 0.9, 0.1, 0.1, 0.1}};
  std::vector<int> labels{0, 1};
  auto curves = roc_one_vs_rest(norms, labels, 5);
  CHECK(curves[0].has_value());
  CHECK(curves[1].has_value());
  CHECK_FALSE(curves[2].has_value());  // no positives for class 2
}

TEST_CASE("report JSON carries nulls for omitted curves") {
  std::vector<Prediction> preds{pred_of(0), pred_of(1)};
  std::vector<int> labels{0, 1};
  auto report = metrics_from_predictions(preds, labels, 5);
  auto text = report.to_json();
  CHECK(text.find("null") != std::string::npos);
  CHECK(text.find("\"accuracy\":1.0") != std::string::npos);
}

TEST_CASE("segmentation predicts each snippet independently") {
  ModelConfig cfg = ModelConfig::reduced();
  ModelParams params = ModelParams::init(cfg, 55);

  PcmSignal signal;
  signal.sample_rate_hz = 16000;
  std::mt19937_64 rng(85);
  signal.samples.resize(16000 * 17);  // 17 s -> 3 snippets, 2 s dropped
  for (double& s : signal.samples)
    s = 0.8 * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0);

  auto preds = segment_and_classify(params, signal, 5);
  REQUIRE(preds.size() == 3);

  auto segments = clip_segments(signal, 5);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto standalone = predict(params, preprocess_clip(segments[i], 5));
    CHECK(standalone.label == preds[i].label);
    CHECK(standalone.norms == preds[i].norms);
  }
}

TEST_SUITE_END();
