// capslid/train.hpp
//
// Mini-batch Adam training loop and prediction. Per-example work inside a
// batch fans out to worker threads, but gradients land in a fixed number of
// accumulation slots that are reduced in slot order, so the result is
// bit-identical for any worker count (and across runs with the same seed).

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "capslid/dataset.hpp"
#include "capslid/model.hpp"

namespace capslid {

struct TrainConfig {
  int batch_size = 32;
  int epochs = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1234;
  int routing_iterations = 3;
  double grad_clip_norm = 5.0;  // global-norm clip; guards routing spikes

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m;  // first moments, named_tensors() order
  std::vector<Tensor> v;  // second moments
  std::uint64_t step = 0;

  static AdamState init(const ModelParams& params);
};

// One bias-corrected Adam update; increments state.step. `grads` runs
// parallel to `params` and every pair must agree in shape.
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state,
               const TrainConfig& cfg);

struct EpochStats {
  int epoch = 0;          // 1-based
  double mean_loss = 0.0; // mean total loss over the epoch's examples
  double train_acc = 0.0; // online accuracy during the epoch's forward passes
};

struct TrainResult {
  ModelParams params;
  AdamState opt;
  std::vector<EpochStats> history;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Trains a freshly initialized model. Deterministic in (config.seed,
// dataset): fixed init, fixed per-epoch shuffle, ordered gradient
// reduction. Throws EmptyDataset, LabelOutOfRange, or NonFiniteLoss (with
// epoch/batch diagnostics) if a loss goes non-finite.
TrainResult train(const LabeledDataset& dataset, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, int workers = 0,
                  const EpochCallback& on_epoch = {});

struct Prediction {
  int label = -1;             // argmax of norms, lowest index on ties
  std::vector<double> norms;  // one per language capsule
  bool is_non_class = false;  // set by the nonclass module
};

Prediction predict(ModelParams& params, const ModelInput& input);

// Reusable forward graph for batch prediction (avoids rebuilding the graph
// per sample).
class Predictor {
 public:
  explicit Predictor(ModelParams& params) : graph_(params) {}
  Prediction operator()(const ModelInput& input);

 private:
  CapsNetGraph graph_;
};

}  // namespace capslid
