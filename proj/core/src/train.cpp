#include "capslid/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <thread>

namespace capslid {

namespace {

// Gradients accumulate into a fixed number of slots regardless of how many
// threads actually run; the slot-order reduction keeps results identical
// across worker counts.
constexpr int kGradSlots = 8;

int resolve_workers(int workers) {
  if (workers <= 0) {
    unsigned hw = std::thread::hardware_concurrency();
    workers = hw ? static_cast<int>(hw) : 1;
  }
  return std::clamp(workers, 1, kGradSlots);
}

// Explicit Fisher-Yates so the shuffle does not depend on the stdlib's
// distribution internals.
void shuffle_indices(std::vector<std::size_t>& order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

int argmax_lowest(const std::vector<double>& norms) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(norms.size()); ++i)
    if (norms[i] > norms[best]) best = i;
  return best;
}

void run_workers(int workers, const std::function<void(int)>& body) {
  if (workers <= 1) {
    body(0);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int t = 0; t < workers; ++t) pool.emplace_back(body, t);
  for (auto& th : pool) th.join();
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size <= 0 || epochs <= 0 || learning_rate <= 0.0 || epsilon <= 0.0 ||
      routing_iterations <= 0 || grad_clip_norm <= 0.0)
    throw Error(ErrorKind::ShapeMismatch, "train config fields must be positive");
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    throw Error(ErrorKind::ShapeMismatch, "adam betas must lie in (0,1)");
}

AdamState AdamState::init(const ModelParams& params) {
  AdamState state;
  for (auto& [name, tensor] : params.named_tensors()) {
    (void)name;
    state.m.emplace_back(tensor->shape);
    state.v.emplace_back(tensor->shape);
  }
  return state;
}

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state,
               const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw Error(ErrorKind::ShapeMismatch, "adam_step: tensor list mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i]))
      throw Error(ErrorKind::ShapeMismatch, "adam_step: shape mismatch");

  const std::uint64_t t = ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->data.data();
    const double* g = grads[i]->data.data();
    double* m = state.m[i].data.data();
    double* v = state.v[i].data.data();
    const std::size_t n = params[i]->numel();
    for (std::size_t k = 0; k < n; ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

TrainResult train(const LabeledDataset& dataset, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, int workers,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (dataset.empty()) throw Error(ErrorKind::EmptyDataset, "no training data");
  for (int label : dataset.labels)
    if (label < 0 || label >= model_cfg.lang_caps)
      throw Error(ErrorKind::LabelOutOfRange,
                  "label " + std::to_string(label) + " outside [0, " +
                      std::to_string(model_cfg.lang_caps) + ")");

  ModelConfig mc = model_cfg;
  mc.routing_iterations = cfg.routing_iterations;

  TrainResult result{ModelParams::init(mc, cfg.seed), {}, {}};
  ModelParams& params = result.params;
  result.opt = AdamState::init(params);

  auto named = params.named_tensors();
  std::vector<Tensor*> param_ptrs;
  for (auto& [name, tensor] : named) {
    (void)name;
    param_ptrs.push_back(tensor);
  }
  const std::size_t n_tensors = param_ptrs.size();

  const int n_workers = resolve_workers(workers);
  std::vector<std::unique_ptr<CapsNetGraph>> slots;
  slots.reserve(kGradSlots);
  for (int k = 0; k < kGradSlots; ++k)
    slots.push_back(std::make_unique<CapsNetGraph>(params));

  std::vector<Tensor> grad_acc;
  grad_acc.reserve(n_tensors);
  for (Tensor* p : param_ptrs) grad_acc.emplace_back(p->shape);
  std::vector<const Tensor*> grad_ptrs;
  for (Tensor& g : grad_acc) grad_ptrs.push_back(&g);

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const std::size_t n = dataset.size();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(order, cfg.seed + 0x9E3779B97F4A7C15ull *
                               static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    std::size_t epoch_correct = 0;

    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t batch_n = std::min<std::size_t>(cfg.batch_size, n - start);
      for (auto& slot : slots) slot->zero_param_grads();

      std::array<double, kGradSlots> slot_loss{};
      std::array<std::size_t, kGradSlots> slot_correct{};
      std::array<std::string, kGradSlots> slot_error{};

      run_workers(n_workers, [&](int t) {
        for (int k = t; k < kGradSlots; k += n_workers) {
          try {
            for (std::size_t s = k; s < batch_n; s += kGradSlots) {
              const std::size_t idx = order[start + s];
              slots[k]->set_example(dataset.inputs[idx], dataset.labels[idx]);
              const double loss = slots[k]->forward_total_loss();
              slot_loss[k] += loss;
              if (argmax_lowest(slots[k]->outputs().norms) ==
                  dataset.labels[idx])
                ++slot_correct[k];
              slots[k]->backward();
            }
          } catch (const std::exception& e) {
            slot_error[k] = e.what();
          }
        }
      });
      for (const auto& err : slot_error)
        if (!err.empty()) throw Error(ErrorKind::NonFiniteLoss, err);

      double batch_loss = 0.0;
      for (int k = 0; k < kGradSlots; ++k) {
        batch_loss += slot_loss[k];
        epoch_correct += slot_correct[k];
      }
      if (!std::isfinite(batch_loss))
        throw Error(ErrorKind::NonFiniteLoss,
                    "epoch " + std::to_string(epoch) + ", batch at sample " +
                        std::to_string(start) + ": loss = " +
                        std::to_string(batch_loss));
      epoch_loss += batch_loss;

      // slot-ordered reduction, then mean over the batch
      for (std::size_t i = 0; i < n_tensors; ++i) {
        grad_acc[i].fill(0.0);
        double* acc = grad_acc[i].data.data();
        const std::size_t count = grad_acc[i].numel();
        for (int k = 0; k < kGradSlots; ++k) {
          const double* g = slots[k]->param_grad(i).data.data();
          for (std::size_t e = 0; e < count; ++e) acc[e] += g[e];
        }
        const double scale = 1.0 / static_cast<double>(batch_n);
        for (std::size_t e = 0; e < count; ++e) acc[e] *= scale;
      }

      double sq_norm = 0.0;
      for (const Tensor& g : grad_acc)
        for (double v : g.data) sq_norm += v * v;
      const double grad_norm = std::sqrt(sq_norm);
      if (grad_norm > cfg.grad_clip_norm) {
        const double scale = cfg.grad_clip_norm / grad_norm;
        for (Tensor& g : grad_acc)
          for (double& v : g.data) v *= scale;
      }

      adam_step(param_ptrs, grad_ptrs, result.opt, cfg);
    }

    EpochStats stats{epoch, epoch_loss / static_cast<double>(n),
                     static_cast<double>(epoch_correct) / static_cast<double>(n)};
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

Prediction predict(ModelParams& params, const ModelInput& input) {
  Predictor predictor(params);
  return predictor(input);
}

Prediction Predictor::operator()(const ModelInput& input) {
  graph_.set_example(input, -1);
  graph_.forward_norms_only();
  Prediction pred;
  pred.norms = graph_.outputs().norms;
  pred.label = argmax_lowest(pred.norms);
  return pred;
}

}  // namespace capslid
