// capslid/model.hpp
//
// The capsule classifier: Conv -> PrimaryCaps -> MidCaps -> LangCaps with
// dynamic routing between the capsule layers, margin loss over the LangCaps
// norms, and a three-layer decoder reconstructing the input spectrogram
// from the true-label capsule as a regularizer.
//
// Everything label- and loss-related lives behind CapsNetGraph (the
// differentiable training graph). The free functions below are the plain
// inference-side operations; they share formulas with the graph ops and
// the tests hold the two routes together.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "capslid/autodiff.hpp"
#include "capslid/dsp.hpp"
#include "capslid/error.hpp"
#include "capslid/tensor.hpp"

namespace capslid {

struct ModelConfig {
  int input_rows = 32;
  int input_cols = 25;
  int kernel = 9;
  int conv1_channels = 128;
  int primary_banks = 32;  // conv channels = banks * primary_dim
  int primary_dim = 8;
  int mid_caps = 32;
  int mid_dim = 8;
  int lang_caps = 5;
  int lang_dim = 16;
  int dec_hidden1 = 512;
  int dec_hidden2 = 1024;
  int routing_iterations = 3;

  int conv1_out_rows() const { return input_rows - kernel + 1; }
  int conv1_out_cols() const { return input_cols - kernel + 1; }
  int primary_out_rows() const { return (conv1_out_rows() - kernel) / 2 + 1; }
  int primary_out_cols() const { return (conv1_out_cols() - kernel) / 2 + 1; }
  int primary_capsules() const {
    return primary_out_rows() * primary_out_cols() * primary_banks;
  }
  int pixels() const { return input_rows * input_cols; }

  void validate() const;

  // Small variant used by gradient-check suites: 8 conv kernels, 4 primary
  // banks, 8 mid capsules, 5 lang capsules of dim 8, narrow decoder.
  static ModelConfig reduced();
};

struct ModelParams {
  ModelConfig config;
  Tensor conv1_w, conv1_b;      // [9,9,1,C1], [C1]
  Tensor primary_w, primary_b;  // [9,9,C1,banks*dim], [banks*dim]
  Tensor mid_w;                 // [I, mid_caps, mid_dim, primary_dim]
  Tensor lang_w;                // [mid_caps, lang_caps, lang_dim, mid_dim]
  Tensor dec1_w, dec1_b, dec2_w, dec2_b, dec3_w, dec3_b;

  // Glorot-uniform conv/affine weights, N(0, 0.1) routing transforms,
  // zero biases; deterministic in the seed.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  // Fixed enumeration order; this is also the checkpoint tensor order.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
};

// The 5 LangCaps vectors and their Euclidean norms.
struct CapsuleOutputs {
  Tensor lang_vectors;        // [lang_caps, lang_dim]
  std::vector<double> norms;  // one per capsule, each in [0, 1)
};

struct MarginLossConfig {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;
  double recon_weight = 0.0005;
};

// v = (|s|^2 / (1 + |s|^2)) * s/|s|; squash(0) = 0.
std::vector<double> squash(const std::vector<double>& s);

struct RoutingResult {
  Tensor outputs;    // [J, D]
  Tensor couplings;  // [I, J], rows on the simplex
};

// Routing-by-agreement over prediction vectors [I, J, D]: logits start at
// zero, couplings are row softmaxes, outputs are squashed coupling-weighted
// sums, and agreement (uhat . v) feeds back into the logits. The agreement
// update is skipped after the final iteration.
RoutingResult dynamic_routing(const Tensor& predictions, int iterations);

// Margin loss over capsule norms (hinge-squared both ways, the absent-class
// side weighted by lambda).
double margin_loss(const CapsuleOutputs& outputs, int true_label,
                   const MarginLossConfig& cfg);

// Decoder only: 16-dim capsule vector -> flat image in (0,1), length
// input_rows*input_cols, row-major.
std::vector<double> reconstruct(const std::vector<double>& lang_vector,
                                const ModelParams& params);

// The full differentiable graph for one example. Parameters are bound by
// reference; the caller owns them and keeps them alive. Reuse one instance
// across examples via set_example(); gradients accumulate into the graph's
// parameter slots until zero_param_grads().
class CapsNetGraph {
 public:
  CapsNetGraph(ModelParams& params, const MarginLossConfig& margin_cfg = {});

  // label < 0 configures inference-only use (forward_norms()).
  void set_example(const ModelInput& input, int label);

  double forward_total_loss();    // full pass, returns margin + weighted recon
  void forward_norms_only();      // stops after the norm node
  void backward();                // accumulate d(total_loss)/d(params)
  void zero_param_grads();

  CapsuleOutputs outputs() const;
  double margin_value() const { return tape_.value(margin_)[0]; }
  double total_value() const { return tape_.value(total_)[0]; }
  std::vector<double> reconstruction() const;

  const std::vector<NodeId>& param_nodes() const { return param_nodes_; }
  const Tensor& param_grad(std::size_t i) const {
    return tape_.grad(param_nodes_[i]);
  }
  Tape& tape() { return tape_; }
  NodeId loss_node() const { return total_; }
  NodeId norms_node() const { return norms_; }

 private:
  NodeId build_routing(NodeId predictions, std::size_t children,
                       std::size_t parents, int iterations);

  ModelParams& params_;
  MarginLossConfig margin_cfg_;
  Tape tape_;
  NodeId input_ = 0;
  NodeId lang_v_ = 0;
  NodeId norms_ = 0;
  NodeId margin_true_ = 0, margin_other_ = 0, margin_ = 0;
  NodeId recon_select_ = 0, recon_out_ = 0, total_ = 0;
  std::vector<NodeId> param_nodes_;
};

// Inference-side forward pass (encoder only).
CapsuleOutputs forward(const ModelInput& input, ModelParams& params);

// margin_loss(outputs) + recon_weight * sum((reconstruct(v_true) - input)^2).
double total_loss(const ModelInput& input, const CapsuleOutputs& outputs,
                  int true_label, const ModelParams& params,
                  const MarginLossConfig& cfg);

}  // namespace capslid
