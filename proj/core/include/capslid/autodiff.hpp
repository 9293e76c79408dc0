// capslid/autodiff.hpp
//
// Reverse-mode differentiation over an append-only tape. Nodes are stored
// in insertion order, which is also topological order; backprop walks the
// tape in reverse. The op set is exactly what the capsule network needs:
// valid convolution, affine maps, the usual pointwise nonlinearities, and
// the routing building blocks (row softmax, coupling-weighted sums, squash,
// agreement dot products).
//
// All arithmetic is double precision. Shapes are fixed at construction and
// never broadcast; mismatches throw ShapeMismatch.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capslid/error.hpp"
#include "capslid/tensor.hpp"

namespace capslid {

using NodeId = std::uint32_t;

enum class OpKind {
  kInput,          // leaf, not trainable
  kParameter,      // leaf, trainable
  kConv2dValid,    // x[H,W,Cin], k[K,K,Cin,Cout] -> y[H',W',Cout]
  kChannelBias,    // x[H,W,C] + b[C]
  kRelu,
  kFullyConnected, // x[in], w[out,in], b[out] -> y[out]
  kSigmoid,
  kAdd,            // elementwise, same shape
  kSub,
  kMul,            // Hadamard
  kAxpb,           // y = a*x + b, scalar a/b
  kSumAll,         // -> scalar
  kWeightedSum,    // dot with a constant weight vector -> scalar
  kSoftmaxRows,    // x[R,C], softmax along each row
  kRowsL2Norm,     // x[R,C] -> [R]
  kSquashRows,     // x[R,C] -> [R,C], rows squashed
  kCapsTransform,  // u[I,Din], w[I,J,Dout,Din] -> uhat[I,J,Dout]
  kCouplingSum,    // c[I,J], uhat[I,J,D] -> s[J,D]
  kAgreement,      // uhat[I,J,D], v[J,D] -> a[I,J]
  kRowSelect,      // x[R,C], fixed row -> [C]
  kReshape,
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaves. The pointer overload aliases caller-owned storage (the model's
  // parameter tensors); the caller keeps the storage alive and stable.
  NodeId input(Tensor value);
  NodeId parameter(Tensor value);
  NodeId parameter(Tensor* external);

  NodeId conv2d_valid(NodeId x, NodeId kernels, int stride);
  NodeId channel_bias(NodeId x, NodeId bias);
  NodeId relu(NodeId x);
  NodeId fully_connected(NodeId x, NodeId weights, NodeId bias);
  NodeId sigmoid(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId axpb(NodeId x, double a, double b);
  NodeId sum(NodeId x);
  NodeId weighted_sum(NodeId x, std::vector<double> weights);
  NodeId softmax_rows(NodeId x);
  NodeId rows_l2norm(NodeId x);
  NodeId squash_rows(NodeId x);
  NodeId caps_transform(NodeId u, NodeId w);
  NodeId coupling_sum(NodeId couplings, NodeId predictions);
  NodeId agreement(NodeId predictions, NodeId v);
  NodeId row_select(NodeId x, std::size_t row);
  NodeId reshape(NodeId x, std::vector<std::size_t> shape);

  // Per-example rebinding without rebuilding the graph.
  void set_value(NodeId leaf, const Tensor& value);
  void set_row_select(NodeId node, std::size_t row);
  void set_weights(NodeId node, std::vector<double> weights);

  // Recomputes every non-leaf value in insertion order. The _until variant
  // stops after `last` (inclusive); later nodes keep stale values.
  void forward();
  void forward_until(NodeId last);

  // Reverse accumulation from a scalar loss. Parameter gradients are
  // *accumulated* across calls (zero_param_grads() resets them); all other
  // gradients are scratch. Throws NonScalarLoss unless numel(loss) == 1.
  void backprop(NodeId loss);
  void zero_param_grads();

  const Tensor& value(NodeId id) const;
  Tensor& mutable_value(NodeId id);  // leaves only
  const Tensor& grad(NodeId id) const;
  OpKind kind(NodeId id) const;
  bool is_parameter(NodeId id) const { return kind(id) == OpKind::kParameter; }
  std::vector<NodeId> parameters() const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;            // unused when external is set
    Tensor* external = nullptr;
    Tensor grad;
    Tensor scratch;          // op workspace kept from forward (im2col, ...)
    double a = 0.0, b = 0.0; // kAxpb coefficients
    int stride = 1;
    std::size_t row = 0;     // kRowSelect
    std::vector<double> weights;  // kWeightedSum
  };

  const Tensor& val(NodeId id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  NodeId push(Node node);
  void compute(Node& node);
  void propagate(Node& node);

  std::vector<Node> nodes_;
};

// Gradient verification by central finite differences. For each selected
// parameter entry, compares the tape gradient against (f(x+h) - f(x-h))/2h.
// Entries where the two one-sided differences disagree relative to the
// gradient scale sit on a kink (e.g. relu at 0) and are reported as
// excluded rather than compared. `max_indices_per_param` == 0 checks every
// entry; otherwise that many indices are sampled deterministically.
struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  NodeId worst_param = 0;
  std::size_t worst_index = 0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;

  bool pass(double tolerance) const { return max_rel_error < tolerance; }
};

FiniteDiffReport finite_diff_check(Tape& tape, NodeId loss,
                                   const std::vector<NodeId>& params,
                                   double step,
                                   std::size_t max_indices_per_param = 0,
                                   std::uint64_t sample_seed = 0);

}  // namespace capslid
