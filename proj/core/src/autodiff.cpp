#include "capslid/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <limits>
#include <cmath>
#include <random>

namespace capslid {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using MapConstVec = Eigen::Map<const Eigen::VectorXd>;

void require(bool ok, const char* msg) {
  if (!ok) throw Error(ErrorKind::ShapeMismatch, msg);
}

// Gathers conv patches into rows: out[p, (kh*K+kw)*Cin+ci] with p = oh*Wo+ow.
void im2col(const Tensor& x, int k, int stride, std::size_t ho, std::size_t wo,
            Tensor& cols) {
  const std::size_t w = x.shape[1], cin = x.shape[2];
  const std::size_t patch = static_cast<std::size_t>(k) * k * cin;
  cols.shape = {ho * wo, patch};
  cols.data.resize(ho * wo * patch);
  double* out = cols.data.data();
  for (std::size_t oh = 0; oh < ho; ++oh)
    for (std::size_t ow = 0; ow < wo; ++ow)
      for (int kh = 0; kh < k; ++kh) {
        const double* src =
            &x.data[((oh * stride + kh) * w + ow * stride) * cin];
        // kw and ci are contiguous in the source row, copy k*cin at once.
        std::copy(src, src + static_cast<std::size_t>(k) * cin, out);
        out += static_cast<std::size_t>(k) * cin;
      }
}

void col2im_add(const Tensor& cols, int k, int stride, std::size_t ho,
                std::size_t wo, Tensor& dx) {
  const std::size_t w = dx.shape[1], cin = dx.shape[2];
  const double* src = cols.data.data();
  for (std::size_t oh = 0; oh < ho; ++oh)
    for (std::size_t ow = 0; ow < wo; ++ow)
      for (int kh = 0; kh < k; ++kh) {
        double* dst = &dx.data[((oh * stride + kh) * w + ow * stride) * cin];
        for (std::size_t q = 0; q < static_cast<std::size_t>(k) * cin; ++q)
          dst[q] += src[q];
        src += static_cast<std::size_t>(k) * cin;
      }
}

}  // namespace

NodeId Tape::push(Node node) {
  if (node.kind != OpKind::kInput && node.kind != OpKind::kParameter)
    compute(node);
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::input(Tensor value) {
  Node n;
  n.kind = OpKind::kInput;
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Tape::parameter(Tensor value) {
  Node n;
  n.kind = OpKind::kParameter;
  n.value = std::move(value);
  n.grad = Tensor(n.value.shape);
  return push(std::move(n));
}

NodeId Tape::parameter(Tensor* external) {
  Node n;
  n.kind = OpKind::kParameter;
  n.external = external;
  n.grad = Tensor(external->shape);
  return push(std::move(n));
}

NodeId Tape::conv2d_valid(NodeId x, NodeId kernels, int stride) {
  const Tensor& xv = val(x);
  const Tensor& kv = val(kernels);
  require(xv.rank() == 3, "conv2d: input must be [H,W,Cin]");
  require(kv.rank() == 4, "conv2d: kernels must be [K,K,Cin,Cout]");
  require(kv.shape[0] == kv.shape[1], "conv2d: kernels must be square");
  require(kv.shape[2] == xv.shape[2], "conv2d: channel mismatch");
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(xv.shape[0] >= kv.shape[0] && xv.shape[1] >= kv.shape[1],
          "conv2d: input smaller than kernel");
  Node n;
  n.kind = OpKind::kConv2dValid;
  n.inputs = {x, kernels};
  n.stride = stride;
  return push(std::move(n));
}

NodeId Tape::channel_bias(NodeId x, NodeId bias) {
  require(val(x).rank() == 3 && val(bias).rank() == 1 &&
              val(bias).shape[0] == val(x).shape[2],
          "channel_bias: need x[H,W,C] and b[C]");
  Node n;
  n.kind = OpKind::kChannelBias;
  n.inputs = {x, bias};
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::fully_connected(NodeId x, NodeId weights, NodeId bias) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(weights);
  const Tensor& bv = val(bias);
  require(xv.rank() == 1 && wv.rank() == 2 && bv.rank() == 1,
          "fully_connected: need x[in], w[out,in], b[out]");
  require(wv.shape[1] == xv.shape[0] && wv.shape[0] == bv.shape[0],
          "fully_connected: dimension mismatch");
  Node n;
  n.kind = OpKind::kFullyConnected;
  n.inputs = {x, weights, bias};
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId x) {
  Node n;
  n.kind = OpKind::kSigmoid;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  require(val(a).same_shape(val(b)), "add: shape mismatch");
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  require(val(a).same_shape(val(b)), "sub: shape mismatch");
  Node n;
  n.kind = OpKind::kSub;
  n.inputs = {a, b};
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  require(val(a).same_shape(val(b)), "mul: shape mismatch");
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  return push(std::move(n));
}

NodeId Tape::axpb(NodeId x, double a, double b) {
  Node n;
  n.kind = OpKind::kAxpb;
  n.inputs = {x};
  n.a = a;
  n.b = b;
  return push(std::move(n));
}

NodeId Tape::sum(NodeId x) {
  Node n;
  n.kind = OpKind::kSumAll;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::weighted_sum(NodeId x, std::vector<double> weights) {
  require(weights.size() == val(x).numel(), "weighted_sum: weight count");
  Node n;
  n.kind = OpKind::kWeightedSum;
  n.inputs = {x};
  n.weights = std::move(weights);
  return push(std::move(n));
}

NodeId Tape::softmax_rows(NodeId x) {
  require(val(x).rank() == 2, "softmax_rows: need a matrix");
  Node n;
  n.kind = OpKind::kSoftmaxRows;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::rows_l2norm(NodeId x) {
  require(val(x).rank() == 2, "rows_l2norm: need a matrix");
  Node n;
  n.kind = OpKind::kRowsL2Norm;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::squash_rows(NodeId x) {
  require(val(x).rank() == 2, "squash_rows: need a matrix");
  Node n;
  n.kind = OpKind::kSquashRows;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::caps_transform(NodeId u, NodeId w) {
  const Tensor& uv = val(u);
  const Tensor& wv = val(w);
  require(uv.rank() == 2 && wv.rank() == 4, "caps_transform: need u[I,D], w[I,J,Dout,Din]");
  require(wv.shape[0] == uv.shape[0] && wv.shape[3] == uv.shape[1],
          "caps_transform: dimension mismatch");
  Node n;
  n.kind = OpKind::kCapsTransform;
  n.inputs = {u, w};
  return push(std::move(n));
}

NodeId Tape::coupling_sum(NodeId couplings, NodeId predictions) {
  const Tensor& cv = val(couplings);
  const Tensor& pv = val(predictions);
  require(cv.rank() == 2 && pv.rank() == 3 && cv.shape[0] == pv.shape[0] &&
              cv.shape[1] == pv.shape[1],
          "coupling_sum: need c[I,J], uhat[I,J,D]");
  Node n;
  n.kind = OpKind::kCouplingSum;
  n.inputs = {couplings, predictions};
  return push(std::move(n));
}

NodeId Tape::agreement(NodeId predictions, NodeId v) {
  const Tensor& pv = val(predictions);
  const Tensor& vv = val(v);
  require(pv.rank() == 3 && vv.rank() == 2 && pv.shape[1] == vv.shape[0] &&
              pv.shape[2] == vv.shape[1],
          "agreement: need uhat[I,J,D], v[J,D]");
  Node n;
  n.kind = OpKind::kAgreement;
  n.inputs = {predictions, v};
  return push(std::move(n));
}

NodeId Tape::row_select(NodeId x, std::size_t row) {
  require(val(x).rank() == 2 && row < val(x).shape[0], "row_select: bad row");
  Node n;
  n.kind = OpKind::kRowSelect;
  n.inputs = {x};
  n.row = row;
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId x, std::vector<std::size_t> shape) {
  require(Tensor::shape_numel(shape) == val(x).numel(), "reshape: element count");
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {x};
  n.value.shape = std::move(shape);
  return push(std::move(n));
}

void Tape::set_value(NodeId leaf, const Tensor& value) {
  Node& n = nodes_.at(leaf);
  require(n.kind == OpKind::kInput || n.kind == OpKind::kParameter,
          "set_value: not a leaf");
  Tensor& dst = n.external ? *n.external : n.value;
  require(dst.shape == value.shape, "set_value: shape mismatch");
  dst.data = value.data;
}

void Tape::set_row_select(NodeId node, std::size_t row) {
  Node& n = nodes_.at(node);
  require(n.kind == OpKind::kRowSelect, "set_row_select: wrong node kind");
  require(row < val(n.inputs[0]).shape[0], "set_row_select: row out of range");
  n.row = row;
}

void Tape::set_weights(NodeId node, std::vector<double> weights) {
  Node& n = nodes_.at(node);
  require(n.kind == OpKind::kWeightedSum, "set_weights: wrong node kind");
  require(weights.size() == n.weights.size(), "set_weights: weight count");
  n.weights = std::move(weights);
}

void Tape::forward() { forward_until(static_cast<NodeId>(nodes_.size() - 1)); }

void Tape::forward_until(NodeId last) {
  for (NodeId i = 0; i <= last; ++i) {
    Node& n = nodes_[i];
    if (n.kind != OpKind::kInput && n.kind != OpKind::kParameter) compute(n);
  }
}

void Tape::compute(Node& n) {
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
      break;
    case OpKind::kConv2dValid: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& k = val(n.inputs[1]);
      const int ks = static_cast<int>(k.shape[0]);
      const std::size_t ho = (x.shape[0] - ks) / n.stride + 1;
      const std::size_t wo = (x.shape[1] - ks) / n.stride + 1;
      const std::size_t cout = k.shape[3];
      const std::size_t patch = static_cast<std::size_t>(ks) * ks * x.shape[2];
      im2col(x, ks, n.stride, ho, wo, n.scratch);
      n.value.shape = {ho, wo, cout};
      n.value.data.resize(ho * wo * cout);
      MapConstMat a(n.scratch.data.data(), static_cast<Eigen::Index>(ho * wo),
                    static_cast<Eigen::Index>(patch));
      MapConstMat b(k.data.data(), static_cast<Eigen::Index>(patch),
                    static_cast<Eigen::Index>(cout));
      MapMat y(n.value.data.data(), static_cast<Eigen::Index>(ho * wo),
               static_cast<Eigen::Index>(cout));
      y.noalias() = a * b;
      break;
    }
    case OpKind::kChannelBias: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      const std::size_t c = b.shape[0];
      for (std::size_t i = 0; i < x.numel(); ++i)
        n.value.data[i] = x.data[i] + b.data[i % c];
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = val(n.inputs[0]);
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      for (std::size_t i = 0; i < x.numel(); ++i)
        n.value.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
      break;
    }
    case OpKind::kFullyConnected: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& w = val(n.inputs[1]);
      const Tensor& b = val(n.inputs[2]);
      const std::size_t out = w.shape[0], in = w.shape[1];
      n.value.shape = {out};
      n.value.data.resize(out);
      MapConstMat wm(w.data.data(), static_cast<Eigen::Index>(out),
                     static_cast<Eigen::Index>(in));
      MapConstVec xv(x.data.data(), static_cast<Eigen::Index>(in));
      MapConstVec bv(b.data.data(), static_cast<Eigen::Index>(out));
      MapVec yv(n.value.data.data(), static_cast<Eigen::Index>(out));
      yv.noalias() = wm * xv + bv;
      break;
    }
    case OpKind::kSigmoid: {
      const Tensor& x = val(n.inputs[0]);
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      for (std::size_t i = 0; i < x.numel(); ++i)
        n.value.data[i] = 1.0 / (1.0 + std::exp(-x.data[i]));
      break;
    }
    case OpKind::kAdd: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value.shape = a.shape;
      n.value.data.resize(a.numel());
      for (std::size_t i = 0; i < a.numel(); ++i)
        n.value.data[i] = a.data[i] + b.data[i];
      break;
    }
    case OpKind::kSub: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value.shape = a.shape;
      n.value.data.resize(a.numel());
      for (std::size_t i = 0; i < a.numel(); ++i)
        n.value.data[i] = a.data[i] - b.data[i];
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      n.value.shape = a.shape;
      n.value.data.resize(a.numel());
      for (std::size_t i = 0; i < a.numel(); ++i)
        n.value.data[i] = a.data[i] * b.data[i];
      break;
    }
    case OpKind::kAxpb: {
      const Tensor& x = val(n.inputs[0]);
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      for (std::size_t i = 0; i < x.numel(); ++i)
        n.value.data[i] = n.a * x.data[i] + n.b;
      break;
    }
    case OpKind::kSumAll: {
      const Tensor& x = val(n.inputs[0]);
      double s = 0.0;
      for (double v : x.data) s += v;
      n.value.shape = {1};
      n.value.data.assign(1, s);
      break;
    }
    case OpKind::kWeightedSum: {
      const Tensor& x = val(n.inputs[0]);
      double s = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) s += x.data[i] * n.weights[i];
      n.value.shape = {1};
      n.value.data.assign(1, s);
      break;
    }
    case OpKind::kSoftmaxRows: {
      const Tensor& x = val(n.inputs[0]);
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = &x.data[r * cols];
        double* yr = &n.value.data[r * cols];
        double mx = xr[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          yr[c] = std::exp(xr[c] - mx);
          z += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
      }
      break;
    }
    case OpKind::kRowsL2Norm: {
      const Tensor& x = val(n.inputs[0]);
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      n.value.shape = {rows};
      n.value.data.resize(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          double v = x.data[r * cols + c];
          s += v * v;
        }
        n.value.data[r] = std::sqrt(s);
      }
      break;
    }
    case OpKind::kSquashRows: {
      const Tensor& x = val(n.inputs[0]);
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      n.value.shape = x.shape;
      n.value.data.resize(x.numel());
      n.scratch.shape = {rows};
      n.scratch.data.resize(rows);  // row norms, reused in backward
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          double v = x.data[r * cols + c];
          s += v * v;
        }
        const double norm = std::sqrt(s);
        n.scratch.data[r] = norm;
        const double g = norm / (1.0 + norm * norm);  // squash(0) = 0
        for (std::size_t c = 0; c < cols; ++c)
          n.value.data[r * cols + c] = g * x.data[r * cols + c];
      }
      break;
    }
    case OpKind::kCapsTransform: {
      const Tensor& u = val(n.inputs[0]);
      const Tensor& w = val(n.inputs[1]);
      const std::size_t i_count = u.shape[0], din = u.shape[1];
      const std::size_t j_count = w.shape[1], dout = w.shape[2];
      n.value.shape = {i_count, j_count, dout};
      n.value.data.resize(i_count * j_count * dout);
      for (std::size_t i = 0; i < i_count; ++i) {
        MapConstMat wi(&w.data[i * j_count * dout * din],
                       static_cast<Eigen::Index>(j_count * dout),
                       static_cast<Eigen::Index>(din));
        MapConstVec ui(&u.data[i * din], static_cast<Eigen::Index>(din));
        MapVec out(&n.value.data[i * j_count * dout],
                   static_cast<Eigen::Index>(j_count * dout));
        out.noalias() = wi * ui;
      }
      break;
    }
    case OpKind::kCouplingSum: {
      const Tensor& c = val(n.inputs[0]);
      const Tensor& uhat = val(n.inputs[1]);
      const std::size_t i_count = c.shape[0], j_count = c.shape[1];
      const std::size_t d = uhat.shape[2];
      n.value.shape = {j_count, d};
      n.value.data.assign(j_count * d, 0.0);
      for (std::size_t i = 0; i < i_count; ++i)
        for (std::size_t j = 0; j < j_count; ++j) {
          const double cij = c.data[i * j_count + j];
          const double* uh = &uhat.data[(i * j_count + j) * d];
          double* s = &n.value.data[j * d];
          for (std::size_t k = 0; k < d; ++k) s[k] += cij * uh[k];
        }
      break;
    }
    case OpKind::kAgreement: {
      const Tensor& uhat = val(n.inputs[0]);
      const Tensor& v = val(n.inputs[1]);
      const std::size_t i_count = uhat.shape[0], j_count = uhat.shape[1];
      const std::size_t d = uhat.shape[2];
      n.value.shape = {i_count, j_count};
      n.value.data.resize(i_count * j_count);
      for (std::size_t i = 0; i < i_count; ++i)
        for (std::size_t j = 0; j < j_count; ++j) {
          const double* uh = &uhat.data[(i * j_count + j) * d];
          const double* vj = &v.data[j * d];
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += uh[k] * vj[k];
          n.value.data[i * j_count + j] = s;
        }
      break;
    }
    case OpKind::kRowSelect: {
      const Tensor& x = val(n.inputs[0]);
      const std::size_t cols = x.shape[1];
      n.value.shape = {cols};
      n.value.data.assign(x.data.begin() + n.row * cols,
                          x.data.begin() + (n.row + 1) * cols);
      break;
    }
    case OpKind::kReshape: {
      const Tensor& x = val(n.inputs[0]);
      n.value.data = x.data;  // shape was fixed at construction
      break;
    }
  }
}

void Tape::backprop(NodeId loss) {
  if (val(loss).numel() != 1)
    throw Error(ErrorKind::NonScalarLoss,
                "loss has " + std::to_string(val(loss).numel()) + " elements");
  for (NodeId i = 0; i <= loss; ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::kParameter) continue;  // accumulates across calls
    n.grad.shape = val(i).shape;
    n.grad.data.assign(val(i).numel(), 0.0);
  }
  nodes_[loss].grad.data[0] = 1.0;
  for (NodeId i = loss + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.kind != OpKind::kInput && n.kind != OpKind::kParameter) propagate(n);
  }
}

void Tape::zero_param_grads() {
  for (Node& n : nodes_)
    if (n.kind == OpKind::kParameter) n.grad.data.assign(n.grad.numel(), 0.0);
}

void Tape::propagate(Node& n) {
  const Tensor& dy = n.grad;
  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
      break;
    case OpKind::kConv2dValid: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& k = val(n.inputs[1]);
      Tensor& dx = nodes_[n.inputs[0]].grad;
      Tensor& dk = nodes_[n.inputs[1]].grad;
      const int ks = static_cast<int>(k.shape[0]);
      const std::size_t ho = n.value.shape[0], wo = n.value.shape[1];
      const std::size_t cout = k.shape[3];
      const std::size_t patch = static_cast<std::size_t>(ks) * ks * x.shape[2];
      MapConstMat a(n.scratch.data.data(), static_cast<Eigen::Index>(ho * wo),
                    static_cast<Eigen::Index>(patch));
      MapConstMat b(k.data.data(), static_cast<Eigen::Index>(patch),
                    static_cast<Eigen::Index>(cout));
      MapConstMat dym(dy.data.data(), static_cast<Eigen::Index>(ho * wo),
                      static_cast<Eigen::Index>(cout));
      MapMat dkm(dk.data.data(), static_cast<Eigen::Index>(patch),
                 static_cast<Eigen::Index>(cout));
      dkm.noalias() += a.transpose() * dym;
      Tensor dcols({ho * wo, patch});
      MapMat dam(dcols.data.data(), static_cast<Eigen::Index>(ho * wo),
                 static_cast<Eigen::Index>(patch));
      dam.noalias() = dym * b.transpose();
      col2im_add(dcols, ks, n.stride, ho, wo, dx);
      break;
    }
    case OpKind::kChannelBias: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      Tensor& db = nodes_[n.inputs[1]].grad;
      const std::size_t c = db.numel();
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        dx.data[i] += dy.data[i];
        db.data[i % c] += dy.data[i];
      }
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = val(n.inputs[0]);
      Tensor& dx = nodes_[n.inputs[0]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i)
        if (x.data[i] > 0.0) dx.data[i] += dy.data[i];
      break;
    }
    case OpKind::kFullyConnected: {
      const Tensor& x = val(n.inputs[0]);
      const Tensor& w = val(n.inputs[1]);
      Tensor& dx = nodes_[n.inputs[0]].grad;
      Tensor& dw = nodes_[n.inputs[1]].grad;
      Tensor& db = nodes_[n.inputs[2]].grad;
      const std::size_t out = w.shape[0], in = w.shape[1];
      MapConstMat wm(w.data.data(), static_cast<Eigen::Index>(out),
                     static_cast<Eigen::Index>(in));
      MapConstVec xv(x.data.data(), static_cast<Eigen::Index>(in));
      MapConstVec dyv(dy.data.data(), static_cast<Eigen::Index>(out));
      MapVec dxv(dx.data.data(), static_cast<Eigen::Index>(in));
      MapMat dwm(dw.data.data(), static_cast<Eigen::Index>(out),
                 static_cast<Eigen::Index>(in));
      MapVec dbv(db.data.data(), static_cast<Eigen::Index>(out));
      dxv.noalias() += wm.transpose() * dyv;
      dwm.noalias() += dyv * xv.transpose();
      dbv += dyv;
      break;
    }
    case OpKind::kSigmoid: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        const double y = n.value.data[i];
        dx.data[i] += dy.data[i] * y * (1.0 - y);
      }
      break;
    }
    case OpKind::kAdd: {
      Tensor& da = nodes_[n.inputs[0]].grad;
      Tensor& db = nodes_[n.inputs[1]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        da.data[i] += dy.data[i];
        db.data[i] += dy.data[i];
      }
      break;
    }
    case OpKind::kSub: {
      Tensor& da = nodes_[n.inputs[0]].grad;
      Tensor& db = nodes_[n.inputs[1]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        da.data[i] += dy.data[i];
        db.data[i] -= dy.data[i];
      }
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = val(n.inputs[0]);
      const Tensor& b = val(n.inputs[1]);
      Tensor& da = nodes_[n.inputs[0]].grad;
      Tensor& db = nodes_[n.inputs[1]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        da.data[i] += dy.data[i] * b.data[i];
        db.data[i] += dy.data[i] * a.data[i];
      }
      break;
    }
    case OpKind::kAxpb: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i)
        dx.data[i] += n.a * dy.data[i];
      break;
    }
    case OpKind::kSumAll: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const double g = dy.data[0];
      for (std::size_t i = 0; i < dx.numel(); ++i) dx.data[i] += g;
      break;
    }
    case OpKind::kWeightedSum: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const double g = dy.data[0];
      for (std::size_t i = 0; i < dx.numel(); ++i)
        dx.data[i] += g * n.weights[i];
      break;
    }
    case OpKind::kSoftmaxRows: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const std::size_t rows = n.value.shape[0], cols = n.value.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = &n.value.data[r * cols];
        const double* g = &dy.data[r * cols];
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c)
          dx.data[r * cols + c] += y[c] * (g[c] - dot);
      }
      break;
    }
    case OpKind::kRowsL2Norm: {
      const Tensor& x = val(n.inputs[0]);
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = n.value.data[r];
        if (norm == 0.0) continue;  // gradient defined as 0 at the origin
        const double g = dy.data[r] / norm;
        for (std::size_t c = 0; c < cols; ++c)
          dx.data[r * cols + c] += g * x.data[r * cols + c];
      }
      break;
    }
    case OpKind::kSquashRows: {
      const Tensor& x = val(n.inputs[0]);
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double norm = n.scratch.data[r];
        if (norm == 0.0) continue;  // squash gradient defined as 0 at 0
        const double g = norm / (1.0 + norm * norm);
        const double gp = (1.0 - norm * norm) /
                          ((1.0 + norm * norm) * (1.0 + norm * norm));
        const double* xr = &x.data[r * cols];
        const double* gr = &dy.data[r * cols];
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * xr[c];
        const double coef = gp / norm * dot;
        for (std::size_t c = 0; c < cols; ++c)
          dx.data[r * cols + c] += g * gr[c] + coef * xr[c];
      }
      break;
    }
    case OpKind::kCapsTransform: {
      const Tensor& u = val(n.inputs[0]);
      const Tensor& w = val(n.inputs[1]);
      Tensor& du = nodes_[n.inputs[0]].grad;
      Tensor& dw = nodes_[n.inputs[1]].grad;
      const std::size_t i_count = u.shape[0], din = u.shape[1];
      const std::size_t j_count = w.shape[1], dout = w.shape[2];
      const std::size_t block = j_count * dout;
      for (std::size_t i = 0; i < i_count; ++i) {
        MapConstMat wi(&w.data[i * block * din],
                       static_cast<Eigen::Index>(block),
                       static_cast<Eigen::Index>(din));
        MapConstVec ui(&u.data[i * din], static_cast<Eigen::Index>(din));
        MapConstVec gi(&dy.data[i * block], static_cast<Eigen::Index>(block));
        MapVec dui(&du.data[i * din], static_cast<Eigen::Index>(din));
        MapMat dwi(&dw.data[i * block * din], static_cast<Eigen::Index>(block),
                   static_cast<Eigen::Index>(din));
        dui.noalias() += wi.transpose() * gi;
        dwi.noalias() += gi * ui.transpose();
      }
      break;
    }
    case OpKind::kCouplingSum: {
      const Tensor& c = val(n.inputs[0]);
      const Tensor& uhat = val(n.inputs[1]);
      Tensor& dc = nodes_[n.inputs[0]].grad;
      Tensor& duhat = nodes_[n.inputs[1]].grad;
      const std::size_t i_count = c.shape[0], j_count = c.shape[1];
      const std::size_t d = uhat.shape[2];
      for (std::size_t i = 0; i < i_count; ++i)
        for (std::size_t j = 0; j < j_count; ++j) {
          const double* uh = &uhat.data[(i * j_count + j) * d];
          double* duh = &duhat.data[(i * j_count + j) * d];
          const double* ds = &dy.data[j * d];
          const double cij = c.data[i * j_count + j];
          double dot = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            dot += ds[k] * uh[k];
            duh[k] += cij * ds[k];
          }
          dc.data[i * j_count + j] += dot;
        }
      break;
    }
    case OpKind::kAgreement: {
      const Tensor& uhat = val(n.inputs[0]);
      const Tensor& v = val(n.inputs[1]);
      Tensor& duhat = nodes_[n.inputs[0]].grad;
      Tensor& dv = nodes_[n.inputs[1]].grad;
      const std::size_t i_count = uhat.shape[0], j_count = uhat.shape[1];
      const std::size_t d = uhat.shape[2];
      for (std::size_t i = 0; i < i_count; ++i)
        for (std::size_t j = 0; j < j_count; ++j) {
          const double g = dy.data[i * j_count + j];
          if (g == 0.0) continue;
          const double* uh = &uhat.data[(i * j_count + j) * d];
          double* duh = &duhat.data[(i * j_count + j) * d];
          const double* vj = &v.data[j * d];
          double* dvj = &dv.data[j * d];
          for (std::size_t k = 0; k < d; ++k) {
            duh[k] += g * vj[k];
            dvj[k] += g * uh[k];
          }
        }
      break;
    }
    case OpKind::kRowSelect: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      const std::size_t cols = dy.numel();
      for (std::size_t c = 0; c < cols; ++c)
        dx.data[n.row * cols + c] += dy.data[c];
      break;
    }
    case OpKind::kReshape: {
      Tensor& dx = nodes_[n.inputs[0]].grad;
      for (std::size_t i = 0; i < dy.numel(); ++i) dx.data[i] += dy.data[i];
      break;
    }
  }
}

const Tensor& Tape::value(NodeId id) const { return val(id); }

Tensor& Tape::mutable_value(NodeId id) {
  Node& n = nodes_.at(id);
  if (n.kind != OpKind::kInput && n.kind != OpKind::kParameter)
    throw Error(ErrorKind::ShapeMismatch, "mutable_value: not a leaf");
  return n.external ? *n.external : n.value;
}

const Tensor& Tape::grad(NodeId id) const { return nodes_.at(id).grad; }

OpKind Tape::kind(NodeId id) const { return nodes_.at(id).kind; }

std::vector<NodeId> Tape::parameters() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == OpKind::kParameter) out.push_back(i);
  return out;
}

FiniteDiffReport finite_diff_check(Tape& tape, NodeId loss,
                                   const std::vector<NodeId>& params,
                                   double step,
                                   std::size_t max_indices_per_param,
                                   std::uint64_t sample_seed) {
  if (step <= 0.0)
    throw Error(ErrorKind::ShapeMismatch, "finite_diff_check: step must be > 0");
  std::vector<NodeId> targets = params.empty() ? tape.parameters() : params;

  tape.forward();
  tape.zero_param_grads();
  tape.backprop(loss);
  std::vector<Tensor> ad_grads;
  ad_grads.reserve(targets.size());
  for (NodeId p : targets) ad_grads.push_back(tape.grad(p));
  const double f0 = tape.value(loss)[0];

  FiniteDiffReport report;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const NodeId p = targets[t];
    Tensor& storage = tape.mutable_value(p);
    const std::size_t n = storage.numel();

    std::vector<std::size_t> indices;
    if (max_indices_per_param == 0 || n <= max_indices_per_param) {
      indices.resize(n);
      for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    } else {
      std::mt19937_64 rng(sample_seed * 0x9E3779B97F4A7C15ull + p + 1);
      std::vector<std::size_t> pool(n);
      for (std::size_t i = 0; i < n; ++i) pool[i] = i;
      for (std::size_t i = 0; i < max_indices_per_param; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
        std::swap(pool[i], pool[j]);
      }
      indices.assign(pool.begin(), pool.begin() + max_indices_per_param);
    }

    for (std::size_t idx : indices) {
      const double orig = storage[idx];
      storage[idx] = orig + step;
      tape.forward_until(loss);
      const double fp = tape.value(loss)[0];
      storage[idx] = orig - step;
      tape.forward_until(loss);
      const double fm = tape.value(loss)[0];
      storage[idx] = orig;

      const double central = (fp - fm) / (2.0 * step);
      const double fwd = (fp - f0) / step;
      const double bwd = (f0 - fm) / step;
      const double ad = ad_grads[t][idx];
      // One-sided slopes that disagree relative to the gradient scale mean
      // the interval straddles a kink (relu/norm subgradient); those points
      // are reported, not compared.
      if (std::abs(fwd - bwd) > 0.1 * std::abs(central) + 1e-9) {
        ++report.excluded;
        continue;
      }
      // Rounding in f propagates into the quotient as ~eps*|f|/step of
      // absolute noise; gradients small enough that this noise alone could
      // breach 1e-4 relative cannot be certified by finite differences and
      // are reported as excluded.
      const double f_scale = std::max({std::abs(f0), std::abs(fp), std::abs(fm)});
      const double fd_noise =
          4.0 * std::numeric_limits<double>::epsilon() * f_scale / step;
      if (std::max(std::abs(ad), std::abs(central)) < fd_noise * 1e4) {
        ++report.excluded;
        continue;
      }
      const double rel = std::abs(ad - central) /
                         std::max({std::abs(ad), std::abs(central), 1e-12});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = p;
        report.worst_index = idx;
        report.worst_ad = ad;
        report.worst_fd = central;
      }
    }
  }
  tape.forward_until(loss);  // restore unperturbed state
  return report;
}

}  // namespace capslid
