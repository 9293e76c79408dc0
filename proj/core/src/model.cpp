#include "capslid/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace capslid {

namespace {

// Deterministic uniforms/normals built directly on the mt19937_64 stream;
// the stdlib distributions are implementation-defined sequences.
double next_unit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
}

double next_uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * next_unit(rng);
}

double next_normal(std::mt19937_64& rng) {
  // Box-Muller; u clamped away from 0 so the log stays finite.
  const double u = std::max(next_unit(rng), 0x1.0p-60);
  const double v = next_unit(rng);
  return std::sqrt(-2.0 * std::log(u)) *
         std::cos(2.0 * std::numbers::pi * v);
}

void fill_glorot(Tensor& t, std::size_t fan_in, std::size_t fan_out,
                 std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data) v = next_uniform(rng, -limit, limit);
}

void fill_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  for (double& v : t.data) v = stddev * next_normal(rng);
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw Error(ErrorKind::ShapeMismatch, what);
  };
  positive(input_rows, "input_rows");
  positive(input_cols, "input_cols");
  positive(conv1_channels, "conv1_channels");
  positive(primary_banks, "primary_banks");
  positive(primary_dim, "primary_dim");
  positive(mid_caps, "mid_caps");
  positive(mid_dim, "mid_dim");
  positive(lang_caps, "lang_caps");
  positive(lang_dim, "lang_dim");
  positive(dec_hidden1, "dec_hidden1");
  positive(dec_hidden2, "dec_hidden2");
  positive(routing_iterations, "routing_iterations");
  if (conv1_out_rows() < kernel || conv1_out_cols() < kernel)
    throw Error(ErrorKind::ShapeMismatch,
                "input too small for two valid convolutions");
}

ModelConfig ModelConfig::reduced() {
  ModelConfig cfg;
  cfg.conv1_channels = 8;
  cfg.primary_banks = 4;
  cfg.mid_caps = 8;
  cfg.lang_dim = 8;
  cfg.dec_hidden1 = 32;
  cfg.dec_hidden2 = 64;
  return cfg;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto k = static_cast<std::size_t>(config.kernel);
  const auto c1 = static_cast<std::size_t>(config.conv1_channels);
  const auto pc = static_cast<std::size_t>(config.primary_banks) *
                  static_cast<std::size_t>(config.primary_dim);
  const auto caps = static_cast<std::size_t>(config.primary_capsules());
  const auto pixels = static_cast<std::size_t>(config.pixels());

  ModelParams p;
  p.config = config;
  p.conv1_w = Tensor({k, k, 1, c1});
  p.conv1_b = Tensor({c1});
  p.primary_w = Tensor({k, k, c1, pc});
  p.primary_b = Tensor({pc});
  p.mid_w = Tensor({caps, static_cast<std::size_t>(config.mid_caps),
                    static_cast<std::size_t>(config.mid_dim),
                    static_cast<std::size_t>(config.primary_dim)});
  p.lang_w = Tensor({static_cast<std::size_t>(config.mid_caps),
                     static_cast<std::size_t>(config.lang_caps),
                     static_cast<std::size_t>(config.lang_dim),
                     static_cast<std::size_t>(config.mid_dim)});
  p.dec1_w = Tensor({static_cast<std::size_t>(config.dec_hidden1),
                     static_cast<std::size_t>(config.lang_dim)});
  p.dec1_b = Tensor({static_cast<std::size_t>(config.dec_hidden1)});
  p.dec2_w = Tensor({static_cast<std::size_t>(config.dec_hidden2),
                     static_cast<std::size_t>(config.dec_hidden1)});
  p.dec2_b = Tensor({static_cast<std::size_t>(config.dec_hidden2)});
  p.dec3_w = Tensor({pixels, static_cast<std::size_t>(config.dec_hidden2)});
  p.dec3_b = Tensor({pixels});

  std::mt19937_64 rng(seed);
  fill_glorot(p.conv1_w, k * k * 1, k * k * c1, rng);
  fill_glorot(p.primary_w, k * k * c1, k * k * pc, rng);
  fill_normal(p.mid_w, 0.1, rng);
  fill_normal(p.lang_w, 0.1, rng);
  fill_glorot(p.dec1_w, config.lang_dim, config.dec_hidden1, rng);
  fill_glorot(p.dec2_w, config.dec_hidden1, config.dec_hidden2, rng);
  fill_glorot(p.dec3_w, config.dec_hidden2, pixels, rng);
  return p;
}

std::vector<std::pair<std::string, Tensor*>> ModelParams::named_tensors() {
  return {
      {"conv1.w", &conv1_w},     {"conv1.b", &conv1_b},
      {"primary.w", &primary_w}, {"primary.b", &primary_b},
      {"mid.w", &mid_w},         {"lang.w", &lang_w},
      {"dec1.w", &dec1_w},       {"dec1.b", &dec1_b},
      {"dec2.w", &dec2_w},       {"dec2.b", &dec2_b},
      {"dec3.w", &dec3_w},       {"dec3.b", &dec3_b},
  };
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named_tensors()
    const {
  auto mutable_view = const_cast<ModelParams*>(this)->named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_view.size());
  for (auto& [name, tensor] : mutable_view) out.emplace_back(name, tensor);
  return out;
}

std::vector<double> squash(const std::vector<double>& s) {
  double sq = 0.0;
  for (double v : s) sq += v * v;
  const double norm = std::sqrt(sq);
  const double g = norm / (1.0 + sq);  // 0 at the origin
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = g * s[i];
  return out;
}

RoutingResult dynamic_routing(const Tensor& predictions, int iterations) {
  if (predictions.rank() != 3)
    throw Error(ErrorKind::ShapeMismatch, "dynamic_routing: need uhat[I,J,D]");
  if (iterations < 1)
    throw Error(ErrorKind::ShapeMismatch, "dynamic_routing: iterations >= 1");
  const std::size_t i_count = predictions.shape[0];
  const std::size_t j_count = predictions.shape[1];
  const std::size_t d = predictions.shape[2];

  Tensor logits({i_count, j_count});
  Tensor couplings({i_count, j_count});
  Tensor v({j_count, d});
  for (int iter = 0; iter < iterations; ++iter) {
    // couplings: softmax over parents for each child
    for (std::size_t i = 0; i < i_count; ++i) {
      double mx = logits.at(i, 0);
      for (std::size_t j = 1; j < j_count; ++j)
        mx = std::max(mx, logits.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < j_count; ++j) {
        couplings.at(i, j) = std::exp(logits.at(i, j) - mx);
        z += couplings.at(i, j);
      }
      for (std::size_t j = 0; j < j_count; ++j) couplings.at(i, j) /= z;
    }
    // s[j] = sum_i c[i,j] * uhat[i,j]; v[j] = squash(s[j])
    v.fill(0.0);
    for (std::size_t i = 0; i < i_count; ++i)
      for (std::size_t j = 0; j < j_count; ++j) {
        const double c = couplings.at(i, j);
        const double* uh = &predictions.data[(i * j_count + j) * d];
        for (std::size_t k = 0; k < d; ++k) v.data[j * d + k] += c * uh[k];
      }
    for (std::size_t j = 0; j < j_count; ++j) {
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double s = v.data[j * d + k];
        sq += s * s;
      }
      const double norm = std::sqrt(sq);
      const double g = norm / (1.0 + sq);
      for (std::size_t k = 0; k < d; ++k) v.data[j * d + k] *= g;
    }
    if (iter + 1 == iterations) break;  // agreement update skipped at the end
    for (std::size_t i = 0; i < i_count; ++i)
      for (std::size_t j = 0; j < j_count; ++j) {
        const double* uh = &predictions.data[(i * j_count + j) * d];
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += uh[k] * v.data[j * d + k];
        logits.at(i, j) += dot;
      }
  }
  return {std::move(v), std::move(couplings)};
}

double margin_loss(const CapsuleOutputs& outputs, int true_label,
                   const MarginLossConfig& cfg) {
  const int n = static_cast<int>(outputs.norms.size());
  if (true_label < 0 || true_label >= n)
    throw Error(ErrorKind::LabelOutOfRange,
                "label " + std::to_string(true_label) + " of " +
                    std::to_string(n) + " capsules");
  double loss = 0.0;
  for (int c = 0; c < n; ++c) {
    const double norm = outputs.norms[c];
    if (c == true_label) {
      const double d = std::max(0.0, cfg.m_plus - norm);
      loss += d * d;
    } else {
      const double d = std::max(0.0, norm - cfg.m_minus);
      loss += cfg.lambda * d * d;
    }
  }
  return loss;
}

std::vector<double> reconstruct(const std::vector<double>& lang_vector,
                                const ModelParams& params) {
  auto affine = [](const std::vector<double>& x, const Tensor& w,
                   const Tensor& b) {
    const std::size_t out = w.shape[0], in = w.shape[1];
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b.data[o];
      const double* wr = &w.data[o * in];
      for (std::size_t i = 0; i < in; ++i) s += wr[i] * x[i];
      y[o] = s;
    }
    return y;
  };
  if (lang_vector.size() != params.dec1_w.shape[1])
    throw Error(ErrorKind::ShapeMismatch, "reconstruct: capsule dim mismatch");
  auto h1 = affine(lang_vector, params.dec1_w, params.dec1_b);
  for (double& v : h1) v = std::max(0.0, v);
  auto h2 = affine(h1, params.dec2_w, params.dec2_b);
  for (double& v : h2) v = std::max(0.0, v);
  auto out = affine(h2, params.dec3_w, params.dec3_b);
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return out;
}

CapsNetGraph::CapsNetGraph(ModelParams& params,
                           const MarginLossConfig& margin_cfg)
    : params_(params), margin_cfg_(margin_cfg) {
  const ModelConfig& cfg = params.config;
  cfg.validate();
  const auto rows = static_cast<std::size_t>(cfg.input_rows);
  const auto cols = static_cast<std::size_t>(cfg.input_cols);
  const auto caps = static_cast<std::size_t>(cfg.primary_capsules());
  const auto lang = static_cast<std::size_t>(cfg.lang_caps);

  input_ = tape_.input(Tensor({rows, cols, 1}));

  auto named = params.named_tensors();
  param_nodes_.reserve(named.size());
  std::vector<NodeId> pn;
  for (auto& [name, tensor] : named) {
    (void)name;
    pn.push_back(tape_.parameter(tensor));
  }
  param_nodes_ = pn;
  const NodeId conv1_w = pn[0], conv1_b = pn[1], primary_w = pn[2],
               primary_b = pn[3], mid_w = pn[4], lang_w = pn[5], dec1_w = pn[6],
               dec1_b = pn[7], dec2_w = pn[8], dec2_b = pn[9], dec3_w = pn[10],
               dec3_b = pn[11];

  // Encoder
  NodeId x = tape_.relu(
      tape_.channel_bias(tape_.conv2d_valid(input_, conv1_w, 1), conv1_b));
  x = tape_.channel_bias(tape_.conv2d_valid(x, primary_w, 2), primary_b);
  x = tape_.reshape(x, {caps, static_cast<std::size_t>(cfg.primary_dim)});
  NodeId u = tape_.squash_rows(x);

  NodeId uhat_mid = tape_.caps_transform(u, mid_w);
  NodeId mid = build_routing(uhat_mid, caps,
                             static_cast<std::size_t>(cfg.mid_caps),
                             cfg.routing_iterations);
  NodeId uhat_lang = tape_.caps_transform(mid, lang_w);
  lang_v_ = build_routing(uhat_lang, static_cast<std::size_t>(cfg.mid_caps),
                          lang, cfg.routing_iterations);
  norms_ = tape_.rows_l2norm(lang_v_);

  // Margin loss: T_c hinge on the true capsule, lambda-weighted hinge on the
  // rest. The weight vectors are rebound per example in set_example().
  std::vector<double> w_true(lang, 0.0);
  w_true[0] = 1.0;
  std::vector<double> w_other(lang, margin_cfg_.lambda);
  w_other[0] = 0.0;
  NodeId present = tape_.relu(tape_.axpb(norms_, -1.0, margin_cfg_.m_plus));
  margin_true_ = tape_.weighted_sum(tape_.mul(present, present), w_true);
  NodeId absent = tape_.relu(tape_.axpb(norms_, 1.0, -margin_cfg_.m_minus));
  margin_other_ = tape_.weighted_sum(tape_.mul(absent, absent), w_other);
  margin_ = tape_.add(margin_true_, margin_other_);

  // Reconstruction from the true-label capsule
  recon_select_ = tape_.row_select(lang_v_, 0);
  NodeId h = tape_.relu(tape_.fully_connected(recon_select_, dec1_w, dec1_b));
  h = tape_.relu(tape_.fully_connected(h, dec2_w, dec2_b));
  recon_out_ = tape_.sigmoid(tape_.fully_connected(h, dec3_w, dec3_b));

  NodeId flat_in = tape_.reshape(input_, {rows * cols});
  NodeId diff = tape_.sub(recon_out_, flat_in);
  NodeId sse = tape_.sum(tape_.mul(diff, diff));
  total_ = tape_.add(margin_, tape_.axpb(sse, margin_cfg_.recon_weight, 0.0));
}

NodeId CapsNetGraph::build_routing(NodeId predictions, std::size_t children,
                                   std::size_t parents, int iterations) {
  NodeId logits = tape_.input(Tensor({children, parents}));
  NodeId v = 0;
  for (int iter = 0; iter < iterations; ++iter) {
    NodeId couplings = tape_.softmax_rows(logits);
    v = tape_.squash_rows(tape_.coupling_sum(couplings, predictions));
    if (iter + 1 < iterations)
      logits = tape_.add(logits, tape_.agreement(predictions, v));
  }
  return v;
}

void CapsNetGraph::set_example(const ModelInput& input, int label) {
  const ModelConfig& cfg = params_.config;
  if (static_cast<int>(ModelInput::kRows) != cfg.input_rows ||
      static_cast<int>(ModelInput::kCols) != cfg.input_cols)
    throw Error(ErrorKind::ShapeMismatch, "model input size mismatch");
  Tensor t({static_cast<std::size_t>(cfg.input_rows),
            static_cast<std::size_t>(cfg.input_cols), 1},
           input.pixels);
  tape_.set_value(input_, t);
  if (label >= 0) {
    if (label >= cfg.lang_caps)
      throw Error(ErrorKind::LabelOutOfRange,
                  "label " + std::to_string(label) + " of " +
                      std::to_string(cfg.lang_caps) + " capsules");
    const auto lang = static_cast<std::size_t>(cfg.lang_caps);
    std::vector<double> w_true(lang, 0.0);
    w_true[static_cast<std::size_t>(label)] = 1.0;
    std::vector<double> w_other(lang, margin_cfg_.lambda);
    w_other[static_cast<std::size_t>(label)] = 0.0;
    tape_.set_weights(margin_true_, std::move(w_true));
    tape_.set_weights(margin_other_, std::move(w_other));
    tape_.set_row_select(recon_select_, static_cast<std::size_t>(label));
  }
}

double CapsNetGraph::forward_total_loss() {
  tape_.forward();
  return tape_.value(total_)[0];
}

void CapsNetGraph::forward_norms_only() { tape_.forward_until(norms_); }

void CapsNetGraph::backward() { tape_.backprop(total_); }

void CapsNetGraph::zero_param_grads() { tape_.zero_param_grads(); }

CapsuleOutputs CapsNetGraph::outputs() const {
  CapsuleOutputs out;
  out.lang_vectors = tape_.value(lang_v_);
  out.norms = tape_.value(norms_).data;
  return out;
}

std::vector<double> CapsNetGraph::reconstruction() const {
  return tape_.value(recon_out_).data;
}

CapsuleOutputs forward(const ModelInput& input, ModelParams& params) {
  CapsNetGraph graph(params);
  graph.set_example(input, -1);
  graph.forward_norms_only();
  return graph.outputs();
}

double total_loss(const ModelInput& input, const CapsuleOutputs& outputs,
                  int true_label, const ModelParams& params,
                  const MarginLossConfig& cfg) {
  const double margin = margin_loss(outputs, true_label, cfg);
  const std::size_t d = outputs.lang_vectors.shape[1];
  std::vector<double> v(outputs.lang_vectors.data.begin() + true_label * d,
                        outputs.lang_vectors.data.begin() + (true_label + 1) * d);
  const auto recon = reconstruct(v, params);
  double sse = 0.0;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    const double e = recon[i] - input.pixels[i];
    sse += e * e;
  }
  return margin + cfg.recon_weight * sse;
}

}  // namespace capslid
