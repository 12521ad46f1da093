/*
 * netcore.hpp
 *
 * Feed-forward acoustic model with hand-written forward and backward passes:
 * hidden blocks of (linear -> batch norm -> sigmoid) followed by a linear
 * projection to logits. Rows of every activation matrix are frames.
 */
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "common.hpp"
#include "dataparams.hpp"

namespace dpkws {

struct ModelShape {
  int input_dim = 247;
  int hidden_width = 64;
  int hidden_layers = 5;
  int num_classes = 20;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct BatchNormConfig {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

/// One affine layer. `gain`/`shift` are the batch-norm affine terms and are
/// empty on the output projection. Weight is (fan_in x fan_out).
struct Layer {
  Matrix weight;
  Vector bias;
  Vector gain;
  Vector shift;
};

/// Trainable tensors in declared order: hidden blocks, then the output layer.
/// Also used as the container for gradients and optimiser moments.
struct ParameterSet {
  std::vector<Layer> layers;
};

struct AcousticModel {
  ModelShape shape;
  ParameterSet params;
  std::vector<Vector> running_mean;
  std::vector<Vector> running_var;
  BatchNormConfig batch_norm;
  /// Bumped on every parameter update; caches remember the version they saw.
  std::uint64_t version = 0;
};

enum class Mode { training, inference };

inline ParameterSet zeros_like(const ParameterSet& p) {
  ParameterSet z;
  z.layers.reserve(p.layers.size());
  for (const Layer& l : p.layers)
    z.layers.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size()),
                        Vector::Zero(l.gain.size()), Vector::Zero(l.shift.size())});
  return z;
}

/// Views of every trainable tensor in declared order (weight, bias, gain, shift per layer).
inline std::vector<std::span<double>> parameter_spans(ParameterSet& p) {
  std::vector<std::span<double>> out;
  for (Layer& l : p.layers) {
    out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    if (l.gain.size() > 0) out.emplace_back(l.gain.data(), static_cast<std::size_t>(l.gain.size()));
    if (l.shift.size() > 0) out.emplace_back(l.shift.data(), static_cast<std::size_t>(l.shift.size()));
  }
  return out;
}

inline std::vector<std::span<const double>> parameter_spans(const ParameterSet& p) {
  std::vector<std::span<const double>> out;
  for (auto s : parameter_spans(const_cast<ParameterSet&>(p))) out.emplace_back(s.data(), s.size());
  return out;
}

inline std::size_t parameter_count(const ParameterSet& p) {
  std::size_t n = 0;
  for (auto s : parameter_spans(p)) n += s.size();
  return n;
}

inline bool all_finite(const ParameterSet& p) {
  for (auto s : parameter_spans(p))
    for (double v : s)
      if (!std::isfinite(v)) return false;
  return true;
}

inline void check_shape(const ModelShape& s) {
  if (s.input_dim <= 0 || s.hidden_width <= 0 || s.hidden_layers < 0 || s.num_classes < 2)
    throw ConfigError(detail::concat("invalid model shape: input ", s.input_dim, ", width ", s.hidden_width,
                                     ", layers ", s.hidden_layers, ", classes ", s.num_classes));
}

/// Model with every weight and bias zero and identity batch norm.
inline AcousticModel zero_model(const ModelShape& shape) {
  check_shape(shape);
  AcousticModel m;
  m.shape = shape;
  int fan_in = shape.input_dim;
  for (int b = 0; b < shape.hidden_layers; ++b) {
    m.params.layers.push_back({Matrix::Zero(fan_in, shape.hidden_width), Vector::Zero(shape.hidden_width),
                               Vector::Ones(shape.hidden_width), Vector::Zero(shape.hidden_width)});
    m.running_mean.push_back(Vector::Zero(shape.hidden_width));
    m.running_var.push_back(Vector::Ones(shape.hidden_width));
    fan_in = shape.hidden_width;
  }
  m.params.layers.push_back({Matrix::Zero(fan_in, shape.num_classes), Vector::Zero(shape.num_classes), {}, {}});
  return m;
}

/// Glorot-uniform weights, zero biases, identity batch norm.
inline AcousticModel make_model(const ModelShape& shape, Rng& rng) {
  AcousticModel m = zero_model(shape);
  for (Layer& l : m.params.layers) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.weight.rows() + l.weight.cols()));
    for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) l.weight(r, c) = uniform(rng, -limit, limit);
  }
  return m;
}

struct BlockCache {
  Matrix input;
  Matrix normalized;  // x-hat
  Vector inv_std;
  Vector batch_mean;
  Vector batch_var;  // biased
  Matrix activation;
};

struct ForwardCache {
  std::uint64_t model_version = 0;
  Mode mode = Mode::training;
  std::vector<BlockCache> blocks;
  Matrix final_input;
};

struct ForwardResult {
  Matrix logits;
  ForwardCache cache;
};

/// Pure forward pass. In training mode the batch statistics are used and
/// recorded in the cache; running statistics are not touched (see
/// update_running_stats).
inline ForwardResult forward(const AcousticModel& model, const Matrix& frames, Mode mode) {
  if (frames.rows() == 0) fail("forward: empty batch");
  if (frames.cols() != model.shape.input_dim)
    fail("forward: layer 0 expects width ", model.shape.input_dim, ", got ", frames.cols());
  const auto hidden = static_cast<std::size_t>(model.shape.hidden_layers);
  if (model.params.layers.size() != hidden + 1) fail("forward: model has ", model.params.layers.size(), " layers");

  ForwardResult r;
  r.cache.model_version = model.version;
  r.cache.mode = mode;
  r.cache.blocks.resize(hidden);
  const double n = static_cast<double>(frames.rows());
  const double eps = model.batch_norm.epsilon;

  Matrix x = frames;
  for (std::size_t b = 0; b < hidden; ++b) {
    const Layer& l = model.params.layers[b];
    if (l.weight.rows() != x.cols()) fail("forward: layer ", b, " expects width ", l.weight.rows(), ", got ", x.cols());
    BlockCache& c = r.cache.blocks[b];
    Matrix h = x * l.weight;
    h.rowwise() += l.bias.transpose();
    if (mode == Mode::training) {
      c.batch_mean = h.colwise().sum().transpose() / n;
      h.rowwise() -= c.batch_mean.transpose();
      c.batch_var = h.array().square().colwise().sum().transpose() / n;
    } else {
      c.batch_mean = model.running_mean[b];
      c.batch_var = model.running_var[b];
      h.rowwise() -= c.batch_mean.transpose();
    }
    c.inv_std = (c.batch_var.array() + eps).rsqrt().matrix();
    h = h * c.inv_std.asDiagonal();
    c.normalized = h;
    h = h * l.gain.asDiagonal();
    h.rowwise() += l.shift.transpose();
    c.activation = (1.0 + (-h.array()).exp()).inverse().matrix();
    c.input = std::move(x);
    x = c.activation;
  }
  const Layer& out = model.params.layers.back();
  if (out.weight.rows() != x.cols())
    fail("forward: output layer expects width ", out.weight.rows(), ", got ", x.cols());
  r.logits = x * out.weight;
  r.logits.rowwise() += out.bias.transpose();
  r.cache.final_input = std::move(x);
  return r;
}

/// Exponential moving average of the batch statistics recorded by a training forward.
inline void update_running_stats(AcousticModel& model, const ForwardCache& cache) {
  if (cache.mode != Mode::training) return;
  const double mom = model.batch_norm.momentum;
  for (std::size_t b = 0; b < cache.blocks.size(); ++b) {
    const BlockCache& c = cache.blocks[b];
    const double n = static_cast<double>(c.input.rows());
    const double unbias = n > 1 ? n / (n - 1.0) : 1.0;
    model.running_mean[b] = (1.0 - mom) * model.running_mean[b] + mom * c.batch_mean;
    model.running_var[b] = (1.0 - mom) * model.running_var[b] + mom * unbias * c.batch_var;
  }
}

struct Gradients {
  ParameterSet params;
  Matrix input;
};

/// Exact gradients of a scalar loss given d loss / d logits, including the
/// batch-statistics terms of batch norm.
inline Gradients backward(const AcousticModel& model, const ForwardCache& cache, const Matrix& logit_grads) {
  if (cache.model_version != model.version)
    fail("backward: stale cache (model version ", model.version, ", cache saw ", cache.model_version, ")");
  if (cache.mode != Mode::training) fail("backward: cache comes from an inference-mode forward");
  if (logit_grads.rows() != cache.final_input.rows() || logit_grads.cols() != model.shape.num_classes)
    fail("backward: logit gradient is ", logit_grads.rows(), "x", logit_grads.cols());

  Gradients g;
  g.params = zeros_like(model.params);
  const Layer& out = model.params.layers.back();
  Layer& gout = g.params.layers.back();
  gout.weight.noalias() = cache.final_input.transpose() * logit_grads;
  gout.bias = logit_grads.colwise().sum().transpose();
  Matrix d = logit_grads * out.weight.transpose();

  for (std::size_t b = cache.blocks.size(); b-- > 0;) {
    const BlockCache& c = cache.blocks[b];
    const Layer& l = model.params.layers[b];
    Layer& gl = g.params.layers[b];
    const double n = static_cast<double>(c.input.rows());
    // through the sigmoid
    d = (d.array() * c.activation.array() * (1.0 - c.activation.array())).matrix();
    gl.gain = (d.array() * c.normalized.array()).colwise().sum().transpose();
    gl.shift = d.colwise().sum().transpose();
    Matrix dxhat = d * l.gain.asDiagonal();
    // batch-norm with batch statistics
    const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum_dxhat_xhat = (dxhat.array() * c.normalized.array()).colwise().sum();
    Matrix dh = n * dxhat;
    dh.rowwise() -= sum_dxhat;
    dh -= c.normalized * sum_dxhat_xhat.asDiagonal();
    dh = dh * (c.inv_std / n).asDiagonal();
    gl.weight.noalias() = c.input.transpose() * dh;
    gl.bias = dh.colwise().sum().transpose();
    d = dh * l.weight.transpose();
  }
  g.input = std::move(d);
  return g;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  ParameterSet first;
  ParameterSet second;
  std::int64_t step = 0;
};

inline AdamState make_adam_state(const AcousticModel& model) {
  return {zeros_like(model.params), zeros_like(model.params), 0};
}

/// Bias-corrected Adam update of every trainable tensor.
inline void adam_step(AcousticModel& model, const ParameterSet& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  auto params = parameter_spans(model.params);
  auto g = parameter_spans(grads);
  auto m = parameter_spans(state.first);
  auto v = parameter_spans(state.second);
  if (g.size() != params.size() || m.size() != params.size() || v.size() != params.size())
    fail("adam_step: state has ", m.size(), " tensors, model has ", params.size());
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (g[t].size() != params[t].size()) fail("adam_step: gradient tensor ", t, " has wrong size");
    for (std::size_t e = 0; e < params[t].size(); ++e) {
      const double gi = g[t][e];
      m[t][e] = cfg.beta1 * m[t][e] + (1.0 - cfg.beta1) * gi;
      v[t][e] = cfg.beta2 * v[t][e] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[t][e] / c1;
      const double vhat = v[t][e] / c2;
      params[t][e] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
  ++model.version;
}

/// Row-wise plain softmax of inference logits.
inline Matrix posteriors(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      p(r, j) = std::exp(logits(r, j) - m);
      s += p(r, j);
    }
    p.row(r) /= s;
  }
  return p;
}

}  // namespace dpkws
