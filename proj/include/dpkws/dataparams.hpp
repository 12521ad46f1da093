/*
 * dataparams.hpp
 *
 * Class- and instance-level data parameters: learnable temperatures that
 * divide a frame's logits before the softmax. The effective temperature of a
 * frame is the sum of the parameter of its target class and the parameter of
 * the utterance it belongs to. Both families are optimised in log space with
 * plain SGD and clamped to fixed ranges after every step.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "common.hpp"

namespace dpkws {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ClipRange {
  double min;
  double max;
};

inline constexpr ClipRange kClassClip{0.05, 20.0};
inline constexpr ClipRange kInstanceClip{0.0001, 20.0};

struct DataParameterConfig {
  bool class_enabled = false;
  bool instance_enabled = false;
  double class_init = 1.0;
  double instance_init = 1.0;
  double class_lr = 0.001;
  double instance_lr = 0.001;
  /// Multiplies the (log sigma*)^2 penalty accrued per frame.
  double weight_decay = 0.0;
  /// Heavy-ball momentum for the SGD step; 0 gives plain SGD.
  double momentum = 0.0;
  ClipRange class_clip = kClassClip;
  ClipRange instance_clip = kInstanceClip;
};

class DataParameterStore {
 public:
  DataParameterStore() = default;

  DataParameterStore(std::size_t num_classes, std::size_t num_instances, const DataParameterConfig& config)
      : config_(config),
        class_sigma_(num_classes, clamp(config.class_init, config.class_clip)),
        instance_sigma_(num_instances, clamp(config.instance_init, config.instance_clip)),
        class_velocity_(num_classes, 0.0),
        instance_velocity_(num_instances, 0.0) {
    if (!(config.class_clip.min > 0.0 && config.class_clip.min <= config.class_clip.max))
      throw ConfigError("class clip range must satisfy 0 < min <= max");
    if (!(config.instance_clip.min > 0.0 && config.instance_clip.min <= config.instance_clip.max))
      throw ConfigError("instance clip range must satisfy 0 < min <= max");
  }

  const DataParameterConfig& config() const { return config_; }
  bool class_enabled() const { return config_.class_enabled; }
  bool instance_enabled() const { return config_.instance_enabled; }
  bool any_enabled() const { return config_.class_enabled || config_.instance_enabled; }
  std::size_t num_classes() const { return class_sigma_.size(); }
  std::size_t num_instances() const { return instance_sigma_.size(); }

  double class_sigma(std::size_t k) const { return class_sigma_.at(k); }
  double instance_sigma(std::size_t i) const { return instance_sigma_.at(i); }
  double log_class_sigma(std::size_t k) const { return std::log(class_sigma(k)); }
  double log_instance_sigma(std::size_t i) const { return std::log(instance_sigma(i)); }

  /// Value-domain sigma, clamped into the family's range.
  void set_class_sigma(std::size_t k, double v) { class_sigma_.at(k) = clamp(v, config_.class_clip); }
  void set_instance_sigma(std::size_t i, double v) { instance_sigma_.at(i) = clamp(v, config_.instance_clip); }

  /// sigma* of a frame with target `class_id` inside utterance `instance_id`.
  double effective_sigma(std::size_t class_id, std::size_t instance_id) const {
    if (class_id >= class_sigma_.size())
      throw std::out_of_range(detail::concat("class id ", class_id, " out of range [0, ", class_sigma_.size(), ")"));
    if (config_.instance_enabled && instance_id >= instance_sigma_.size())
      throw std::out_of_range(
          detail::concat("instance id ", instance_id, " out of range [0, ", instance_sigma_.size(), ")"));
    if (!any_enabled()) return 1.0;
    double s = 0.0;
    if (config_.class_enabled) s += class_sigma_[class_id];
    if (config_.instance_enabled) s += instance_sigma_[instance_id];
    return s;
  }

  /// Number of entries whose update was skipped because of a non-finite gradient.
  std::size_t skipped_updates() const { return skipped_; }

 private:
  friend struct DataParameterUpdater;

  static double clamp(double v, ClipRange r) { return std::clamp(v, r.min, r.max); }

  DataParameterConfig config_;
  std::vector<double> class_sigma_;
  std::vector<double> instance_sigma_;
  std::vector<double> class_velocity_;
  std::vector<double> instance_velocity_;
  std::size_t skipped_ = 0;
};

namespace detail {

/// p <- softmax(z / sigma). Returns log-sum-exp of (z/sigma - max).
inline double softmax_into(std::span<const double> z, double sigma, std::span<double> p, double& max_scaled) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v / sigma);
  double s = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    p[j] = std::exp(z[j] / sigma - m);
    s += p[j];
  }
  for (double& v : p) v /= s;
  max_scaled = m;
  return std::log(s);
}

inline void check_frame(std::span<const double> z, double sigma) {
  if (z.size() < 2) fail("scaled softmax needs at least 2 classes, got ", z.size());
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("sigma* must be positive and finite, got ", sigma);
  for (std::size_t j = 0; j < z.size(); ++j)
    if (!std::isfinite(z[j])) fail("non-finite logit at index ", j);
}

/// d(-log p_y)/d sigma from an already computed softmax. Uses the non-target
/// mass sum_{j!=y} p_j directly rather than 1 - p_y, so the gradient stays
/// accurate when the target dominates.
inline double sigma_grad_from_probs(std::span<const double> z, std::span<const double> p, std::size_t y,
                                    double sigma, bool& saturated) {
  double mass = 0.0;
  double acc = 0.0;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (j == y) continue;
    mass += p[j];
    acc += p[j] * (z[y] - z[j]);
  }
  saturated = !(mass > 0.0);
  if (saturated) return 0.0;
  return acc / (sigma * sigma);
}

}  // namespace detail

/// Softmax of logits / sigma_star.
inline std::vector<double> scaled_softmax(std::span<const double> logits, double sigma_star) {
  detail::check_frame(logits, sigma_star);
  std::vector<double> p(logits.size());
  double m;
  detail::softmax_into(logits, sigma_star, p, m);
  return p;
}

struct SigmaGradient {
  double value = 0.0;
  /// True when the non-target probability mass underflowed to zero.
  bool saturated = false;
};

/// Gradient of the per-frame cross entropy -log p_y with respect to sigma*.
/// Equals ((1 - p_y) / sigma^2) * (z_y - E_q[z]) where q is the softmax
/// restricted to the non-target classes.
inline SigmaGradient sigma_gradient(std::span<const double> logits, std::size_t target, double sigma_star) {
  detail::check_frame(logits, sigma_star);
  if (target >= logits.size()) fail("target ", target, " out of range for ", logits.size(), " classes");
  std::vector<double> p(logits.size());
  double m;
  detail::softmax_into(logits, sigma_star, p, m);
  SigmaGradient g;
  g.value = detail::sigma_grad_from_probs(logits, p, target, sigma_star, g.saturated);
  return g;
}

/// Non-target distribution q_j = p_j / (1 - p_y), with q_y = 0. Computed as a
/// softmax over the non-target logits alone, which stays accurate when p_y is
/// close to 1.
inline std::vector<double> q_distribution(std::span<const double> logits, std::size_t target, double sigma_star) {
  detail::check_frame(logits, sigma_star);
  if (target >= logits.size()) fail("target ", target, " out of range for ", logits.size(), " classes");
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != target) m = std::max(m, logits[j] / sigma_star);
  std::vector<double> q(logits.size(), 0.0);
  double s = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != target) s += q[j] = std::exp(logits[j] / sigma_star - m);
  for (double& v : q) v /= s;
  return q;
}

struct ScaledLossResult {
  /// Mean per-frame cross entropy over the batch.
  double loss = 0.0;
  /// frames x K, already divided by the frame count.
  Matrix logit_grads;
  /// d loss / d sigma*_f, already divided by the frame count.
  Vector sigma_star_grads;
  Vector per_frame_sigma_star;
  std::size_t saturated_frames = 0;
};

/// Frame-mean cross entropy of softmax(z_f / sigma*_f) against the targets,
/// with gradients for the logits and for every frame's sigma*.
/// Rows of `logits` are frames.
inline ScaledLossResult dp_cross_entropy(const Matrix& logits, std::span<const int> targets,
                                         std::span<const double> sigma_stars) {
  const auto n = static_cast<std::size_t>(logits.rows());
  const auto k = static_cast<std::size_t>(logits.cols());
  if (n == 0) fail("dp_cross_entropy: empty batch");
  if (targets.size() != n) fail("dp_cross_entropy: ", targets.size(), " targets for ", n, " frames");
  if (sigma_stars.size() != n) fail("dp_cross_entropy: ", sigma_stars.size(), " sigmas for ", n, " frames");

  ScaledLossResult r;
  r.logit_grads.resize(logits.rows(), logits.cols());
  r.sigma_star_grads.resize(logits.rows());
  r.per_frame_sigma_star.resize(logits.rows());
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> z(k), p(k);
  double total = 0.0;
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t j = 0; j < k; ++j) z[j] = logits(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(j));
    const double sigma = sigma_stars[f];
    detail::check_frame(z, sigma);
    const int y = targets[f];
    if (y < 0 || static_cast<std::size_t>(y) >= k) fail("frame ", f, ": target ", y, " out of range");
    double m;
    const double log_s = detail::softmax_into(z, sigma, p, m);
    total += log_s - (z[static_cast<std::size_t>(y)] / sigma - m);
    for (std::size_t j = 0; j < k; ++j) {
      const double delta = j == static_cast<std::size_t>(y) ? 1.0 : 0.0;
      r.logit_grads(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(j)) = (p[j] - delta) / sigma * inv_n;
    }
    bool saturated;
    const double g = detail::sigma_grad_from_probs(z, p, static_cast<std::size_t>(y), sigma, saturated);
    if (saturated) ++r.saturated_frames;
    r.sigma_star_grads[static_cast<Eigen::Index>(f)] = g * inv_n;
    r.per_frame_sigma_star[static_cast<Eigen::Index>(f)] = sigma;
  }
  r.loss = total * inv_n;
  return r;
}

/// Unscaled frame-mean softmax cross entropy; the sigma* = 1 special case,
/// used by baseline training and for cross-validation loss.
struct CrossEntropyResult {
  double loss = 0.0;
  Matrix logit_grads;
};

inline CrossEntropyResult cross_entropy(const Matrix& logits, std::span<const int> targets, bool with_grads = true) {
  const auto n = static_cast<std::size_t>(logits.rows());
  const auto k = static_cast<std::size_t>(logits.cols());
  if (n == 0) fail("cross_entropy: empty batch");
  if (targets.size() != n) fail("cross_entropy: ", targets.size(), " targets for ", n, " frames");
  CrossEntropyResult r;
  if (with_grads) r.logit_grads.resize(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> z(k), p(k);
  double total = 0.0;
  for (std::size_t f = 0; f < n; ++f) {
    for (std::size_t j = 0; j < k; ++j) z[j] = logits(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(j));
    const int y = targets[f];
    if (y < 0 || static_cast<std::size_t>(y) >= k) fail("frame ", f, ": target ", y, " out of range");
    double m;
    const double log_s = detail::softmax_into(z, 1.0, p, m);
    total += log_s - (z[static_cast<std::size_t>(y)] - m);
    if (with_grads)
      for (std::size_t j = 0; j < k; ++j) {
        const double delta = j == static_cast<std::size_t>(y) ? 1.0 : 0.0;
        r.logit_grads(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(j)) = (p[j] - delta) * inv_n;
      }
  }
  if (!std::isfinite(total)) fail("cross_entropy: non-finite loss");
  r.loss = total * inv_n;
  return r;
}

/// Gradients of the batch objective with respect to the log-domain parameters.
struct DataParameterGradients {
  std::vector<double> log_class;
  std::vector<double> log_instance;
  std::vector<std::uint32_t> class_hits;
  std::vector<std::uint32_t> instance_hits;
};

/// Chain rule from per-frame sigma* gradients to log sigma_class / log sigma_inst.
/// The penalty weight_decay * (log sigma*_f)^2 is accrued once per frame and
/// enters the same frame-mean as the loss, so it is divided by the frame count.
inline DataParameterGradients data_parameter_gradients(const DataParameterStore& store,
                                                       std::span<const int> targets,
                                                       std::span<const std::size_t> instances,
                                                       const ScaledLossResult& loss) {
  const std::size_t n = targets.size();
  if (instances.size() != n || static_cast<std::size_t>(loss.sigma_star_grads.size()) != n)
    fail("data_parameter_gradients: inconsistent frame counts");
  DataParameterGradients g;
  g.log_class.assign(store.num_classes(), 0.0);
  g.log_instance.assign(store.num_instances(), 0.0);
  g.class_hits.assign(store.num_classes(), 0);
  g.instance_hits.assign(store.num_instances(), 0);
  if (!store.any_enabled() || n == 0) return g;

  const double wd = store.config().weight_decay;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t f = 0; f < n; ++f) {
    const auto k = static_cast<std::size_t>(targets[f]);
    const std::size_t i = instances[f];
    const double sigma = loss.per_frame_sigma_star[static_cast<Eigen::Index>(f)];
    double d_sigma = loss.sigma_star_grads[static_cast<Eigen::Index>(f)];
    if (wd != 0.0) d_sigma += inv_n * wd * 2.0 * std::log(sigma) / sigma;
    if (store.class_enabled()) {
      g.log_class.at(k) += store.class_sigma(k) * d_sigma;
      ++g.class_hits[k];
    }
    if (store.instance_enabled()) {
      g.log_instance.at(i) += store.instance_sigma(i) * d_sigma;
      ++g.instance_hits[i];
    }
  }
  return g;
}

struct DataParameterUpdater {
  static void apply(DataParameterStore& s, const DataParameterGradients& g) {
    const auto& c = s.config_;
    if (c.class_enabled)
      step(s, s.class_sigma_, s.class_velocity_, g.log_class, g.class_hits, c.class_lr, c.class_clip);
    if (c.instance_enabled)
      step(s, s.instance_sigma_, s.instance_velocity_, g.log_instance, g.instance_hits, c.instance_lr,
           c.instance_clip);
  }

 private:
  static void step(DataParameterStore& s, std::vector<double>& sigma, std::vector<double>& velocity,
                   const std::vector<double>& grad, const std::vector<std::uint32_t>& hits, double lr,
                   ClipRange clip) {
    if (grad.size() != sigma.size() || hits.size() != sigma.size())
      fail("update_data_parameters: gradient length ", grad.size(), " does not match ", sigma.size(), " parameters");
    const double mu = s.config_.momentum;
    for (std::size_t e = 0; e < sigma.size(); ++e) {
      if (hits[e] == 0) continue;  // sparse: only entries seen in the batch move
      if (!std::isfinite(grad[e])) {
        ++s.skipped_;
        continue;
      }
      double direction = grad[e];
      if (mu != 0.0) {
        velocity[e] = mu * velocity[e] + grad[e];
        direction = velocity[e];
      }
      const double delta = lr * direction;
      if (delta == 0.0) continue;
      const double log_next = std::log(sigma[e]) - delta;
      sigma[e] = std::clamp(std::exp(log_next), clip.min, clip.max);
    }
  }
};

/// One SGD step in log space followed by projection onto the clip ranges.
/// Learning rates come from the store's config and never decay.
inline void update_data_parameters(DataParameterStore& store, const DataParameterGradients& grads) {
  DataParameterUpdater::apply(store, grads);
}

// ---------------------------------------------------------------------------
// Sigma snapshots: CSV rows (epoch, kind, id, sigma_value).

struct SigmaSnapshotRow {
  int epoch = 0;
  std::string kind;  // "class" or "instance"
  std::int64_t id = 0;
  double sigma = 0.0;
};

/// Writes the enabled families. `instance_ids[i]` is the utterance id owning
/// instance parameter i.
inline void write_sigma_snapshot(std::ostream& os, int epoch, const DataParameterStore& store,
                                 std::span<const std::int64_t> instance_ids, bool header = true) {
  if (header) os << "epoch,kind,id,sigma_value\n";
  os << std::setprecision(17);
  if (store.class_enabled())
    for (std::size_t k = 0; k < store.num_classes(); ++k)
      os << epoch << ",class," << k << ',' << store.class_sigma(k) << '\n';
  if (store.instance_enabled()) {
    if (instance_ids.size() != store.num_instances()) fail("write_sigma_snapshot: instance id map size mismatch");
    for (std::size_t i = 0; i < store.num_instances(); ++i)
      os << epoch << ",instance," << instance_ids[i] << ',' << store.instance_sigma(i) << '\n';
  }
}

inline std::vector<SigmaSnapshotRow> read_sigma_snapshot(std::istream& is) {
  std::vector<SigmaSnapshotRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line.rfind("epoch,", 0) == 0) continue;
    SigmaSnapshotRow r;
    std::size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
    if (a == std::string::npos || b == std::string::npos || c == std::string::npos)
      fail("sigma snapshot line ", lineno, ": expected 4 columns");
    try {
      r.epoch = std::stoi(line.substr(0, a));
      r.kind = line.substr(a + 1, b - a - 1);
      r.id = std::stoll(line.substr(b + 1, c - b - 1));
      r.sigma = std::stod(line.substr(c + 1));
    } catch (const std::exception&) {
      fail("sigma snapshot line ", lineno, ": malformed value");
    }
    if (r.kind != "class" && r.kind != "instance") fail("sigma snapshot line ", lineno, ": unknown kind '", r.kind, "'");
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace dpkws
