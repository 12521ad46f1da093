/*
 * trainer.hpp
 *
 * Joint optimisation of the acoustic model (Adam, plateau decay, early
 * stopping) and the data parameters (log-space SGD, constant learning rate).
 * Minibatches group whole utterances; their frames are flattened into one
 * batch and the loss is the frame mean.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "dataparams.hpp"
#include "json.hpp"
#include "netcore.hpp"

namespace dpkws {

enum class TrainMode { baseline, class_only, instance_only, joint };
enum class DataCondition { clean, noisy };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::baseline: return "baseline";
    case TrainMode::class_only: return "class";
    case TrainMode::instance_only: return "instance";
    case TrainMode::joint: return "joint";
  }
  return "?";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "class") return TrainMode::class_only;
  if (s == "instance") return TrainMode::instance_only;
  if (s == "joint") return TrainMode::joint;
  throw ConfigError(detail::concat("unknown training mode '", s, "' (baseline|class|instance|joint)"));
}

inline std::string to_string(DataCondition d) { return d == DataCondition::clean ? "clean" : "noisy"; }

inline DataCondition data_condition_from_string(const std::string& s) {
  if (s == "clean") return DataCondition::clean;
  if (s == "noisy") return DataCondition::noisy;
  throw ConfigError(detail::concat("unknown data condition '", s, "' (clean|noisy)"));
}

/// Data-parameter learning rates, initial values and weight decay for each
/// (training data, mode) pair.
inline DataParameterConfig table1_defaults(TrainMode mode, DataCondition data) {
  DataParameterConfig c;
  c.class_enabled = mode == TrainMode::class_only || mode == TrainMode::joint;
  c.instance_enabled = mode == TrainMode::instance_only || mode == TrainMode::joint;
  c.class_lr = 0.001;
  c.class_init = 1.0;
  c.weight_decay = 0.01;
  const bool clean = data == DataCondition::clean;
  switch (mode) {
    case TrainMode::baseline:
    case TrainMode::class_only:
      break;
    case TrainMode::instance_only:
      c.instance_lr = clean ? 0.001 : 0.01;
      c.instance_init = 1.0;
      c.weight_decay = clean ? 0.01 : 0.1;
      break;
    case TrainMode::joint:
      c.instance_lr = clean ? 0.1 : 1.0;
      c.instance_init = clean ? 0.01 : 0.1;
      break;
  }
  return c;
}

struct TrainConfig {
  TrainMode mode = TrainMode::baseline;
  /// Enabled flags are overwritten from `mode` by validate_and_sync.
  DataParameterConfig data_params;
  double model_lr = 0.01;
  AdamConfig adam;
  double plateau_factor = 0.5;
  int plateau_patience = 2;
  int early_stop_patience = 9;
  int batch_utterances = 256;
  int max_epochs = 50;
  std::uint64_t seed = 1;
  ModelShape shape;
  BatchNormConfig batch_norm;
};

inline TrainConfig default_train_config(TrainMode mode, DataCondition data) {
  TrainConfig c;
  c.mode = mode;
  c.data_params = table1_defaults(mode, data);
  return c;
}

inline void validate_and_sync(TrainConfig& c) {
  c.data_params.class_enabled = c.mode == TrainMode::class_only || c.mode == TrainMode::joint;
  c.data_params.instance_enabled = c.mode == TrainMode::instance_only || c.mode == TrainMode::joint;
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0)) throw ConfigError(detail::concat(what, " must be positive, got ", v));
  };
  positive(c.model_lr, "model learning rate");
  if (c.data_params.class_enabled) {
    positive(c.data_params.class_lr, "class learning rate");
    positive(c.data_params.class_init, "class init");
  }
  if (c.data_params.instance_enabled) {
    positive(c.data_params.instance_lr, "instance learning rate");
    positive(c.data_params.instance_init, "instance init");
  }
  if (c.mode == TrainMode::joint) {
    const double s = c.data_params.class_init + c.data_params.instance_init;
    if (s < 0.9 || s > 1.1)
      throw ConfigError(detail::concat("joint mode: class init + instance init = ", s, " is outside [0.9, 1.1]"));
  }
  if (c.data_params.weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (c.batch_utterances <= 0 || c.max_epochs <= 0 || c.plateau_patience <= 0 || c.early_stop_patience <= 0)
    throw ConfigError("batch size, epoch count and patiences must be positive");
  if (!(c.plateau_factor > 0.0 && c.plateau_factor <= 1.0)) throw ConfigError("plateau factor must be in (0, 1]");
  check_shape(c.shape);
}

struct TrainingUtterance {
  std::int64_t id = 0;
  Matrix features;  // frames x input_dim
  std::vector<int> labels;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double cv_loss = 0.0;
  double model_lr = 0.0;
  bool stopped_early = false;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"cv_loss", e.cv_loss},
          {"model_lr", e.model_lr},
          {"stopped_early", e.stopped_early}};
}

class TrainingFault : public Error {
 public:
  using Error::Error;
};

struct TrainCallbacks {
  /// Called with epoch 0 before training and after every epoch; `ids[i]` is
  /// the utterance id owning instance parameter i.
  std::function<void(int, const DataParameterStore&, std::span<const std::int64_t>)> on_sigma_snapshot;
  std::function<void(const EpochLog&)> on_epoch;
  /// Indices into the training set forming each minibatch, in application order.
  std::function<void(int, std::span<const std::size_t>)> on_batch;
};

/// Model learning-rate schedule: multiply by `factor` after `patience`
/// consecutive epochs without a strictly lower cv loss; stop after
/// `stop_patience` such epochs.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double factor, int patience, int stop_patience)
      : lr_(lr), factor_(factor), patience_(patience), stop_patience_(stop_patience) {}

  double lr() const { return lr_; }
  double best() const { return best_; }
  bool should_stop() const { return since_best_ >= stop_patience_; }

  /// Records one epoch's cv loss; returns true when it is a new best.
  bool observe(double cv) {
    if (cv < best_) {
      best_ = cv;
      since_best_ = 0;
      since_decay_ = 0;
      return true;
    }
    ++since_best_;
    if (++since_decay_ >= patience_) {
      lr_ *= factor_;
      since_decay_ = 0;
    }
    return false;
  }

 private:
  double lr_;
  double factor_;
  int patience_;
  int stop_patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
  int since_decay_ = 0;
};

struct TrainResult {
  /// Parameters at the epoch with the lowest cv loss.
  AcousticModel model;
  AcousticModel final_model;
  DataParameterStore data_parameters;
  std::vector<std::int64_t> instance_ids;
  std::vector<EpochLog> log;
  std::size_t saturated_frames = 0;
};

namespace detail {

inline void stack_frames(std::span<const TrainingUtterance> utts, std::span<const std::size_t> which, Matrix& x,
                         std::vector<int>& targets, std::vector<std::size_t>& instances) {
  Eigen::Index rows = 0;
  for (auto i : which) rows += utts[i].features.rows();
  const Eigen::Index cols = utts[which[0]].features.cols();
  x.resize(rows, cols);
  targets.clear();
  instances.clear();
  Eigen::Index r = 0;
  for (auto i : which) {
    const auto& u = utts[i];
    if (static_cast<std::size_t>(u.features.rows()) != u.labels.size())
      fail("utterance ", u.id, ": ", u.features.rows(), " feature frames but ", u.labels.size(), " labels");
    if (u.features.cols() != cols) fail("utterance ", u.id, ": feature width ", u.features.cols(), " != ", cols);
    x.middleRows(r, u.features.rows()) = u.features;
    r += u.features.rows();
    targets.insert(targets.end(), u.labels.begin(), u.labels.end());
    instances.insert(instances.end(), u.labels.size(), i);
  }
}

}  // namespace detail

/// Mean per-frame unscaled cross entropy with inference-mode batch norm.
inline double cv_loss(const AcousticModel& model, std::span<const TrainingUtterance> cv) {
  if (cv.empty()) fail("cv_loss: empty cross-validation split");
  std::vector<std::size_t> all(cv.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Matrix x;
  std::vector<int> targets;
  std::vector<std::size_t> inst;
  detail::stack_frames(cv, all, x, targets, inst);
  const auto fr = forward(model, x, Mode::inference);
  return cross_entropy(fr.logits, targets, false).loss;
}

inline TrainResult train(TrainConfig config, std::span<const TrainingUtterance> train_set,
                         std::span<const TrainingUtterance> cv_set, const TrainCallbacks& callbacks = {},
                         const AcousticModel* initial_model = nullptr) {
  validate_and_sync(config);
  if (train_set.empty()) fail("train: empty training split");
  if (cv_set.empty()) fail("train: empty cross-validation split");
  for (const auto& u : train_set)
    for (int l : u.labels)
      if (l < 0 || l >= config.shape.num_classes)
        fail("utterance ", u.id, ": label ", l, " outside [0, ", config.shape.num_classes, ")");

  TrainResult res;
  if (initial_model) {
    res.final_model = *initial_model;
    if (!(res.final_model.shape == config.shape)) throw ConfigError("initial model shape does not match config");
  } else {
    Rng init_rng = substream(config.seed, "init");
    res.final_model = make_model(config.shape, init_rng);
    res.final_model.batch_norm = config.batch_norm;
  }
  AcousticModel& model = res.final_model;
  AdamState adam = make_adam_state(model);
  const bool use_dp = config.mode != TrainMode::baseline;
  res.data_parameters = DataParameterStore(static_cast<std::size_t>(config.shape.num_classes), train_set.size(),
                                           config.data_params);
  DataParameterStore& store = res.data_parameters;
  for (const auto& u : train_set) res.instance_ids.push_back(u.id);
  if (use_dp && callbacks.on_sigma_snapshot) callbacks.on_sigma_snapshot(0, store, res.instance_ids);

  Rng shuffle_rng = substream(config.seed, "shuffle");
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PlateauSchedule schedule(config.model_lr, config.plateau_factor, config.plateau_patience,
                           config.early_stop_patience);
  res.model = model;

  Matrix x;
  std::vector<int> targets;
  std::vector<std::size_t> instances;
  std::vector<double> sigmas;
  const auto batch = static_cast<std::size_t>(config.batch_utterances);
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    double frames_seen = 0.0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::span<const std::size_t> which(order.data() + start, std::min(batch, order.size() - start));
      if (callbacks.on_batch) callbacks.on_batch(epoch, which);
      detail::stack_frames(train_set, which, x, targets, instances);
      const auto fr = forward(model, x, Mode::training);
      double loss;
      Matrix logit_grads;
      DataParameterGradients dp_grads;
      if (use_dp) {
        sigmas.resize(targets.size());
        for (std::size_t f = 0; f < targets.size(); ++f)
          sigmas[f] = store.effective_sigma(static_cast<std::size_t>(targets[f]), instances[f]);
        auto r = dp_cross_entropy(fr.logits, targets, sigmas);
        res.saturated_frames += r.saturated_frames;
        dp_grads = data_parameter_gradients(store, targets, instances, r);
        loss = r.loss;
        logit_grads = std::move(r.logit_grads);
      } else {
        auto r = cross_entropy(fr.logits, targets);
        loss = r.loss;
        logit_grads = std::move(r.logit_grads);
      }
      if (!std::isfinite(loss))
        throw TrainingFault(detail::concat("non-finite training loss at epoch ", epoch, ", batch ", b, " (",
                                           targets.size(), " frames, first utterance id ", train_set[which[0]].id, ")"));
      const auto grads = backward(model, fr.cache, logit_grads);
      update_running_stats(model, fr.cache);
      adam_step(model, grads.params, adam, schedule.lr(), config.adam);
      if (use_dp) update_data_parameters(store, dp_grads);
      loss_sum += loss * static_cast<double>(targets.size());
      frames_seen += static_cast<double>(targets.size());
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / frames_seen;
    log.cv_loss = cv_loss(model, cv_set);
    log.model_lr = schedule.lr();
    if (schedule.observe(log.cv_loss)) res.model = model;
    log.stopped_early = schedule.should_stop();
    res.log.push_back(log);
    if (callbacks.on_epoch) callbacks.on_epoch(log);
    if (use_dp && callbacks.on_sigma_snapshot) callbacks.on_sigma_snapshot(epoch, store, res.instance_ids);
    if (log.stopped_early) break;
  }
  return res;
}

}  // namespace dpkws
