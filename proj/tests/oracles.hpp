// Independent reference computations used as test oracles: extended
// precision losses, finite differences, brute-force sweeps and exhaustive
// path enumeration. Nothing here calls the code it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include <quadmath.h>

#include "dpkws/dpkws.hpp"

namespace oracle {

using dpkws::Matrix;

using quad = __float128;

/// -log softmax(z / sigma)_y in quadruple precision.
inline quad frame_loss(const std::vector<quad>& z, std::size_t y, quad sigma) {
  quad m = z[0] / sigma;
  for (auto v : z) m = v / sigma > m ? v / sigma : m;
  quad s = 0;
  for (auto v : z) s += expq(v / sigma - m);
  return logq(s) + m - z[y] / sigma;
}

inline std::vector<quad> to_quad(std::span<const double> v) { return {v.begin(), v.end()}; }

/// Relative error; the denominator is floored so that quantities far below
/// the floor are compared absolutely.
inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  const double d = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / d;
}

/// Central difference of f at x, step h, evaluated in quadruple precision.
inline double central(const std::function<quad(quad)>& f, quad x, quad h = 1e-5Q) {
  return static_cast<double>((f(x + h) - f(x - h)) / (2 * h));
}

/// Log-uniform draw in [lo, hi].
inline double log_uniform(dpkws::Rng& rng, double lo, double hi) {
  return std::exp(dpkws::uniform(rng, std::log(lo), std::log(hi)));
}

// ---------------------------------------------------------------------------
// FRR by sweeping every distinct score as a threshold.

struct SweepResult {
  double frr = 1.0;
  double threshold = std::numeric_limits<double>::infinity();
  bool reachable = false;
};

inline SweepResult frr_sweep(std::span<const dpkws::DetectionTrial> trials, double fa_per_hour) {
  double neg_seconds = 0.0;
  std::vector<double> candidates;
  for (const auto& t : trials) {
    if (!t.is_positive) neg_seconds += t.duration_seconds;
    candidates.push_back(t.score);
  }
  const double hours = neg_seconds / 3600.0;
  SweepResult best;
  for (double th : candidates) {
    std::size_t fa = 0, pos = 0, rejected = 0;
    for (const auto& t : trials) {
      if (t.is_positive) {
        ++pos;
        if (t.score < th) ++rejected;
      } else if (t.score >= th) {
        ++fa;
      }
    }
    if (static_cast<double>(fa) / hours > fa_per_hour) continue;
    if (!best.reachable || th < best.threshold) {
      best.reachable = true;
      best.threshold = th;
      best.frr = static_cast<double>(rejected) / static_cast<double>(pos);
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Keyword log-likelihood by enumerating every monotone state alignment.

inline double enumerate_window(const Matrix& post, const dpkws::KeywordHmm& hmm, std::size_t first, std::size_t len,
                               bool viterbi = false, double floor = 1e-300) {
  const std::size_t S = hmm.states.size();
  if (len < S) return -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> path(len, 0);
  long double total = 0.0L;
  long double best = -std::numeric_limits<long double>::infinity();
  // Paths are non-decreasing, start at 0, end at S-1 and advance by at most one per frame.
  std::function<void(std::size_t)> rec = [&](std::size_t t) {
    if (t == len) {
      if (path[len - 1] != S - 1) return;
      long double lp = 0.0L;
      for (std::size_t i = 0; i < len; ++i) {
        const auto c = hmm.states[path[i]];
        lp += std::log(std::max<long double>(post(static_cast<Eigen::Index>(first + i), c), floor));
        if (i + 1 < len) lp += path[i + 1] == path[i] ? hmm.log_self[path[i]] : hmm.log_next[path[i]];
      }
      lp += hmm.log_next[S - 1];
      total += std::exp(lp);
      best = std::max(best, lp);
      return;
    }
    const std::size_t prev = path[t - 1];
    for (std::size_t s = prev; s <= std::min(prev + 1, S - 1); ++s) {
      path[t] = s;
      rec(t + 1);
    }
  };
  path[0] = 0;
  rec(1);
  return static_cast<double>(viterbi ? best : std::log(total));
}

/// Windowed score by brute force: max over windows of LL/len - mean log background.
inline double enumerate_score(const Matrix& post, const dpkws::KeywordHmm& hmm, bool viterbi = false) {
  const std::size_t T = static_cast<std::size_t>(post.rows());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < T; ++a)
    for (std::size_t len = hmm.states.size(); a + len <= T; ++len) {
      const double ll = enumerate_window(post, hmm, a, len, viterbi);
      long double bg = 0.0L;
      for (std::size_t i = 0; i < len; ++i) {
        long double s = 0.0L;
        for (int c : hmm.background) s += post(static_cast<Eigen::Index>(a + i), c);
        bg += std::log(s / static_cast<long double>(hmm.background.size()));
      }
      best = std::max(best, ll / static_cast<double>(len) - static_cast<double>(bg / static_cast<long double>(len)));
    }
  return best;
}

// ---------------------------------------------------------------------------
// Reference trainer for the sigma* = 1 case: plain softmax cross entropy,
// same seeding, shuffling, batching, optimiser and schedule.

struct ReferenceLog {
  std::vector<double> train_loss;
  std::vector<double> cv_loss;
  dpkws::AcousticModel model;
};

/// Frame-mean reduction multiplies by 1/n, so results are comparable to the
/// last bit with a trainer that does the same.
inline double plain_ce(const Matrix& logits, const std::vector<int>& targets, Matrix* grads) {
  const auto n = logits.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto k = logits.cols();
  if (grads) grads->resize(n, k);
  double total = 0.0;
  for (Eigen::Index f = 0; f < n; ++f) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j) m = std::max(m, logits(f, j));
    std::vector<double> e(static_cast<std::size_t>(k));
    double s = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      e[static_cast<std::size_t>(j)] = std::exp(logits(f, j) - m);
      s += e[static_cast<std::size_t>(j)];
    }
    const int y = targets[static_cast<std::size_t>(f)];
    total += std::log(s) - (logits(f, y) - m);
    if (grads)
      for (Eigen::Index j = 0; j < k; ++j)
        (*grads)(f, j) = (e[static_cast<std::size_t>(j)] / s - (j == y ? 1.0 : 0.0)) * inv_n;
  }
  return total * inv_n;
}

inline void stack(std::span<const dpkws::TrainingUtterance> utts, std::span<const std::size_t> which, Matrix& x,
                  std::vector<int>& y) {
  Eigen::Index rows = 0;
  for (auto i : which) rows += utts[i].features.rows();
  x.resize(rows, utts[which[0]].features.cols());
  y.clear();
  Eigen::Index r = 0;
  for (auto i : which) {
    x.middleRows(r, utts[i].features.rows()) = utts[i].features;
    r += utts[i].features.rows();
    y.insert(y.end(), utts[i].labels.begin(), utts[i].labels.end());
  }
}

inline ReferenceLog reference_train(const dpkws::TrainConfig& cfg, std::span<const dpkws::TrainingUtterance> train,
                                    std::span<const dpkws::TrainingUtterance> cv) {
  using namespace dpkws;
  ReferenceLog out;
  Rng init = substream(cfg.seed, "init");
  AcousticModel model = make_model(cfg.shape, init);
  model.batch_norm = cfg.batch_norm;
  AdamState adam = make_adam_state(model);
  Rng shuf = substream(cfg.seed, "shuffle");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> cv_all(cv.size());
  std::iota(cv_all.begin(), cv_all.end(), std::size_t{0});
  double lr = cfg.model_lr, best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle(order, shuf);
    double sum = 0.0, frames = 0.0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_utterances)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch_utterances));
      Matrix x, g;
      std::vector<int> y;
      stack(train, std::span(order).subspan(s, e - s), x, y);
      const auto fr = forward(model, x, Mode::training);
      const double loss = plain_ce(fr.logits, y, &g);
      const auto grads = backward(model, fr.cache, g);
      update_running_stats(model, fr.cache);
      adam_step(model, grads.params, adam, lr, cfg.adam);
      sum += loss * static_cast<double>(y.size());
      frames += static_cast<double>(y.size());
    }
    Matrix x;
    std::vector<int> y;
    stack(cv, cv_all, x, y);
    const double cvl = plain_ce(forward(model, x, Mode::inference).logits, y, nullptr);
    out.train_loss.push_back(sum / frames);
    out.cv_loss.push_back(cvl);
    if (cvl < best) {
      best = cvl;
      stale = 0;
    } else if (++stale % cfg.plateau_patience == 0) {
      lr *= cfg.plateau_factor;
    }
    if (stale >= cfg.early_stop_patience) break;
  }
  out.model = model;
  return out;
}

/// Largest absolute difference between two models' trainable tensors.
inline double max_param_diff(const dpkws::AcousticModel& a, const dpkws::AcousticModel& b) {
  const auto pa = dpkws::parameter_spans(a.params);
  const auto pb = dpkws::parameter_spans(b.params);
  double d = 0.0;
  for (std::size_t t = 0; t < pa.size(); ++t)
    for (std::size_t i = 0; i < pa[t].size(); ++i) d = std::max(d, std::abs(pa[t][i] - pb[t][i]));
  return d;
}

}  // namespace oracle
