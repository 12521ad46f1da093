/*
 * eval.hpp
 *
 * Detection metrics (FRR at a fixed false-alarm rate, DET curves) and
 * per-epoch summaries of the learned sigma distributions.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "common.hpp"
#include "corpus.hpp"
#include "dataparams.hpp"

namespace dpkws {

struct DetectionTrial {
  std::int64_t utterance_id = 0;
  double score = 0.0;
  bool is_positive = false;
  double duration_seconds = 0.0;
};

struct OperatingPoint {
  double frr = 0.0;
  double threshold = 0.0;
  /// False alarms per hour actually obtained at `threshold`.
  double fa_per_hour = 0.0;
  std::size_t false_alarms = 0;
  /// False when no observed score meets the target; then nothing is accepted.
  bool reachable = true;
};

inline double negative_hours(std::span<const DetectionTrial> trials) {
  double s = 0.0;
  for (const auto& t : trials)
    if (!t.is_positive) s += t.duration_seconds;
  return s / 3600.0;
}

/// Threshold = smallest observed score whose false-alarm rate (negatives with
/// score >= threshold per negative hour) is at most `fa_per_hour`; FRR =
/// fraction of positives scoring below it.
inline OperatingPoint frr_at_fa_rate(std::span<const DetectionTrial> trials, double fa_per_hour) {
  std::vector<double> pos, neg, all;
  for (const auto& t : trials) {
    if (t.is_positive) pos.push_back(t.score);
    else {
      if (!(t.duration_seconds > 0.0)) fail("negative trial ", t.utterance_id, " has non-positive duration");
      neg.push_back(t.score);
    }
    if (std::isnan(t.score)) fail("trial ", t.utterance_id, " has a NaN score");
    all.push_back(t.score);
  }
  if (pos.empty() || neg.empty()) fail("frr_at_fa_rate needs at least one positive and one negative trial");
  const double hours = negative_hours(trials);
  if (!(hours > 0.0)) fail("frr_at_fa_rate: no negative audio");
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  auto count_at_or_above = [](const std::vector<double>& v, double th) {
    return static_cast<std::size_t>(v.end() - std::lower_bound(v.begin(), v.end(), th));
  };
  // FA count is non-increasing in the threshold: binary search the first admissible candidate.
  const auto first_ok = std::partition_point(all.begin(), all.end(), [&](double th) {
    return static_cast<double>(count_at_or_above(neg, th)) / hours > fa_per_hour;
  });
  OperatingPoint op;
  if (first_ok == all.end()) {
    op.reachable = false;
    op.threshold = std::numeric_limits<double>::infinity();
    op.frr = 1.0;
    return op;
  }
  op.threshold = *first_ok;
  op.false_alarms = count_at_or_above(neg, op.threshold);
  op.fa_per_hour = static_cast<double>(op.false_alarms) / hours;
  const auto rejected = static_cast<std::size_t>(std::lower_bound(pos.begin(), pos.end(), op.threshold) - pos.begin());
  op.frr = static_cast<double>(rejected) / static_cast<double>(pos.size());
  return op;
}

struct DetPoint {
  double fa_per_hour = 0.0;
  double frr = 0.0;
  double threshold = 0.0;
};

/// FRR at `n_points` log-spaced false-alarm targets between one false alarm
/// and all negatives per hour, plus the `always_include` target.
inline std::vector<DetPoint> det_curve(std::span<const DetectionTrial> trials, int n_points,
                                       double always_include = 10.0) {
  const double hours = negative_hours(trials);
  if (!(hours > 0.0)) fail("det_curve: no negative audio");
  std::size_t n_neg = 0;
  for (const auto& t : trials) n_neg += t.is_positive ? 0 : 1;
  const double lo = 1.0 / hours, hi = static_cast<double>(n_neg) / hours;
  std::vector<double> targets{always_include};
  if (n_points == 1) targets.push_back(lo);
  for (int i = 0; i < n_points && n_points > 1; ++i)
    targets.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (n_points - 1)));
  std::sort(targets.begin(), targets.end());
  targets.erase(std::unique(targets.begin(), targets.end()), targets.end());
  std::vector<DetPoint> out;
  for (double x : targets) {
    const auto op = frr_at_fa_rate(trials, x);
    out.push_back({x, op.frr, op.threshold});
  }
  return out;
}

inline void write_det_csv(std::ostream& os, std::span<const DetPoint> pts) {
  os << "fa_per_hour,frr,threshold\n" << std::setprecision(17);
  for (const auto& p : pts) os << p.fa_per_hour << ',' << p.frr << ',' << p.threshold << '\n';
}

// ---------------------------------------------------------------------------
// Sigma distribution report

struct SummaryStats {
  std::size_t count = 0;
  double mean = 0.0;
  /// Population standard deviation.
  double stddev = 0.0;
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Order-independent: values are sorted before any accumulation.
inline SummaryStats summarize(std::vector<double> v) {
  SummaryStats s;
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.count = v.size();
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  const std::size_t n = v.size();
  s.median = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  s.min = v.front();
  s.max = v.back();
  return s;
}

struct EpochSigmaStats {
  int epoch = 0;
  std::optional<SummaryStats> class_sigma;
  std::optional<SummaryStats> instance_clean;
  std::optional<SummaryStats> instance_noisy;
};

/// Per-epoch class-sigma distribution and instance-sigma distribution split by
/// clean/noisy provenance. Provenance is read from the manifest here and
/// nowhere in training.
inline std::vector<EpochSigmaStats> sigma_distribution_report(std::span<const SigmaSnapshotRow> rows,
                                                              std::span<const ManifestEntry> manifest) {
  if (rows.empty()) fail("sigma_distribution_report: no snapshot rows");
  std::map<std::int64_t, bool> noisy_by_id;
  for (const auto& e : manifest) noisy_by_id[e.id] = e.provenance.noisy;
  struct Acc {
    std::vector<double> cls, clean, noisy;
  };
  std::map<int, Acc> by_epoch;
  for (const auto& r : rows) {
    Acc& a = by_epoch[r.epoch];
    if (r.kind == "class") {
      a.cls.push_back(r.sigma);
    } else {
      auto it = noisy_by_id.find(r.id);
      if (it == noisy_by_id.end()) fail("sigma snapshot references utterance ", r.id, " absent from the manifest");
      (it->second ? a.noisy : a.clean).push_back(r.sigma);
    }
  }
  std::vector<EpochSigmaStats> out;
  for (auto& [epoch, a] : by_epoch) {
    EpochSigmaStats s;
    s.epoch = epoch;
    if (!a.cls.empty()) s.class_sigma = summarize(std::move(a.cls));
    if (!a.clean.empty()) s.instance_clean = summarize(std::move(a.clean));
    if (!a.noisy.empty()) s.instance_noisy = summarize(std::move(a.noisy));
    out.push_back(s);
  }
  return out;
}

/// One row per (epoch, group). Bands are median +/- k standard deviations, k = 1..3.
/// A group with no values is written with count 0 and empty statistics.
inline void write_sigma_report(std::ostream& os, std::span<const EpochSigmaStats> report) {
  os << "epoch,group,count,mean,std,median,min,max,band1_lo,band1_hi,band2_lo,band2_hi,band3_lo,band3_hi\n"
     << std::setprecision(12);
  auto row = [&](int epoch, const char* group, const std::optional<SummaryStats>& s) {
    os << epoch << ',' << group << ',' << (s ? s->count : 0);
    if (s) {
      os << ',' << s->mean << ',' << s->stddev << ',' << s->median << ',' << s->min << ',' << s->max;
      for (int k = 1; k <= 3; ++k) os << ',' << s->median - k * s->stddev << ',' << s->median + k * s->stddev;
    } else {
      os << ",,,,,,,,,,,";
    }
    os << '\n';
  };
  bool any_class = false, any_instance = false;
  for (const auto& e : report) {
    any_class = any_class || e.class_sigma.has_value();
    any_instance = any_instance || e.instance_clean || e.instance_noisy;
  }
  for (const auto& e : report) {
    if (any_class) row(e.epoch, "class", e.class_sigma);
    if (any_instance) {
      row(e.epoch, "instance_clean", e.instance_clean);
      row(e.epoch, "instance_noisy", e.instance_noisy);
    }
  }
}

}  // namespace dpkws
