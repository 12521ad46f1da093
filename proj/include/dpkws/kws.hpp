/*
 * kws.hpp
 *
 * DNN-HMM keyword scoring. A left-to-right HMM over the keyword states
 * accumulates frame posteriors; the detection score of a window is the
 * length-normalised keyword log-likelihood minus the mean background
 * log-posterior over the same window, maximised over windows.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "common.hpp"
#include "dataparams.hpp"
#include "json.hpp"

namespace dpkws {

struct KeywordHmm {
  /// Class ids in path order.
  std::vector<int> states;
  std::vector<double> log_self;
  /// Forward transition out of each state; for the last state this is the exit.
  std::vector<double> log_next;
  /// Classes whose posteriors are averaged into the background model.
  std::vector<int> background;
};

/// Counts self-loop vs leaving transitions from consecutive label pairs, with add-one smoothing.
inline KeywordHmm estimate_transitions(const std::vector<std::vector<int>>& label_sequences,
                                       const std::vector<int>& states, const std::vector<int>& background) {
  if (states.empty()) fail("estimate_transitions: empty state list");
  bool any = false;
  for (const auto& s : label_sequences) any = any || !s.empty();
  if (!any) fail("estimate_transitions: empty label set");

  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < states.size(); ++i) index[states[i]] = i;
  std::vector<double> occupancy(states.size(), 0.0), exits(states.size(), 0.0);
  for (const auto& seq : label_sequences)
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      auto it = index.find(seq[t]);
      if (it == index.end()) continue;
      occupancy[it->second] += 1.0;
      if (seq[t + 1] != seq[t]) exits[it->second] += 1.0;
    }
  std::string missing;
  for (std::size_t i = 0; i < states.size(); ++i)
    if (occupancy[i] == 0.0) missing += detail::concat(missing.empty() ? "" : ", ", states[i]);
  if (!missing.empty()) fail("estimate_transitions: states never observed: ", missing);

  KeywordHmm h;
  h.states = states;
  h.background = background;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const double self = (occupancy[i] - exits[i] + 1.0) / (occupancy[i] + 2.0);
    h.log_self.push_back(std::log(self));
    h.log_next.push_back(std::log1p(-self));
  }
  return h;
}

inline nlohmann::json to_json(const KeywordHmm& h) {
  return {{"states", h.states}, {"log_self", h.log_self}, {"log_next", h.log_next}, {"background", h.background}};
}

inline KeywordHmm keyword_hmm_from_json(const nlohmann::json& j) {
  KeywordHmm h;
  try {
    h.states = j.at("states").get<std::vector<int>>();
    h.log_self = j.at("log_self").get<std::vector<double>>();
    h.log_next = j.at("log_next").get<std::vector<double>>();
    h.background = j.at("background").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    fail("malformed keyword HMM: ", e.what());
  }
  if (h.states.empty() || h.log_self.size() != h.states.size() || h.log_next.size() != h.states.size())
    fail("malformed keyword HMM: inconsistent state counts");
  return h;
}

enum class ScoringMethod { forward, viterbi };

struct ScoreConfig {
  ScoringMethod method = ScoringMethod::forward;
  /// Longest window considered, in frames.
  int max_window_frames = 300;
  double posterior_floor = 1e-300;
};

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

namespace detail {

struct ScoringInputs {
  Matrix log_emission;             // T x S
  std::vector<double> log_background;  // T
};

inline ScoringInputs scoring_inputs(const Matrix& posteriors, const KeywordHmm& hmm, double floor) {
  const Eigen::Index t_count = posteriors.rows();
  ScoringInputs in;
  in.log_emission.resize(t_count, static_cast<Eigen::Index>(hmm.states.size()));
  in.log_background.resize(static_cast<std::size_t>(t_count));
  for (int c : hmm.states)
    if (c < 0 || c >= posteriors.cols()) fail("keyword_score: state class ", c, " outside posterior width");
  for (int c : hmm.background)
    if (c < 0 || c >= posteriors.cols()) fail("keyword_score: background class ", c, " outside posterior width");
  if (hmm.background.empty()) fail("keyword_score: empty background model");
  for (Eigen::Index t = 0; t < t_count; ++t) {
    for (std::size_t s = 0; s < hmm.states.size(); ++s)
      in.log_emission(t, static_cast<Eigen::Index>(s)) = std::log(std::max(posteriors(t, hmm.states[s]), floor));
    double bg = 0.0;
    for (int c : hmm.background) bg += posteriors(t, c);
    in.log_background[static_cast<std::size_t>(t)] =
        std::log(std::max(bg / static_cast<double>(hmm.background.size()), floor));
  }
  return in;
}

}  // namespace detail

/// Log-likelihood of the keyword path entering state 0 at `first` and exiting
/// the last state after `last` (inclusive), summed (forward) or maximised
/// (Viterbi) over state alignments. -inf when the window is shorter than the path.
inline double window_log_likelihood(const Matrix& posteriors, const KeywordHmm& hmm, Eigen::Index first,
                                    Eigen::Index last, ScoringMethod method = ScoringMethod::forward,
                                    double floor = 1e-300) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const auto n_states = static_cast<Eigen::Index>(hmm.states.size());
  if (first < 0 || last >= posteriors.rows() || last < first) fail("window_log_likelihood: bad window");
  if (last - first + 1 < n_states) return ninf;
  const auto in = detail::scoring_inputs(posteriors.middleRows(first, last - first + 1), hmm, floor);
  std::vector<double> alpha(static_cast<std::size_t>(n_states), ninf), next(alpha.size());
  alpha[0] = in.log_emission(0, 0);
  for (Eigen::Index t = 1; t < in.log_emission.rows(); ++t) {
    for (Eigen::Index s = 0; s < n_states; ++s) {
      const auto su = static_cast<std::size_t>(s);
      const double stay = alpha[su] + hmm.log_self[su];
      const double enter = s > 0 ? alpha[su - 1] + hmm.log_next[su - 1] : ninf;
      const double v = method == ScoringMethod::forward ? log_add(stay, enter) : std::max(stay, enter);
      next[su] = v + in.log_emission(t, s);
    }
    alpha.swap(next);
  }
  return alpha.back() + hmm.log_next.back();
}

/// Maximum over windows of (keyword log-likelihood / window length - mean background log-posterior).
/// Rows of `posteriors` are frames. Returns -inf when the utterance is shorter than the keyword path.
inline double keyword_score(const Matrix& posteriors, const KeywordHmm& hmm, const ScoreConfig& cfg = {}) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const auto n_states = static_cast<std::size_t>(hmm.states.size());
  if (n_states == 0 || hmm.log_self.size() != n_states || hmm.log_next.size() != n_states)
    fail("keyword_score: malformed HMM");
  const Eigen::Index t_count = posteriors.rows();
  if (t_count < static_cast<Eigen::Index>(n_states)) return ninf;
  const auto in = detail::scoring_inputs(posteriors, hmm, cfg.posterior_floor);

  std::vector<double> bg_prefix(static_cast<std::size_t>(t_count) + 1, 0.0);
  for (Eigen::Index t = 0; t < t_count; ++t)
    bg_prefix[static_cast<std::size_t>(t) + 1] = bg_prefix[static_cast<std::size_t>(t)] + in.log_background[static_cast<std::size_t>(t)];

  const bool fwd = cfg.method == ScoringMethod::forward;
  const Eigen::Index max_w = std::max<Eigen::Index>(cfg.max_window_frames, static_cast<Eigen::Index>(n_states));
  double best = ninf;
  std::vector<double> alpha(n_states), next(n_states);
  for (Eigen::Index a = 0; a + static_cast<Eigen::Index>(n_states) <= t_count; ++a) {
    std::fill(alpha.begin(), alpha.end(), ninf);
    alpha[0] = in.log_emission(a, 0);
    if (n_states == 1) best = std::max(best, alpha[0] + hmm.log_next[0] - in.log_background[static_cast<std::size_t>(a)]);
    const Eigen::Index end = std::min(t_count, a + max_w);
    for (Eigen::Index t = a + 1; t < end; ++t) {
      const std::size_t reach = std::min<std::size_t>(n_states, static_cast<std::size_t>(t - a) + 1);
      for (std::size_t s = 0; s < reach; ++s) {
        const double stay = alpha[s] + hmm.log_self[s];
        const double enter = s > 0 ? alpha[s - 1] + hmm.log_next[s - 1] : ninf;
        next[s] = (fwd ? log_add(stay, enter) : std::max(stay, enter)) + in.log_emission(t, static_cast<Eigen::Index>(s));
      }
      for (std::size_t s = 0; s < reach; ++s) alpha[s] = next[s];
      const auto len = static_cast<double>(t - a + 1);
      if (reach == n_states) {
        const double ll = alpha.back() + hmm.log_next.back();
        const double bg = (bg_prefix[static_cast<std::size_t>(t) + 1] - bg_prefix[static_cast<std::size_t>(a)]) / len;
        best = std::max(best, ll / len - bg);
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Score dump: CSV (utterance_id, score, is_positive)

struct UtteranceScore {
  std::int64_t utterance_id = 0;
  double score = 0.0;
  bool is_positive = false;
};

inline void write_scores(std::ostream& os, std::span<const UtteranceScore> scores) {
  os << "utterance_id,score,is_positive\n" << std::setprecision(17);
  for (const auto& s : scores) os << s.utterance_id << ',' << s.score << ',' << (s.is_positive ? 1 : 0) << '\n';
}

inline std::vector<UtteranceScore> read_scores(std::istream& is) {
  std::vector<UtteranceScore> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line.rfind("utterance_id", 0) == 0) continue;
    const auto a = line.find(','), b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) fail("score csv: malformed line '", line, "'");
    UtteranceScore s;
    s.utterance_id = std::stoll(line.substr(0, a));
    const std::string v = line.substr(a + 1, b - a - 1);
    s.score = v == "-inf" ? -std::numeric_limits<double>::infinity() : std::stod(v);
    s.is_positive = line.substr(b + 1) == "1";
    out.push_back(s);
  }
  return out;
}

}  // namespace dpkws
