/*
 * pipeline.hpp
 *
 * Glue between the corpus, the front end, the trainer and the scorer.
 */
#pragma once

#include <span>
#include <vector>

#include "corpus.hpp"
#include "eval.hpp"
#include "features.hpp"
#include "kws.hpp"
#include "netcore.hpp"
#include "trainer.hpp"

namespace dpkws {

inline TrainingUtterance featurize(const Utterance& u, const FrameSpec& spec) {
  TrainingUtterance t;
  t.id = u.id;
  t.features = extract_features(u.samples, spec);
  t.labels = u.frame_labels;
  if (static_cast<std::size_t>(t.features.rows()) != t.labels.size())
    fail("utterance ", u.id, ": ", t.features.rows(), " MFCC frames but ", t.labels.size(), " frame labels");
  return t;
}

struct FeatureSplits {
  std::vector<TrainingUtterance> train;
  std::vector<TrainingUtterance> cv;
};

/// Features for the train and cv splits. With `clean_only`, noisy copies are dropped.
inline FeatureSplits featurize_splits(std::span<const Utterance> corpus, const FrameSpec& spec, bool clean_only = false) {
  FeatureSplits s;
  for (const auto& u : corpus) {
    if (clean_only && u.provenance.noisy) continue;
    if (u.split == Split::train) s.train.push_back(featurize(u, spec));
    else if (u.split == Split::cv) s.cv.push_back(featurize(u, spec));
  }
  return s;
}

/// Keyword HMM with transitions counted on the training labels; silence and
/// other speech form the background.
inline KeywordHmm keyword_hmm_from(std::span<const TrainingUtterance> train) {
  std::vector<std::vector<int>> labels;
  labels.reserve(train.size());
  for (const auto& u : train) labels.push_back(u.labels);
  return estimate_transitions(labels, keyword_state_order(), {kSilenceClass, kOtherSpeechClass});
}

/// Inference-mode posteriors, plain softmax.
inline Matrix frame_posteriors(const AcousticModel& model, const Matrix& features) {
  return posteriors(forward(model, features, Mode::inference).logits);
}

inline std::vector<DetectionTrial> score_utterances(const AcousticModel& model, const KeywordHmm& hmm,
                                                    std::span<const Utterance> utterances, const FrameSpec& spec,
                                                    const ScoreConfig& sc = {}) {
  std::vector<DetectionTrial> trials;
  trials.reserve(utterances.size());
  for (const auto& u : utterances) {
    const Matrix post = frame_posteriors(model, extract_features(u.samples, spec));
    trials.push_back({u.id, keyword_score(post, hmm, sc), u.is_positive, u.duration_seconds(spec.sample_rate)});
  }
  return trials;
}

}  // namespace dpkws
