// In-memory pipeline on a small corpus: generate, augment, train in joint
// mode, score the evaluation set and print FRR at 10 false alarms per hour.

#include <iostream>

#include "dpkws/dpkws.hpp"

int main() {
  using namespace dpkws;
  const std::uint64_t seed = 3;
  const FrameSpec spec;

  auto clean = generate_corpus(seed, {150, 150}, KeywordSpec{}, spec);
  const auto bank = make_noise_bank(seed, spec.sample_rate);
  AugmentConfig aug;
  aug.cv_fraction = 0.05;
  const auto corpus = build_multicondition(clean, bank, seed, aug, spec.sample_rate);
  const auto splits = featurize_splits(corpus, spec);

  TrainConfig cfg = default_train_config(TrainMode::joint, DataCondition::noisy);
  cfg.max_epochs = 8;
  cfg.batch_utterances = 32;
  cfg.seed = seed;
  TrainCallbacks cb;
  cb.on_epoch = [](const EpochLog& e) {
    std::cout << "epoch " << e.epoch << "  train " << e.train_loss << "  cv " << e.cv_loss << '\n';
  };
  const auto result = train(cfg, splits.train, splits.cv, cb);

  EvalSetConfig ec;
  ec.positives = 60;
  ec.negatives = 60;
  const auto eval = generate_eval_set(seed, 100000, ec, KeywordSpec{}, bank, aug, spec);
  const auto trials = score_utterances(result.model, keyword_hmm_from(splits.train), eval, spec);
  const auto op = frr_at_fa_rate(trials, 10.0);
  std::cout << "FRR at 10 FA/h: " << op.frr << (op.reachable ? "" : " (unreachable)") << '\n';
}
