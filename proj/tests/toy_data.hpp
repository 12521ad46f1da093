// Feature-level synthetic data for trainer tests: each utterance is a run of
// frames drawn around one class mean, optionally with its labels replaced by
// a different class.
#pragma once

#include <vector>

#include "dpkws/dpkws.hpp"

namespace toy {

struct ToySet {
  std::vector<dpkws::TrainingUtterance> utterances;
  std::vector<bool> flipped;
};

inline ToySet make_toy_set(std::uint64_t seed, int count, int classes, int dim, int frames, double flip_fraction,
                           double separation = 1.0, std::int64_t first_id = 0) {
  using namespace dpkws;
  Rng means_rng = substream(seed, "toy-means");
  Matrix means(classes, dim);
  for (int c = 0; c < classes; ++c)
    for (int d = 0; d < dim; ++d) means(c, d) = separation * normal(means_rng);
  Rng rng = substream(seed, "toy-utterances", static_cast<std::uint64_t>(first_id));
  ToySet s;
  for (int i = 0; i < count; ++i) {
    TrainingUtterance u;
    u.id = first_id + i;
    const int cls = static_cast<int>(uniform_int(rng, 0, classes - 1));
    u.features.resize(frames, dim);
    for (int t = 0; t < frames; ++t)
      for (int d = 0; d < dim; ++d) u.features(t, d) = means(cls, d) + normal(rng);
    const bool flip = uniform(rng, 0.0, 1.0) < flip_fraction;
    int label = cls;
    if (flip) label = (cls + 1 + static_cast<int>(uniform_int(rng, 0, classes - 2))) % classes;
    u.labels.assign(static_cast<std::size_t>(frames), label);
    s.utterances.push_back(std::move(u));
    s.flipped.push_back(flip);
  }
  return s;
}

inline dpkws::TrainConfig toy_config(dpkws::TrainMode mode, int classes, int dim, std::uint64_t seed) {
  using namespace dpkws;
  TrainConfig c = default_train_config(mode, DataCondition::noisy);
  c.shape = {dim, 8, 2, classes};
  c.batch_utterances = 16;
  c.max_epochs = 3;
  c.seed = seed;
  return c;
}

}  // namespace toy
