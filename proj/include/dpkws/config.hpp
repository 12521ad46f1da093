/*
 * config.hpp
 *
 * Run configuration shared by the CLI subcommands. A config document is
 * plain JSON; any subset of keys may be given and the rest take defaults.
 * Unknown keys are rejected. Data-parameter hyperparameters left null are
 * filled from the per-(data, mode) defaults when the config is resolved.
 */
#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "common.hpp"
#include "corpus.hpp"
#include "features.hpp"
#include "json.hpp"
#include "kws.hpp"
#include "trainer.hpp"

namespace dpkws {

struct CorpusParams {
  int positives = 1000;
  int negatives = 1000;
  bool clean_only = false;
  AugmentConfig augment;
  EvalSetConfig eval;
  KeywordSpec keyword;
};

struct EvalParams {
  double fa_per_hour = 10.0;
  int det_points = 25;
  std::string split = "eval";
  ScoreConfig score;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string corpus_dir = "corpus";
  std::string run_dir = "run";
  CorpusParams corpus;
  FrameSpec features;
  DataCondition data = DataCondition::noisy;
  TrainConfig train;
  EvalParams eval;
};

inline nlohmann::json default_config_document() {
  using nlohmann::json;
  const RunConfig d;
  const KeywordSpec& k = d.corpus.keyword;
  const TrainConfig& t = d.train;
  return {
      {"seed", d.seed},
      {"paths", {{"corpus", d.corpus_dir}, {"run", d.run_dir}}},
      {"corpus",
       {{"positives", d.corpus.positives},
        {"negatives", d.corpus.negatives},
        {"clean_only", d.corpus.clean_only},
        {"snr_min_db", d.corpus.augment.snr_min_db},
        {"snr_max_db", d.corpus.augment.snr_max_db},
        {"rir_decay_min_s", d.corpus.augment.rir_decay_min_s},
        {"rir_decay_max_s", d.corpus.augment.rir_decay_max_s},
        {"cv_fraction", d.corpus.augment.cv_fraction},
        {"eval_positives", d.corpus.eval.positives},
        {"eval_negatives", d.corpus.eval.negatives},
        {"eval_negative_frames_min", d.corpus.eval.negative_frames_min},
        {"eval_negative_frames_max", d.corpus.eval.negative_frames_max},
        {"eval_noisy_fraction", d.corpus.eval.noisy_fraction},
        {"keyword",
         {{"state_frames_min", k.state_frames_min},
          {"state_frames_max", k.state_frames_max},
          {"silence_frames_min", k.silence_frames_min},
          {"silence_frames_max", k.silence_frames_max},
          {"filler_frames_min", k.filler_frames_min},
          {"filler_frames_max", k.filler_frames_max},
          {"negative_frames_min", k.negative_frames_min},
          {"negative_frames_max", k.negative_frames_max},
          {"filler_phone_frames_min", k.filler_phone_frames_min},
          {"filler_phone_frames_max", k.filler_phone_frames_max},
          {"near_miss_probability", k.near_miss_probability}}}}},
      {"features",
       {{"sample_rate", d.features.sample_rate},
        {"window_ms", d.features.window_ms},
        {"hop_ms", d.features.hop_ms},
        {"mel_filters", d.features.mel_filters},
        {"cepstral_coeffs", d.features.cepstral_coeffs},
        {"context_left", d.features.context_left},
        {"context_right", d.features.context_right},
        {"preemphasis", d.features.preemphasis},
        {"log_floor", d.features.log_floor}}},
      {"train",
       {{"mode", to_string(t.mode)},
        {"data", to_string(d.data)},
        {"class_lr", nullptr},
        {"class_init", nullptr},
        {"instance_lr", nullptr},
        {"instance_init", nullptr},
        {"weight_decay", nullptr},
        {"momentum", t.data_params.momentum},
        {"model_lr", t.model_lr},
        {"beta1", t.adam.beta1},
        {"beta2", t.adam.beta2},
        {"adam_epsilon", t.adam.epsilon},
        {"plateau_factor", t.plateau_factor},
        {"plateau_patience", t.plateau_patience},
        {"early_stop_patience", t.early_stop_patience},
        {"batch_utterances", t.batch_utterances},
        {"max_epochs", t.max_epochs},
        {"hidden_width", t.shape.hidden_width},
        {"hidden_layers", t.shape.hidden_layers},
        {"bn_epsilon", t.batch_norm.epsilon},
        {"bn_momentum", t.batch_norm.momentum}}},
      {"eval",
       {{"fa_per_hour", d.eval.fa_per_hour},
        {"det_points", d.eval.det_points},
        {"split", d.eval.split},
        {"scorer", "forward"},
        {"max_window_frames", d.eval.score.max_window_frames}}}};
}

namespace detail {

inline const char* json_kind(const nlohmann::json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_object()) return "object";
  return "array";
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& overlay, const std::string& where) {
  if (!overlay.is_object()) throw ConfigError(concat(where.empty() ? "config" : where, ": expected an object"));
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(concat("unknown config key '", key, "'"));
    nlohmann::json& slot = base[it.key()];
    const nlohmann::json& v = it.value();
    if (slot.is_object()) {
      merge_into(slot, v, key);
      continue;
    }
    // A null default marks an optional number.
    const bool ok = slot.is_null() ? (v.is_number() || v.is_null())
                    : slot.is_number() ? v.is_number()
                                       : std::string(json_kind(slot)) == json_kind(v);
    if (!ok) throw ConfigError(concat("config key '", key, "' expects ", slot.is_null() ? "number" : json_kind(slot),
                                      ", got ", json_kind(v)));
    if (slot.is_number_unsigned() || slot.is_number_integer()) {
      if (!v.is_number_integer() && !v.is_number_unsigned())
        throw ConfigError(concat("config key '", key, "' expects an integer"));
    }
    slot = v;
  }
}

template <class T>
T get(const nlohmann::json& j, const char* key) {
  return j.at(key).get<T>();
}

}  // namespace detail

/// Overlays `overlay` onto `base`, rejecting keys absent from `base`.
inline nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overlay) {
  detail::merge_into(base, overlay, "");
  return base;
}

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError(detail::concat("cannot open config file ", path.string()));
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(detail::concat(path.string(), ": ", e.what()));
  }
}

/// Converts a merged document into typed settings; validates ranges.
inline RunConfig parse_run_config(const nlohmann::json& doc) {
  using detail::get;
  const nlohmann::json j = merge_config(default_config_document(), doc);
  RunConfig c;
  try {
    const auto seed = j.at("seed");
    if (seed.is_number_integer() && seed.get<std::int64_t>() < 0) throw ConfigError("seed must be non-negative");
    c.seed = seed.get<std::uint64_t>();
    c.corpus_dir = get<std::string>(j["paths"], "corpus");
    c.run_dir = get<std::string>(j["paths"], "run");

    const auto& jc = j["corpus"];
    c.corpus.positives = get<int>(jc, "positives");
    c.corpus.negatives = get<int>(jc, "negatives");
    c.corpus.clean_only = get<bool>(jc, "clean_only");
    c.corpus.augment.snr_min_db = get<double>(jc, "snr_min_db");
    c.corpus.augment.snr_max_db = get<double>(jc, "snr_max_db");
    c.corpus.augment.rir_decay_min_s = get<double>(jc, "rir_decay_min_s");
    c.corpus.augment.rir_decay_max_s = get<double>(jc, "rir_decay_max_s");
    c.corpus.augment.cv_fraction = get<double>(jc, "cv_fraction");
    c.corpus.eval.positives = get<int>(jc, "eval_positives");
    c.corpus.eval.negatives = get<int>(jc, "eval_negatives");
    c.corpus.eval.negative_frames_min = get<int>(jc, "eval_negative_frames_min");
    c.corpus.eval.negative_frames_max = get<int>(jc, "eval_negative_frames_max");
    c.corpus.eval.noisy_fraction = get<double>(jc, "eval_noisy_fraction");
    const auto& jk = jc["keyword"];
    KeywordSpec& k = c.corpus.keyword;
    k.state_frames_min = get<int>(jk, "state_frames_min");
    k.state_frames_max = get<int>(jk, "state_frames_max");
    k.silence_frames_min = get<int>(jk, "silence_frames_min");
    k.silence_frames_max = get<int>(jk, "silence_frames_max");
    k.filler_frames_min = get<int>(jk, "filler_frames_min");
    k.filler_frames_max = get<int>(jk, "filler_frames_max");
    k.negative_frames_min = get<int>(jk, "negative_frames_min");
    k.negative_frames_max = get<int>(jk, "negative_frames_max");
    k.filler_phone_frames_min = get<int>(jk, "filler_phone_frames_min");
    k.filler_phone_frames_max = get<int>(jk, "filler_phone_frames_max");
    k.near_miss_probability = get<double>(jk, "near_miss_probability");

    const auto& jf = j["features"];
    c.features.sample_rate = get<int>(jf, "sample_rate");
    c.features.window_ms = get<double>(jf, "window_ms");
    c.features.hop_ms = get<double>(jf, "hop_ms");
    c.features.mel_filters = get<int>(jf, "mel_filters");
    c.features.cepstral_coeffs = get<int>(jf, "cepstral_coeffs");
    c.features.context_left = get<int>(jf, "context_left");
    c.features.context_right = get<int>(jf, "context_right");
    c.features.preemphasis = get<double>(jf, "preemphasis");
    c.features.log_floor = get<double>(jf, "log_floor");

    const auto& jt = j["train"];
    const TrainMode mode = train_mode_from_string(get<std::string>(jt, "mode"));
    c.data = data_condition_from_string(get<std::string>(jt, "data"));
    c.train = default_train_config(mode, c.data);
    auto opt = [&](const char* key, double& dst) {
      if (!jt.at(key).is_null()) dst = jt.at(key).get<double>();
    };
    opt("class_lr", c.train.data_params.class_lr);
    opt("class_init", c.train.data_params.class_init);
    opt("instance_lr", c.train.data_params.instance_lr);
    opt("instance_init", c.train.data_params.instance_init);
    opt("weight_decay", c.train.data_params.weight_decay);
    c.train.data_params.momentum = get<double>(jt, "momentum");
    c.train.model_lr = get<double>(jt, "model_lr");
    c.train.adam.beta1 = get<double>(jt, "beta1");
    c.train.adam.beta2 = get<double>(jt, "beta2");
    c.train.adam.epsilon = get<double>(jt, "adam_epsilon");
    c.train.plateau_factor = get<double>(jt, "plateau_factor");
    c.train.plateau_patience = get<int>(jt, "plateau_patience");
    c.train.early_stop_patience = get<int>(jt, "early_stop_patience");
    c.train.batch_utterances = get<int>(jt, "batch_utterances");
    c.train.max_epochs = get<int>(jt, "max_epochs");
    c.train.shape.hidden_width = get<int>(jt, "hidden_width");
    c.train.shape.hidden_layers = get<int>(jt, "hidden_layers");
    c.train.batch_norm.epsilon = get<double>(jt, "bn_epsilon");
    c.train.batch_norm.momentum = get<double>(jt, "bn_momentum");
    c.train.seed = c.seed;

    const auto& je = j["eval"];
    c.eval.fa_per_hour = get<double>(je, "fa_per_hour");
    c.eval.det_points = get<int>(je, "det_points");
    c.eval.split = get<std::string>(je, "split");
    const auto scorer = get<std::string>(je, "scorer");
    if (scorer == "forward") c.eval.score.method = ScoringMethod::forward;
    else if (scorer == "viterbi") c.eval.score.method = ScoringMethod::viterbi;
    else throw ConfigError(detail::concat("unknown scorer '", scorer, "' (forward|viterbi)"));
    c.eval.score.max_window_frames = get<int>(je, "max_window_frames");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(detail::concat("config: ", e.what()));
  }

  validate(c.features);
  c.train.shape.input_dim = c.features.stacked_dim();
  c.train.shape.num_classes = kNumClasses;
  validate_and_sync(c.train);
  if (c.corpus.positives < 0 || c.corpus.negatives < 0 || c.corpus.positives + c.corpus.negatives == 0)
    throw ConfigError("corpus.positives and corpus.negatives must be non-negative and not both zero");
  if (c.corpus.eval.positives < 0 || c.corpus.eval.negatives < 0)
    throw ConfigError("corpus eval counts must be non-negative");
  if (!(c.corpus.augment.snr_min_db < c.corpus.augment.snr_max_db)) throw ConfigError("need snr_min_db < snr_max_db");
  if (!(c.corpus.augment.rir_decay_min_s > 0.0 && c.corpus.augment.rir_decay_min_s <= c.corpus.augment.rir_decay_max_s))
    throw ConfigError("need 0 < rir_decay_min_s <= rir_decay_max_s");
  if (!(c.corpus.augment.cv_fraction >= 0.0 && c.corpus.augment.cv_fraction < 1.0))
    throw ConfigError("cv_fraction must be in [0, 1)");
  if (!(c.eval.fa_per_hour >= 0.0)) throw ConfigError("fa_per_hour must be non-negative");
  if (c.eval.det_points < 1) throw ConfigError("det_points must be at least 1");
  if (c.eval.split != "eval" && c.eval.split != "train" && c.eval.split != "cv")
    throw ConfigError(detail::concat("unknown eval split '", c.eval.split, "' (eval|train|cv)"));
  const auto& kw = c.corpus.keyword;
  if (kw.state_frames_min < 1 || kw.state_frames_min > kw.state_frames_max || kw.silence_frames_min < 0 ||
      kw.silence_frames_min > kw.silence_frames_max || kw.filler_frames_min < 0 ||
      kw.filler_frames_min > kw.filler_frames_max || kw.negative_frames_min < 1 ||
      kw.negative_frames_min > kw.negative_frames_max || kw.filler_phone_frames_min < 1 ||
      kw.filler_phone_frames_min > kw.filler_phone_frames_max)
    throw ConfigError("corpus.keyword: every *_min must be <= its *_max (and durations positive)");
  return c;
}

/// Fully resolved document: every default filled in, including the
/// data-parameter values taken from the per-mode table.
inline nlohmann::json resolved_document(const RunConfig& c) {
  nlohmann::json j = default_config_document();
  j["seed"] = c.seed;
  j["paths"] = {{"corpus", c.corpus_dir}, {"run", c.run_dir}};
  auto& jc = j["corpus"];
  jc["positives"] = c.corpus.positives;
  jc["negatives"] = c.corpus.negatives;
  jc["clean_only"] = c.corpus.clean_only;
  jc["snr_min_db"] = c.corpus.augment.snr_min_db;
  jc["snr_max_db"] = c.corpus.augment.snr_max_db;
  jc["rir_decay_min_s"] = c.corpus.augment.rir_decay_min_s;
  jc["rir_decay_max_s"] = c.corpus.augment.rir_decay_max_s;
  jc["cv_fraction"] = c.corpus.augment.cv_fraction;
  jc["eval_positives"] = c.corpus.eval.positives;
  jc["eval_negatives"] = c.corpus.eval.negatives;
  jc["eval_negative_frames_min"] = c.corpus.eval.negative_frames_min;
  jc["eval_negative_frames_max"] = c.corpus.eval.negative_frames_max;
  jc["eval_noisy_fraction"] = c.corpus.eval.noisy_fraction;
  const KeywordSpec& k = c.corpus.keyword;
  jc["keyword"] = {{"state_frames_min", k.state_frames_min},
                   {"state_frames_max", k.state_frames_max},
                   {"silence_frames_min", k.silence_frames_min},
                   {"silence_frames_max", k.silence_frames_max},
                   {"filler_frames_min", k.filler_frames_min},
                   {"filler_frames_max", k.filler_frames_max},
                   {"negative_frames_min", k.negative_frames_min},
                   {"negative_frames_max", k.negative_frames_max},
                   {"filler_phone_frames_min", k.filler_phone_frames_min},
                   {"filler_phone_frames_max", k.filler_phone_frames_max},
                   {"near_miss_probability", k.near_miss_probability}};
  j["features"] = {{"sample_rate", c.features.sample_rate},
                   {"window_ms", c.features.window_ms},
                   {"hop_ms", c.features.hop_ms},
                   {"mel_filters", c.features.mel_filters},
                   {"cepstral_coeffs", c.features.cepstral_coeffs},
                   {"context_left", c.features.context_left},
                   {"context_right", c.features.context_right},
                   {"preemphasis", c.features.preemphasis},
                   {"log_floor", c.features.log_floor}};
  const TrainConfig& t = c.train;
  j["train"] = {{"mode", to_string(t.mode)},
                {"data", to_string(c.data)},
                {"class_lr", t.data_params.class_lr},
                {"class_init", t.data_params.class_init},
                {"instance_lr", t.data_params.instance_lr},
                {"instance_init", t.data_params.instance_init},
                {"weight_decay", t.data_params.weight_decay},
                {"momentum", t.data_params.momentum},
                {"model_lr", t.model_lr},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"adam_epsilon", t.adam.epsilon},
                {"plateau_factor", t.plateau_factor},
                {"plateau_patience", t.plateau_patience},
                {"early_stop_patience", t.early_stop_patience},
                {"batch_utterances", t.batch_utterances},
                {"max_epochs", t.max_epochs},
                {"hidden_width", t.shape.hidden_width},
                {"hidden_layers", t.shape.hidden_layers},
                {"bn_epsilon", t.batch_norm.epsilon},
                {"bn_momentum", t.batch_norm.momentum}};
  j["eval"] = {{"fa_per_hour", c.eval.fa_per_hour},
               {"det_points", c.eval.det_points},
               {"split", c.eval.split},
               {"scorer", c.eval.score.method == ScoringMethod::forward ? "forward" : "viterbi"},
               {"max_window_frames", c.eval.score.max_window_frames}};
  return j;
}

/// Relative paths are taken under $DPKWS_RUN_ROOT when it is set.
inline std::filesystem::path resolve_under_root(const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative())
    if (const char* root = std::getenv("DPKWS_RUN_ROOT"); root && *root) return std::filesystem::path(root) / path;
  return path;
}

}  // namespace dpkws
