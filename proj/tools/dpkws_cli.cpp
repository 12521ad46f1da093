// dpkws: corpus generation, training, evaluation and reporting.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 runtime fault.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpkws/dpkws.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Exclusive marker file; a second writer fails instead of interleaving output.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f)
      dpkws::fail("directory ", dir.string(), " is locked by another process (remove ", path_.string(),
                  " if that process is gone)");
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

// Flags that were actually given, as a config overlay.
class Overlay {
 public:
  template <class T>
  void set_if(const CLI::Option* opt, const char* a, const char* b, const T& value) {
    if (opt->count() > 0) doc_[a][b] = value;
  }
  template <class T>
  void set_if(const CLI::Option* opt, const char* a, const T& value) {
    if (opt->count() > 0) doc_[a] = value;
  }
  const json& doc() const { return doc_; }

 private:
  json doc_ = json::object();
};

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
};

dpkws::RunConfig resolve(const std::string& config_path, const std::optional<fs::path>& fallback, const Overlay& ov) {
  json doc = json::object();
  if (!config_path.empty()) doc = dpkws::load_config_file(config_path);
  else if (fallback && fs::exists(*fallback)) doc = dpkws::load_config_file(*fallback);
  doc = dpkws::merge_config(dpkws::merge_config(dpkws::default_config_document(), doc), ov.doc());
  return dpkws::parse_run_config(doc);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) dpkws::fail("cannot write ", path.string());
  os << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) dpkws::fail("cannot write ", path.string());
  return os;
}

// ---------------------------------------------------------------------------

void cmd_gen(const dpkws::RunConfig& c) {
  const fs::path dir = dpkws::resolve_under_root(c.corpus_dir);
  DirectoryLock lock(dir);
  const int sr = c.features.sample_rate;
  std::cerr << "generating " << c.corpus.positives << " positives and " << c.corpus.negatives
            << " negatives (seed " << c.seed << ")\n";
  auto clean = dpkws::generate_corpus(c.seed, {c.corpus.positives, c.corpus.negatives}, c.corpus.keyword, c.features);
  const auto bank = dpkws::make_noise_bank(c.seed, sr);
  std::vector<dpkws::Utterance> all =
      c.corpus.clean_only ? dpkws::assign_cv(std::move(clean), c.seed, c.corpus.augment.cv_fraction)
                          : dpkws::build_multicondition(clean, bank, c.seed, c.corpus.augment, sr);
  std::int64_t next_id = 0;
  for (const auto& u : all) next_id = std::max(next_id, u.id + 1);
  auto eval = dpkws::generate_eval_set(c.seed, next_id, c.corpus.eval, c.corpus.keyword,
                                       c.corpus.clean_only ? std::vector<dpkws::Noise>{} : bank, c.corpus.augment,
                                       c.features);
  for (auto& u : eval) all.push_back(std::move(u));
  dpkws::write_corpus(dir, all, sr);
  json resolved = dpkws::resolved_document(c);
  write_json(dir / "corpus_config.json", resolved);
  std::cerr << "wrote " << all.size() << " utterances to " << dir.string() << '\n';
}

void cmd_train(const dpkws::RunConfig& c) {
  const fs::path corpus = dpkws::resolve_under_root(c.corpus_dir);
  const fs::path run = dpkws::resolve_under_root(c.run_dir);
  if (!fs::exists(corpus / "manifest.jsonl")) dpkws::fail("no corpus manifest at ", (corpus / "manifest.jsonl").string());
  DirectoryLock lock(run);
  write_json(run / "run_config.json", dpkws::resolved_document(c));

  std::vector<dpkws::Utterance> utts;
  for (auto& u : dpkws::read_corpus(corpus))
    if (u.split != dpkws::Split::eval) utts.push_back(std::move(u));
  const bool clean_only = c.data == dpkws::DataCondition::clean;
  const auto splits = dpkws::featurize_splits(utts, c.features, clean_only);
  utts.clear();
  std::cerr << "training " << to_string(c.train.mode) << " on " << splits.train.size() << " utterances ("
            << splits.cv.size() << " cv)\n";

  const auto hmm = dpkws::keyword_hmm_from(splits.train);
  write_json(run / "hmm.json", dpkws::to_json(hmm));

  fs::remove_all(run / "sigma");
  std::ofstream log = open_out(run / "train_log.jsonl");
  dpkws::TrainCallbacks cb;
  cb.on_epoch = [&](const dpkws::EpochLog& e) {
    log << dpkws::to_json(e).dump() << '\n' << std::flush;
    std::cerr << "epoch " << e.epoch << "  train " << e.train_loss << "  cv " << e.cv_loss << "  lr " << e.model_lr
              << (e.stopped_early ? "  (early stop)" : "") << '\n';
  };
  cb.on_sigma_snapshot = [&](int epoch, const dpkws::DataParameterStore& store, std::span<const std::int64_t> ids) {
    fs::create_directories(run / "sigma");
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".csv";
    std::ofstream os = open_out(run / "sigma" / name.str());
    dpkws::write_sigma_snapshot(os, epoch, store, ids);
  };
  const auto res = dpkws::train(c.train, splits.train, splits.cv, cb);

  dpkws::save_model(run / "checkpoint.bin", res.model);
  std::size_t best = 0;
  for (std::size_t i = 1; i < res.log.size(); ++i)
    if (res.log[i].cv_loss < res.log[best].cv_loss) best = i;
  const auto& shape = res.model.shape;
  json sidecar = {{"format", "DPKW"},
                  {"format_version", dpkws::kContainerVersion},
                  {"architecture",
                   {{"input_dim", shape.input_dim},
                    {"hidden_width", shape.hidden_width},
                    {"hidden_layers", shape.hidden_layers},
                    {"num_classes", shape.num_classes}}},
                  {"batch_norm", {{"epsilon", res.model.batch_norm.epsilon}, {"momentum", res.model.batch_norm.momentum}}},
                  {"hyperparameters", dpkws::resolved_document(c)["train"]},
                  {"seed", c.seed},
                  {"epochs_run", res.log.size()},
                  {"best_epoch", res.log[best].epoch},
                  {"best_cv_loss", res.log[best].cv_loss},
                  {"train_utterances", splits.train.size()},
                  {"cv_utterances", splits.cv.size()},
                  {"saturated_frames", res.saturated_frames},
                  {"skipped_data_parameter_updates", res.data_parameters.skipped_updates()}};
  write_json(run / "checkpoint.json", sidecar);
}

void cmd_eval(const dpkws::RunConfig& c, const std::string& out_dir, bool svg) {
  const fs::path corpus = dpkws::resolve_under_root(c.corpus_dir);
  const fs::path run = dpkws::resolve_under_root(c.run_dir);
  const fs::path out = out_dir.empty() ? run : dpkws::resolve_under_root(out_dir);
  if (!fs::exists(run / "checkpoint.bin")) dpkws::fail("no checkpoint at ", (run / "checkpoint.bin").string());
  if (!fs::exists(run / "hmm.json")) dpkws::fail("no keyword HMM at ", (run / "hmm.json").string());
  if (!fs::exists(corpus / "manifest.jsonl")) dpkws::fail("no corpus manifest at ", (corpus / "manifest.jsonl").string());
  DirectoryLock lock(out);
  const auto model = dpkws::load_model(run / "checkpoint.bin");
  if (model.shape.input_dim != c.features.stacked_dim())
    throw dpkws::ConfigError(dpkws::detail::concat("checkpoint expects ", model.shape.input_dim,
                                                   "-dim features but the frame spec gives ", c.features.stacked_dim()));
  std::ifstream hs(run / "hmm.json");
  const auto hmm = dpkws::keyword_hmm_from_json(json::parse(hs));
  const auto utts = dpkws::read_corpus(corpus, dpkws::split_from_string(c.eval.split));
  if (utts.empty()) dpkws::fail("corpus has no '", c.eval.split, "' utterances");
  const auto trials = dpkws::score_utterances(model, hmm, utts, c.features, c.eval.score);

  {
    std::vector<dpkws::UtteranceScore> scores;
    for (const auto& t : trials) scores.push_back({t.utterance_id, t.score, t.is_positive});
    std::ofstream os = open_out(out / "scores.csv");
    dpkws::write_scores(os, scores);
  }
  const auto op = dpkws::frr_at_fa_rate(trials, c.eval.fa_per_hour);
  const auto det = dpkws::det_curve(trials, c.eval.det_points, c.eval.fa_per_hour);
  {
    std::ofstream os = open_out(out / "det.csv");
    dpkws::write_det_csv(os, det);
  }
  if (svg) {
    std::ofstream os = open_out(out / "det.svg");
    dpkws::render_det_svg(os, det);
  }
  std::size_t pos = 0;
  for (const auto& t : trials) pos += t.is_positive ? 1 : 0;
  json metrics = {{"split", c.eval.split},
                  {"fa_per_hour_target", c.eval.fa_per_hour},
                  {"frr", op.frr},
                  {"threshold", op.reachable ? json(op.threshold) : json(nullptr)},
                  {"reachable", op.reachable},
                  {"false_alarms", op.false_alarms},
                  {"fa_per_hour_achieved", op.fa_per_hour},
                  {"positives", pos},
                  {"negatives", trials.size() - pos},
                  {"negative_hours", dpkws::negative_hours(trials)},
                  {"scorer", c.eval.score.method == dpkws::ScoringMethod::forward ? "forward" : "viterbi"}};
  write_json(out / "metrics.json", metrics);
  write_json(out / "eval_config.json", dpkws::resolved_document(c));
  std::cerr << "FRR " << op.frr << " at " << c.eval.fa_per_hour << " FA/h"
            << (op.reachable ? "" : " (target unreachable: nothing accepted)") << '\n';
}

void cmd_report(const dpkws::RunConfig& c, const std::string& out_dir, bool svg) {
  const fs::path corpus = dpkws::resolve_under_root(c.corpus_dir);
  const fs::path run = dpkws::resolve_under_root(c.run_dir);
  const fs::path out = out_dir.empty() ? run : dpkws::resolve_under_root(out_dir);
  const fs::path sigma = run / "sigma";
  if (!fs::is_directory(sigma)) dpkws::fail("no sigma snapshots under ", sigma.string(), " (baseline run?)");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(sigma))
    if (e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) dpkws::fail("no sigma snapshots under ", sigma.string());
  std::vector<dpkws::SigmaSnapshotRow> rows;
  for (const auto& f : files) {
    std::ifstream is(f);
    for (auto& r : dpkws::read_sigma_snapshot(is)) rows.push_back(std::move(r));
  }
  const auto manifest = dpkws::read_manifest(corpus / "manifest.jsonl");
  const auto report = dpkws::sigma_distribution_report(rows, manifest);
  DirectoryLock lock(out);
  {
    std::ofstream os = open_out(out / "sigma_report.csv");
    dpkws::write_sigma_report(os, report);
  }
  if (svg) {
    std::ofstream os = open_out(out / "sigma_report.svg");
    dpkws::render_sigma_svg(os, report);
  }
  std::cerr << "summarised " << report.size() << " epochs\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-parameter curriculum training for a DNN-HMM keyword spotter"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic multicondition corpus");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  int gen_pos = 0, gen_neg = 0, gen_epos = 0, gen_eneg = 0;
  double gen_cv = 0;
  bool gen_clean = false;
  gen->add_option("--config", gen_config, "JSON config file");
  auto* o_gen_out = gen->add_option("--out,--corpus", gen_out, "Corpus directory");
  auto* o_gen_seed = gen->add_option("--seed", gen_seed, "Master seed");
  auto* o_gen_pos = gen->add_option("--positives", gen_pos, "Clean keyword utterances");
  auto* o_gen_neg = gen->add_option("--negatives", gen_neg, "Clean non-keyword utterances");
  auto* o_gen_epos = gen->add_option("--eval-positives", gen_epos, "Evaluation keyword utterances");
  auto* o_gen_eneg = gen->add_option("--eval-negatives", gen_eneg, "Evaluation non-keyword utterances");
  auto* o_gen_cv = gen->add_option("--cv-fraction", gen_cv, "Fraction of clean sources held out for cv");
  auto* o_gen_clean = gen->add_flag("--clean-only", gen_clean, "Skip noise augmentation");

  // train
  auto* trn = app.add_subcommand("train", "Train an acoustic model");
  std::string trn_config, trn_corpus, trn_run, trn_mode, trn_data;
  std::uint64_t trn_seed = 0;
  int trn_epochs = 0, trn_batch = 0, trn_width = 0, trn_layers = 0;
  double trn_clr = 0, trn_cinit = 0, trn_ilr = 0, trn_iinit = 0, trn_wd = 0, trn_mlr = 0;
  trn->add_option("--config", trn_config, "JSON config file");
  auto* o_trn_corpus = trn->add_option("--corpus", trn_corpus, "Corpus directory");
  auto* o_trn_run = trn->add_option("--run", trn_run, "Run directory");
  auto* o_trn_seed = trn->add_option("--seed", trn_seed, "Master seed");
  auto* o_trn_mode = trn->add_option("--mode", trn_mode, "baseline|class|instance|joint");
  auto* o_trn_data = trn->add_option("--data", trn_data, "clean|noisy (selects defaults and training data)");
  auto* o_trn_epochs = trn->add_option("--max-epochs", trn_epochs, "Epoch limit");
  auto* o_trn_batch = trn->add_option("--batch-utterances", trn_batch, "Utterances per minibatch");
  auto* o_trn_width = trn->add_option("--hidden-width", trn_width, "Hidden units per layer");
  auto* o_trn_layers = trn->add_option("--hidden-layers", trn_layers, "Hidden layer count");
  auto* o_trn_clr = trn->add_option("--class-lr", trn_clr, "Class parameter learning rate");
  auto* o_trn_cinit = trn->add_option("--class-init", trn_cinit, "Class parameter initial value");
  auto* o_trn_ilr = trn->add_option("--instance-lr", trn_ilr, "Instance parameter learning rate");
  auto* o_trn_iinit = trn->add_option("--instance-init", trn_iinit, "Instance parameter initial value");
  auto* o_trn_wd = trn->add_option("--weight-decay", trn_wd, "Weight on (log sigma*)^2");
  auto* o_trn_mlr = trn->add_option("--model-lr", trn_mlr, "Initial Adam learning rate");

  // eval
  auto* evl = app.add_subcommand("eval", "Score a split and compute FRR at a false-alarm rate");
  std::string evl_config, evl_corpus, evl_run, evl_split, evl_scorer, evl_out;
  double evl_fa = 0;
  int evl_points = 0;
  bool evl_svg = false;
  evl->add_option("--config", evl_config, "JSON config file (default: <run>/run_config.json)");
  auto* o_evl_corpus = evl->add_option("--corpus", evl_corpus, "Corpus directory");
  auto* o_evl_run = evl->add_option("--run", evl_run, "Run directory holding the checkpoint");
  auto* o_evl_fa = evl->add_option("--fa-per-hour", evl_fa, "Operating point");
  auto* o_evl_points = evl->add_option("--det-points", evl_points, "DET curve points");
  auto* o_evl_split = evl->add_option("--split", evl_split, "eval|train|cv");
  auto* o_evl_scorer = evl->add_option("--scorer", evl_scorer, "forward|viterbi");
  evl->add_option("--out", evl_out, "Output directory (default: run directory)");
  evl->add_flag("--svg", evl_svg, "Also write det.svg");

  // report
  auto* rep = app.add_subcommand("report", "Summarise sigma snapshots per epoch");
  std::string rep_config, rep_corpus, rep_run, rep_out;
  bool rep_svg = false;
  rep->add_option("--config", rep_config, "JSON config file (default: <run>/run_config.json)");
  auto* o_rep_corpus = rep->add_option("--corpus", rep_corpus, "Corpus directory");
  auto* o_rep_run = rep->add_option("--run", rep_run, "Run directory");
  rep->add_option("--out", rep_out, "Output directory (default: run directory)");
  rep->add_flag("--svg", rep_svg, "Also write sigma_report.svg");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    Overlay ov;
    if (*gen) {
      ov.set_if(o_gen_out, "paths", "corpus", gen_out);
      ov.set_if(o_gen_seed, "seed", gen_seed);
      ov.set_if(o_gen_pos, "corpus", "positives", gen_pos);
      ov.set_if(o_gen_neg, "corpus", "negatives", gen_neg);
      ov.set_if(o_gen_epos, "corpus", "eval_positives", gen_epos);
      ov.set_if(o_gen_eneg, "corpus", "eval_negatives", gen_eneg);
      ov.set_if(o_gen_cv, "corpus", "cv_fraction", gen_cv);
      ov.set_if(o_gen_clean, "corpus", "clean_only", gen_clean);
      cmd_gen(resolve(gen_config, std::nullopt, ov));
    } else if (*trn) {
      ov.set_if(o_trn_corpus, "paths", "corpus", trn_corpus);
      ov.set_if(o_trn_run, "paths", "run", trn_run);
      ov.set_if(o_trn_seed, "seed", trn_seed);
      ov.set_if(o_trn_mode, "train", "mode", trn_mode);
      ov.set_if(o_trn_data, "train", "data", trn_data);
      ov.set_if(o_trn_epochs, "train", "max_epochs", trn_epochs);
      ov.set_if(o_trn_batch, "train", "batch_utterances", trn_batch);
      ov.set_if(o_trn_width, "train", "hidden_width", trn_width);
      ov.set_if(o_trn_layers, "train", "hidden_layers", trn_layers);
      ov.set_if(o_trn_clr, "train", "class_lr", trn_clr);
      ov.set_if(o_trn_cinit, "train", "class_init", trn_cinit);
      ov.set_if(o_trn_ilr, "train", "instance_lr", trn_ilr);
      ov.set_if(o_trn_iinit, "train", "instance_init", trn_iinit);
      ov.set_if(o_trn_wd, "train", "weight_decay", trn_wd);
      ov.set_if(o_trn_mlr, "train", "model_lr", trn_mlr);
      cmd_train(resolve(trn_config, std::nullopt, ov));
    } else if (*evl) {
      ov.set_if(o_evl_corpus, "paths", "corpus", evl_corpus);
      ov.set_if(o_evl_run, "paths", "run", evl_run);
      ov.set_if(o_evl_fa, "eval", "fa_per_hour", evl_fa);
      ov.set_if(o_evl_points, "eval", "det_points", evl_points);
      ov.set_if(o_evl_split, "eval", "split", evl_split);
      ov.set_if(o_evl_scorer, "eval", "scorer", evl_scorer);
      std::optional<fs::path> fallback;
      if (!evl_run.empty()) fallback = dpkws::resolve_under_root(evl_run) / "run_config.json";
      cmd_eval(resolve(evl_config, fallback, ov), evl_out, evl_svg);
    } else if (*rep) {
      ov.set_if(o_rep_corpus, "paths", "corpus", rep_corpus);
      ov.set_if(o_rep_run, "paths", "run", rep_run);
      std::optional<fs::path> fallback;
      if (!rep_run.empty()) fallback = dpkws::resolve_under_root(rep_run) / "run_config.json";
      cmd_report(resolve(rep_config, fallback, ov), rep_out, rep_svg);
    }
  } catch (const dpkws::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
