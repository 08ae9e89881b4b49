// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: synthetic data, training, prediction, ensembles,
// scoring, the climatology baseline and the gradient check.

#include <openssl/crypto.h>
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "cmiwae/cmiwae.hpp"

namespace fs = std::filesystem;
using namespace cmiwae;

namespace {

constexpr int kExitBadFlags = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct UsageError : Error {
  using Error::Error;
};

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Config, inputs and outputs of one command, written as JSON next to the
/// main output.
class RunManifest {
 public:
  RunManifest(std::string command, int argc, char** argv) : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["argv"] = std::vector<std::string>(argv, argv + argc);
    j_["components"] = {{"cmiwae", kVersion},
                        {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                      std::to_string(EIGEN_MINOR_VERSION)},
                        {"openssl", OpenSSL_version(OPENSSL_VERSION)},
                        {"compiler", __VERSION__}};
    j_["inputs"] = Json::array();
    j_["outputs"] = Json::array();
    j_["timings"] = Json::object();
  }

  void config(const Json& c) { j_["config"] = c; }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void input(const std::string& p) { j_["inputs"].push_back(entry(p)); }
  void output(const std::string& p) { j_["outputs"].push_back(entry(p)); }
  void timing(const std::string& name, double seconds) { j_["timings"][name] = seconds; }

  void write(const std::string& path) {
    j_["timings"]["total_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ofstream out(path);
    if (!out) throw DataError("cannot write run manifest " + path);
    out << j_.dump(2) << '\n';
  }

 private:
  static Json entry(const std::string& p) {
    if (fs::is_directory(p)) return {{"path", p}};
    return {{"path", p}, {"bytes", fs::file_size(p)}, {"sha256", sha256_file(p)}};
  }

  Json j_;
  std::chrono::steady_clock::time_point start_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string default_data_dir() {
  const char* env = std::getenv("CMIWAE_DATA_DIR");
  return env && *env ? env : "data";
}

bool parse_on_off(const std::string& s, const char* flag) {
  if (s == "on") return true;
  if (s == "off") return false;
  throw UsageError(std::string("--") + flag + " expects on or off, got '" + s + "'");
}

ThresholdSet thresholds_for(const std::string& data_dir, const std::string& explicit_path, RunManifest* man) {
  std::string path = explicit_path;
  if (path.empty() && fs::exists(fs::path(data_dir) / DatasetFiles::thresholds)) {
    path = (fs::path(data_dir) / DatasetFiles::thresholds).string();
  }
  if (path.empty()) return ThresholdSet::synthetic_default();
  if (man) man->input(path);
  return load_thresholds(path);
}

MaskedDataset load_data(const std::string& dir, RunManifest& man) {
  if (!fs::exists(fs::path(dir) / DatasetFiles::manifest)) throw DataError("no dataset in " + dir);
  std::vector<std::string> warnings;
  MaskedDataset ds = load_dataset(dir, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  man.input(dir);
  return ds;
}

// ---------------------------------------------------------------------------
// gen-data

struct GenOptions {
  std::string out;
  SynthConfig cfg;
};

int cmd_gen_data(const GenOptions& o, RunManifest& man) {
  const auto t0 = std::chrono::steady_clock::now();
  const SyntheticData syn = synthesize(o.cfg);
  const ThresholdSet U = ThresholdSet::synthetic_default();
  const auto written = save_dataset(o.out, syn.data, &syn.truth_x, &U);
  man.timing("generate_seconds", seconds_since(t0));
  man.config({{"out", o.out},
              {"years", o.cfg.years},
              {"w", o.cfg.W},
              {"h", o.cfg.H},
              {"first_year", o.cfg.first_year},
              {"missing_fraction", o.cfg.missing_fraction},
              {"n_layers", o.cfg.n_layers}});
  man.seed(o.cfg.seed);
  for (const auto& p : written) man.output(p);
  man.output((fs::path(o.out) / DatasetFiles::manifest).string());
  man.write((fs::path(o.out) / "run_manifest.json").string());
  std::cout << "wrote " << syn.data.T << " months of " << syn.data.W << "x" << syn.data.H << " to " << o.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train / ensemble-train

struct ArchOptions {
  std::size_t n_layers = 4, latent = 8, kernel = 5;
  std::vector<std::size_t> encoder_widths{16, 16, 16}, aux_widths{8, 8, 8}, decoder_widths{8, 8, 4},
      skip_widths{8, 8, 4};
  std::string obs = "zmln", fittable_prior = "on", skips = "on";

  Architecture build(const MaskedDataset& ds, double dropout) const {
    Architecture a;
    a.n_layers = n_layers;
    a.latent = latent;
    a.kernel = kernel;
    a.grid_w = ds.W;
    a.grid_h = ds.H;
    a.encoder_widths = encoder_widths;
    a.aux_widths = aux_widths;
    a.decoder_widths = decoder_widths;
    a.skip_widths = skip_widths;
    a.observation = parse_observation(obs);
    a.fittable_prior = parse_on_off(fittable_prior, "fittable-prior");
    a.skips = parse_on_off(skips, "skips");
    a.dropout = dropout;
    a.validate();
    return a;
  }
};

struct TrainOptions {
  std::string data = default_data_dir();
  std::string thresholds;
  std::string out = "model.ckpt";
  std::string log;
  std::string state;
  bool resume = false;
  std::size_t split_index = 0;
  std::uint64_t split_seed = 0;
  std::string estimator = "dreg";
  double dropout = 0.10;
  bool quiet = false;
  ArchOptions arch;
  TrainConfig cfg;
  // ensemble-train
  std::size_t models = 5;
  std::size_t jobs = 1;
  std::string out_dir = "ensemble";
};

Estimator parse_estimator(const std::string& s) {
  if (s == "dreg") return Estimator::dreg;
  if (s == "plain") return Estimator::plain;
  if (s == "stl") return Estimator::stl;
  throw UsageError("unknown estimator '" + s + "' (expected dreg, plain or stl)");
}

Split pick_split(const MaskedDataset& ds, std::size_t index, std::uint64_t seed) {
  const auto splits = enumerate_splits(ds.years(), 0, seed);
  if (index >= splits.size()) {
    throw UsageError("--split-index " + std::to_string(index) + " out of range; the plan has " +
                     std::to_string(splits.size()) + " splits");
  }
  return splits[index];
}

Json train_options_json(const TrainOptions& o, const Architecture& a, const Split& s, const TrainConfig& cfg) {
  return {{"data", o.data},
          {"split_index", o.split_index},
          {"split_seed", o.split_seed},
          {"train_years", s.train_years},
          {"validation_years", s.validation_years},
          {"architecture", architecture_to_json(a)},
          {"train", train_config_to_json(cfg)}};
}

/// Trains one model and writes checkpoint, log and manifest. Used by both
/// train and ensemble-train.
void run_training(const TrainOptions& o, const MaskedDataset& ds, const ThresholdSet& U, const std::string& out,
                  const std::string& log_path, const std::string& state_path, RunManifest& man,
                  std::mutex* io_mutex) {
  const auto t0 = std::chrono::steady_clock::now();
  const Architecture arch = o.arch.build(ds, o.dropout);
  TrainConfig cfg = o.cfg;
  cfg.estimator = parse_estimator(o.estimator);
  cfg.validate();
  const Split split = pick_split(ds, o.split_index, o.split_seed);
  man.config(train_options_json(o, arch, split, cfg));
  man.seed(cfg.seed);

  std::optional<Checkpoint> resume;
  if (o.resume && !state_path.empty() && fs::exists(state_path)) {
    resume = load_checkpoint(state_path);
    man.input(state_path);
  }
  const bool append = resume.has_value() && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot write log " + log_path);
  if (!append) log << "epoch,bound,val_score,lr\n";
  auto on_epoch = [&](const EpochLog& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.6g", e.epoch, e.bound, e.val_score, e.lr);
    log << buf << '\n' << std::flush;
    if (e.skipped_steps) {
      log << "# epoch " << e.epoch << ": skipped " << e.skipped_steps << " steps with non-finite gradients\n";
    }
    if (!o.quiet) {
      std::unique_lock<std::mutex> lock;
      if (io_mutex) lock = std::unique_lock<std::mutex>(*io_mutex);
      std::cerr << out << ": " << buf << '\n';
    }
  };
  std::function<void(const Checkpoint&)> on_state;
  if (!state_path.empty()) on_state = [&](const Checkpoint& ck) { save_checkpoint(state_path, ck); };
  const TrainResult r = train(ds, split, arch, U, cfg, on_epoch, resume ? &*resume : nullptr, on_state);
  log.close();
  save_checkpoint(out, r.best);
  man.timing("train_seconds", seconds_since(t0));
  man.output(out);
  man.output(log_path);
  if (!state_path.empty() && fs::exists(state_path)) man.output(state_path);
  man.write(out + ".manifest.json");
}

int cmd_train(const TrainOptions& o, RunManifest& man) {
  const MaskedDataset ds = load_data(o.data, man);
  const ThresholdSet U = thresholds_for(o.data, o.thresholds, &man);
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  run_training(o, ds, U, o.out, o.log.empty() ? o.out + ".log" : o.log, o.state, man, nullptr);
  return 0;
}

int cmd_ensemble_train(const TrainOptions& o, int argc, char** argv) {
  if (o.models < 1) throw UsageError("--models must be at least 1");
  if (o.jobs < 1) throw UsageError("--jobs must be at least 1");
  RunManifest load_man("ensemble-train", argc, argv);
  const MaskedDataset ds = load_data(o.data, load_man);
  const ThresholdSet U = thresholds_for(o.data, o.thresholds, &load_man);
  fs::create_directories(o.out_dir);
  std::atomic<std::size_t> next{0};
  std::mutex io;
  std::vector<std::exception_ptr> errors(o.models);
  auto worker = [&] {
    for (std::size_t m; (m = next++) < o.models;) {
      try {
        TrainOptions member = o;
        member.split_index = o.split_index + m;
        member.cfg.seed = o.cfg.seed + m;
        const std::string base = (fs::path(o.out_dir) / ("member_" + std::to_string(m))).string();
        RunManifest man("ensemble-train", argc, argv);
        man.input(o.data);
        run_training(member, ds, U, base + ".ckpt", base + ".log",
                     o.state.empty() ? std::string() : base + ".state", man, &io);
      } catch (...) {
        errors[m] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::min(o.jobs, o.models); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::cout << "trained " << o.models << " models into " << o.out_dir << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// predict / ensemble-predict / score / baseline

struct PredictCmdOptions {
  std::string data = default_data_dir();
  std::vector<std::string> checkpoints;
  std::string out = "predictions.csv";
  std::string mix = "likelihood";
  std::string diagnostics;
  std::size_t draws = 100;
  std::size_t chunk = 50;
  std::uint64_t seed = 0;
  bool score = false;
};

void write_diagnostics(const std::string& dir, const PredictionSet& pred, const TruthGrid& truth,
                       const ThresholdSet& U, const ScoreReport& rep, RunManifest& man) {
  fs::create_directories(dir);
  const std::string rel = (fs::path(dir) / "reliability.csv").string();
  const std::string hist = (fs::path(dir) / "score_histogram.csv").string();
  {
    std::ofstream a(rel), b(hist);
    if (!a || !b) throw DataError("cannot write diagnostics in " + dir);
    write_reliability_csv(a, pred, truth, U);
    write_score_histogram_csv(b, pred, rep);
  }
  man.output(rel);
  man.output(hist);
}

/// Scores against the dataset's truth file when asked to.
void maybe_score(const PredictCmdOptions& o, const MaskedDataset& ds, const PredictionSet& pred, const ThresholdSet& U,
                 RunManifest& man) {
  if (!o.score && o.diagnostics.empty()) return;
  const std::vector<double> truth_x = load_truth(o.data, ds);
  const TruthGrid truth{ds.T, ds.W, ds.H, &truth_x};
  const ScoreReport rep = score(pred, truth, U);
  if (o.score) {
    const std::string path = o.out + ".score.txt";
    std::ofstream out(path);
    write_score_report(out, rep);
    out.close();
    write_score_report(std::cout, rep);
    man.output(path);
  }
  if (!o.diagnostics.empty()) write_diagnostics(o.diagnostics, pred, truth, U, rep, man);
}

int cmd_predict(const PredictCmdOptions& o, bool ensemble, RunManifest& man) {
  if (o.checkpoints.empty()) throw UsageError("no checkpoint given");
  if (!ensemble && o.checkpoints.size() != 1) throw UsageError("predict takes exactly one --checkpoint");
  const auto t0 = std::chrono::steady_clock::now();
  const MaskedDataset ds = load_data(o.data, man);
  std::vector<CmiwaeModel> models;
  for (const auto& p : o.checkpoints) {
    models.push_back(model_from_checkpoint(load_checkpoint(p)));
    man.input(p);
  }
  const ThresholdSet& U = models.front().thresholds;
  const std::set<CellKey> keys = missing_keys(ds);
  PredictOptions opt;
  opt.draws = o.draws;
  opt.chunk = o.chunk;
  opt.seed = o.seed;
  PredictionSet pred;
  if (ensemble) {
    std::vector<CmiwaeModel*> ptrs;
    for (auto& m : models) ptrs.push_back(&m);
    pred = ensemble_predict(ptrs, ds, keys, opt, parse_mix(o.mix));
  } else {
    pred = predict_keys(models.front(), prepared_for(models.front(), ds), keys, opt).predictions;
  }
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  save_predictions(o.out, pred);
  man.timing("predict_seconds", seconds_since(t0));
  man.config({{"data", o.data},
              {"checkpoints", o.checkpoints},
              {"draws", o.draws},
              {"chunk", o.chunk},
              {"mix", ensemble ? Json(o.mix) : Json(nullptr)}});
  man.seed(o.seed);
  man.output(o.out);
  maybe_score(o, ds, pred, U, man);
  man.write(o.out + ".manifest.json");
  std::cerr << "wrote " << pred.rows.size() << " prediction rows to " << o.out << '\n';
  return 0;
}

struct ScoreCmdOptions {
  std::string data = default_data_dir();
  std::string predictions;
  std::string truth;
  std::string thresholds;
  std::string out;
  std::string diagnostics;
  bool formula_as_printed = false;
};

int cmd_score(const ScoreCmdOptions& o, RunManifest& man) {
  const MaskedDataset ds = load_data(o.data, man);
  const ThresholdSet U = thresholds_for(o.data, o.thresholds, &man);
  const PredictionSet pred = load_predictions(o.predictions);
  man.input(o.predictions);
  std::vector<double> truth_x;
  if (o.truth.empty()) {
    truth_x = load_truth(o.data, ds);
  } else {
    const GridArray g = load_grid(o.truth);
    check_dims(g, ds.T, kXChannels, ds.W, ds.H, "truth");
    truth_x = g.values;
    man.input(o.truth);
  }
  const TruthGrid truth{ds.T, ds.W, ds.H, &truth_x};
  ScoreOptions so;
  so.formula_as_printed = o.formula_as_printed;
  const std::set<CellKey> expected = missing_keys(ds);
  const ScoreReport rep = score(pred, truth, U, so, &expected);
  write_score_report(std::cout, rep);
  man.config({{"data", o.data}, {"predictions", o.predictions}, {"formula_as_printed", o.formula_as_printed}});
  const std::string report = o.out.empty() ? o.predictions + ".score.txt" : o.out;
  {
    std::ofstream out(report);
    if (!out) throw DataError("cannot write " + report);
    write_score_report(out, rep);
  }
  man.output(report);
  if (!o.diagnostics.empty()) write_diagnostics(o.diagnostics, pred, truth, U, rep, man);
  man.write(report + ".manifest.json");
  return 0;
}

struct BaselineOptions {
  std::string data = default_data_dir();
  std::string thresholds;
  std::string out = "baseline.csv";
  std::size_t min_count = 5;
  long split_index = -1;
  std::uint64_t split_seed = 0;
  bool score = false;
};

int cmd_baseline(const BaselineOptions& o, RunManifest& man) {
  const MaskedDataset ds = load_data(o.data, man);
  const ThresholdSet U = thresholds_for(o.data, o.thresholds, &man);
  std::vector<std::size_t> months(ds.T);
  std::iota(months.begin(), months.end(), std::size_t{0});
  if (o.split_index >= 0) {
    months = ds.months_of(pick_split(ds, static_cast<std::size_t>(o.split_index), o.split_seed).train_years);
  }
  const std::set<CellKey> keys = missing_keys(ds);
  const PredictionSet pred = climatology_baseline(ds, months, keys, U, o.min_count);
  save_predictions(o.out, pred);
  man.config({{"data", o.data}, {"split_index", o.split_index}, {"min_count", o.min_count}});
  man.output(o.out);
  if (o.score) {
    const std::vector<double> truth_x = load_truth(o.data, ds);
    const ScoreReport rep = score(pred, TruthGrid{ds.T, ds.W, ds.H, &truth_x}, U);
    std::ofstream out(o.out + ".score.txt");
    write_score_report(out, rep);
    out.close();
    write_score_report(std::cout, rep);
    man.output(o.out + ".score.txt");
  }
  man.write(o.out + ".manifest.json");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckCmdOptions {
  std::uint64_t seed = 11;
  double tolerance = 1e-4;
  double perturb_conv_backward = 1.0;
  std::string out;
};

int cmd_gradcheck(const GradcheckCmdOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Miniature mini = make_miniature(o.seed);
  fault::conv_kernel_grad_scale = o.perturb_conv_backward;
  GradcheckOptions go;
  go.tolerance = o.tolerance;
  const GradcheckReport rep = gradcheck([&] { return mini.loss(); }, mini.model.parameters(), go);
  fault::conv_kernel_grad_scale = 1.0;
  std::ostringstream text;
  char buf[256];
  text << "parameter,entries,max_rel_err,status\n";
  for (const auto& p : rep.params) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.3e,%s\n", p.name.c_str(), p.entries, p.max_rel_err, p.pass ? "ok" : "FAIL");
    text << buf;
  }
  std::snprintf(buf, sizeof buf, "# %s: max rel err %.3e (tolerance %.1e), %.2f s\n", rep.pass ? "PASS" : "FAIL",
                rep.max_rel_err, o.tolerance, seconds_since(t0));
  text << buf;
  std::cout << text.str();
  if (!o.out.empty()) {
    std::ofstream out(o.out);
    out << text.str();
  }
  return rep.pass ? 0 : kExitNumeric;
}

// ---------------------------------------------------------------------------

void add_arch_flags(CLI::App* app, ArchOptions& a) {
  app->add_option("--n-layers", a.n_layers, "Number of layers N_lay");
  app->add_option("--latent", a.latent, "Latent dimension d");
  app->add_option("--kernel", a.kernel, "Convolution kernel size");
  app->add_option("--encoder-widths", a.encoder_widths, "Encoder channel widths")->delimiter(',');
  app->add_option("--aux-widths", a.aux_widths, "Auxiliary encoder channel widths")->delimiter(',');
  app->add_option("--decoder-widths", a.decoder_widths, "Decoder stage input widths")->delimiter(',');
  app->add_option("--skip-widths", a.skip_widths, "Skip channels per decoder stage")->delimiter(',');
  app->add_option("--obs", a.obs, "Observation model: zmln or zmb");
  app->add_option("--fittable-prior", a.fittable_prior, "on or off");
  app->add_option("--skips", a.skips, "on or off");
}

void add_train_flags(CLI::App* app, TrainOptions& o) {
  app->add_option("--data", o.data, "Dataset directory");
  app->add_option("--thresholds", o.thresholds, "Threshold file (default: the dataset's)");
  app->add_option("--split-index", o.split_index, "Index into the enumerated split plan");
  app->add_option("--split-seed", o.split_seed, "Seed of the split plan");
  app->add_option("--epochs", o.cfg.epochs);
  app->add_option("--batch-size", o.cfg.batch_size);
  app->add_option("--K", o.cfg.K, "Importance samples per data sample");
  app->add_option("--lr-start", o.cfg.lr_start);
  app->add_option("--lr-max", o.cfg.lr_max);
  app->add_option("--lr-final", o.cfg.lr_final);
  app->add_option("--beta2", o.cfg.beta2);
  app->add_option("--adam-eps", o.cfg.eps);
  app->add_option("--weight-decay", o.cfg.weight_decay);
  app->add_option("--warmup", o.cfg.warmup, "Warm-up fraction of the one-cycle schedule");
  app->add_option("--clip-norm", o.cfg.clip_norm);
  app->add_option("--dropout", o.dropout);
  app->add_option("--validation-draws", o.cfg.validation_draws);
  app->add_option("--estimator", o.estimator, "dreg, plain or stl");
  app->add_option("--seed", o.cfg.seed);
  app->add_option("--state", o.state, "Resumable training state file, rewritten every epoch");
  app->add_flag("--resume", o.resume, "Continue from --state if it exists");
  app->add_flag("--quiet", o.quiet);
  add_arch_flags(app, o.arch);
}

void add_predict_flags(CLI::App* app, PredictCmdOptions& o) {
  app->add_option("--data", o.data, "Dataset directory");
  app->add_option("--out", o.out, "Prediction file");
  app->add_option("--draws", o.draws, "Importance samples J");
  app->add_option("--chunk", o.chunk, "Draws decoded per pass");
  app->add_option("--seed", o.seed);
  app->add_flag("--score", o.score, "Score against the dataset's truth file");
  app->add_option("--diagnostics", o.diagnostics, "Directory for reliability and histogram CSVs");
}

/// Expands `--config FILE` into explicit flags. Keys of the flat
/// `key = value` file name long flags (underscores may stand for dashes);
/// a key already given on the command line keeps its command-line value.
/// `true`/`false` values switch plain flags on or off.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<long>(i));
      break;
    }
  }
  if (path.empty()) return args;
  if (args.size() < 2) throw UsageError("--config needs a subcommand");
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config file " + path);
  const KeyValues kv = parse_key_values(in, path);
  auto given = [&](const std::string& flag) {
    for (std::size_t i = 2; i < args.size(); ++i) {
      if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> extra;
  for (const auto& [name, value] : kv) {
    std::string key = name;
    std::replace(key.begin(), key.end(), '_', '-');
    const std::string flag = "--" + key;
    if (given(flag)) continue;
    if (value == "true") {
      extra.push_back(flag);
    } else if (value != "false") {
      extra.push_back(flag);
      extra.push_back(value);
    }
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

int run(int argc_in, char** argv_in) {
  const std::vector<std::string> expanded = expand_config(argc_in, argv_in);
  std::vector<char*> argv_vec;
  for (const auto& a : expanded) argv_vec.push_back(const_cast<char*>(a.c_str()));
  const int argc = static_cast<int>(argv_vec.size());
  char** argv = argv_vec.data();
  std::string config_help;
  CLI::App app{"Conditional missing-data importance-weighted autoencoder for wildfire data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  GenOptions gen;
  gen.out = default_data_dir();
  auto* g = app.add_subcommand("gen-data", "Write a synthetic dataset");
  g->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  g->set_help_flag("--help", "Print this help message and exit");  // frees -h for --h
  g->add_option("--out", gen.out, "Output directory");
  g->add_option("--years", gen.cfg.years);
  g->add_option("--w", gen.cfg.W);
  g->add_option("--h", gen.cfg.H);
  g->add_option("--first-year", gen.cfg.first_year);
  g->add_option("--missing-fraction", gen.cfg.missing_fraction);
  g->add_option("--n-layers", gen.cfg.n_layers, "Grid must be divisible by 2^(n_layers-2)");
  g->add_option("--seed", gen.cfg.seed);

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train one model on one split");
  t->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  add_train_flags(t, tr);
  t->add_option("--out", tr.out, "Checkpoint path");
  t->add_option("--log", tr.log, "Metric log (default: <out>.log)");

  TrainOptions et;
  auto* e = app.add_subcommand("ensemble-train", "Train models on consecutive splits of the plan");
  e->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  add_train_flags(e, et);
  e->add_option("--models", et.models, "Number of ensemble members");
  e->add_option("--jobs", et.jobs, "Parallel workers");
  e->add_option("--out-dir", et.out_dir, "Directory for member checkpoints");

  PredictCmdOptions pr;
  std::string pr_ckpt;
  auto* p = app.add_subcommand("predict", "Predict CDFs for every missing cell");
  p->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  add_predict_flags(p, pr);
  p->add_option("--checkpoint", pr_ckpt, "Model checkpoint")->required();

  PredictCmdOptions ep;
  auto* q = app.add_subcommand("ensemble-predict", "Mix predictions of several checkpoints");
  q->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  add_predict_flags(q, ep);
  q->add_option("--checkpoints", ep.checkpoints, "Model checkpoints")->delimiter(',')->required();
  q->add_option("--mix", ep.mix, "likelihood or uniform");

  ScoreCmdOptions sc;
  auto* s = app.add_subcommand("score", "Score a prediction file");
  s->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  s->add_option("--data", sc.data, "Dataset directory");
  s->add_option("--predictions", sc.predictions, "Prediction file")->required();
  s->add_option("--truth", sc.truth, "Truth grid (default: the dataset's)");
  s->add_option("--thresholds", sc.thresholds);
  s->add_option("--out", sc.out, "Report path (default: <predictions>.score.txt)");
  s->add_option("--diagnostics", sc.diagnostics, "Directory for reliability and histogram CSVs");
  s->add_flag("--formula-as-printed", sc.formula_as_printed, "Use the CNT weight formula for BA too");

  BaselineOptions bl;
  auto* b = app.add_subcommand("baseline", "Climatology baseline predictions");
  b->add_option("--config", config_help, "Flat key = value file of flags; command-line flags win");
  b->add_option("--data", bl.data, "Dataset directory");
  b->add_option("--thresholds", bl.thresholds);
  b->add_option("--out", bl.out, "Prediction file");
  b->add_option("--min-count", bl.min_count, "Per-cell observations needed before falling back to the pooled CDF");
  b->add_option("--split-index", bl.split_index, "Use only the training years of this split (default: all months)");
  b->add_option("--split-seed", bl.split_seed);
  b->add_flag("--score", bl.score);

  GradcheckCmdOptions gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check on a miniature model");
  c->add_option("--seed", gc.seed);
  c->add_option("--tolerance", gc.tolerance);
  c->add_option("--perturb-conv-backward", gc.perturb_conv_backward, "Scale conv kernel gradients (negative control)");
  c->add_option("--out", gc.out, "Report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitBadFlags;
  }

  if (*g) {
    RunManifest man("gen-data", argc, argv);
    return cmd_gen_data(gen, man);
  }
  if (*t) {
    RunManifest man("train", argc, argv);
    return cmd_train(tr, man);
  }
  if (*e) return cmd_ensemble_train(et, argc, argv);
  if (*p) {
    pr.checkpoints = {pr_ckpt};
    RunManifest man("predict", argc, argv);
    return cmd_predict(pr, false, man);
  }
  if (*q) {
    RunManifest man("ensemble-predict", argc, argv);
    return cmd_predict(ep, true, man);
  }
  if (*s) {
    RunManifest man("score", argc, argv);
    return cmd_score(sc, man);
  }
  if (*b) {
    RunManifest man("baseline", argc, argv);
    return cmd_baseline(bl, man);
  }
  if (*c) return cmd_gradcheck(gc);
  return kExitBadFlags;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    // Remaining library errors come from invalid settings.
    std::cerr << "error: " << e.what() << '\n';
    return kExitBadFlags;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
