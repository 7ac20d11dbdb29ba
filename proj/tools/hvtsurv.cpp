// hvtsurv: cohort synthesis, slide rearrangement, cross-validated training,
// evaluation and attention export from the command line.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hvtsurv/bagio.hpp"
#include "hvtsurv/checkpoint.hpp"
#include "hvtsurv/error.hpp"
#include "hvtsurv/pipeline.hpp"
#include "hvtsurv/rearrange.hpp"
#include "hvtsurv/survmodel.hpp"
#include "hvtsurv/synthgen.hpp"

namespace fs = std::filesystem;
using namespace hvtsurv;

namespace {

// ----------------------------------------------------------------- logging

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };
LogLevel g_log_level = LogLevel::Info;

LogLevel parse_log_level() {
  const char* env = std::getenv("HVTSURV_LOG");
  if (!env || !*env) return LogLevel::Info;
  const std::string v = env;
  if (v == "error") return LogLevel::Error;
  if (v == "info") return LogLevel::Info;
  if (v == "debug") return LogLevel::Debug;
  fail(ErrorKind::Config, "HVTSURV_LOG must be one of error, info, debug (got '" + v + "')");
}

void log(LogLevel level, const std::string& msg) {
  if (level > g_log_level) return;
  static const char* tags[] = {"error", "info", "debug"};
  std::cerr << "[hvtsurv " << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Numeric:
    case ErrorKind::Io:
    case ErrorKind::UndefinedStatistic:
      return 2;
    default:
      return 1;
  }
}

// ------------------------------------------------------------- run folder

std::uint64_t fnv1a_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 14];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

/// Output directory bookkeeping: refuses to overwrite existing files or any
/// input unless told to, and records every produced file in outputs.csv.
class RunDir {
 public:
  RunDir(fs::path root, bool force, std::set<fs::path> inputs)
      : root_(std::move(root)), force_(force), inputs_(std::move(inputs)) {
    require(!root_.empty(), ErrorKind::Validation, "--out is required");
    require(!fs::exists(root_) || fs::is_directory(root_), ErrorKind::Validation,
            "--out " + root_.string() + " exists and is not a directory");
  }

  /// Validates every planned output before any work starts.
  void claim(const std::vector<fs::path>& relative) {
    for (const auto& rel : relative) check(root_ / rel);
    check(root_ / kManifest);
  }

  fs::path path(const fs::path& relative) {
    const auto p = root_ / relative;
    fs::create_directories(p.parent_path());
    return p;
  }

  void produced(const fs::path& relative) { produced_.push_back(relative); }

  void finish() {
    std::sort(produced_.begin(), produced_.end());
    std::ofstream os(path(kManifest), std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot write " + (root_ / kManifest).string());
    os << "path,bytes,fnv1a64\n";
    char hash[24];
    for (const auto& rel : produced_) {
      const auto full = root_ / rel;
      std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(fnv1a_file(full)));
      os << rel.generic_string() << ',' << fs::file_size(full) << ',' << hash << '\n';
    }
    if (!os) fail(ErrorKind::Io, "write to " + (root_ / kManifest).string() + " failed");
    const auto n = produced_.size();
    log(LogLevel::Info, "wrote " + std::to_string(n) + (n == 1 ? " file" : " files") + " under " + root_.string());
  }

 private:
  static constexpr const char* kManifest = "outputs.csv";

  void check(const fs::path& p) {
    const auto canonical = fs::weakly_canonical(p);
    require(!inputs_.count(canonical), ErrorKind::Validation, "output " + p.string() + " would overwrite an input");
    require(force_ || !fs::exists(p), ErrorKind::Validation,
            "output " + p.string() + " already exists (use --force to overwrite)");
  }

  fs::path root_;
  bool force_;
  std::set<fs::path> inputs_;
  std::vector<fs::path> produced_;
};

std::set<fs::path> canonical_set(const std::vector<fs::path>& paths) {
  std::set<fs::path> out;
  for (const auto& p : paths) out.insert(fs::weakly_canonical(p));
  return out;
}

std::vector<fs::path> manifest_inputs(const fs::path& manifest, const std::vector<PatientRecord>& records) {
  std::vector<fs::path> out{manifest};
  for (const auto& r : records) out.insert(out.end(), r.bag_paths.begin(), r.bag_paths.end());
  return out;
}

void require_file(const fs::path& p, const std::string& what) {
  require(!p.empty(), ErrorKind::Validation, what + " is required");
  require(fs::is_regular_file(p), ErrorKind::Resolution, what + " " + p.string() + " does not exist");
}

// ----------------------------------------------------------------- options

struct Common {
  std::uint64_t seed = 0;
  int jobs = 1;
  fs::path out;
  bool force = false;
};

struct SynthOptions {
  SynthConfig cfg;
};

struct RearrangeOptions {
  fs::path manifest;
  std::vector<fs::path> bags;
  int window_size = 49;
  bool raster = false;
  bool report = false;
};

struct TrainOptions {
  fs::path manifest;
  HVTSurvConfig model;
  int folds = 4;
  bool parallel_folds = false;
};

struct EvalOptions {
  fs::path manifest;
  fs::path checkpoint_dir;
};

struct AttnOptions {
  fs::path manifest;
  fs::path checkpoint;
  std::string patient;
  double drop = 0.8;
};

// ---------------------------------------------------------------- commands

void cmd_synth(const Common& c, SynthOptions o) {
  o.cfg.seed = c.seed;
  o.cfg.validate();
  RunDir run(c.out, c.force, {});
  run.claim({"manifest.csv", "bags"});
  log(LogLevel::Info, "generating " + std::to_string(o.cfg.n_patients) + " patients");
  const auto records = gen_cohort(o.cfg);
  write_cohort(records, run.path(""));

  std::size_t wsis = 0;
  std::size_t patches = 0;
  std::size_t censored = 0;
  run.produced("manifest.csv");
  for (const auto& r : records) {
    censored += r.follow_up.censored;
    for (const auto& b : r.bags) {
      ++wsis;
      patches += b.size();
      const fs::path rel = fs::path("bags") / (b.wsi_id + ".pbag");
      read_patch_bag(c.out / rel);
      run.produced(rel);
    }
  }
  // The manifest must load back as written.
  require(load_manifest(c.out / "manifest.csv").size() == records.size(), ErrorKind::Corruption,
          "written manifest does not round-trip");
  run.finish();
  std::printf("patients,wsis,patches,censored_ratio\n%zu,%zu,%zu,%.4f\n", records.size(), wsis, patches,
              records.empty() ? 0.0 : static_cast<double>(censored) / static_cast<double>(records.size()));
}

int cmd_rearrange(const Common& c, const RearrangeOptions& o) {
  require(o.window_size >= 1, ErrorKind::Config, "--window-size must be >= 1");
  std::vector<fs::path> inputs = o.bags;
  if (!o.manifest.empty()) {
    require_file(o.manifest, "--manifest");
    for (const auto& r : load_manifest(o.manifest)) inputs.insert(inputs.end(), r.bag_paths.begin(), r.bag_paths.end());
  }
  require(!inputs.empty(), ErrorKind::Validation, "no input bags (pass files or --manifest)");

  std::vector<fs::path> planned;
  std::set<std::string> ids;
  for (const auto& in : inputs) {
    const auto id = in.stem().string();
    require(ids.insert(id).second, ErrorKind::Validation, "two inputs share the slide id '" + id + "'");
    planned.push_back(fs::path("rearranged") / (id + ".pbag"));
    planned.push_back(fs::path("rearranged") / (id + ".windows.csv"));
    if (o.raster) {
      planned.push_back(fs::path("raster") / (id + ".pbag"));
      planned.push_back(fs::path("raster") / (id + ".windows.csv"));
    }
  }
  if (o.report) planned.emplace_back("rearrange_report.csv");
  auto input_set = canonical_set(inputs);
  if (!o.manifest.empty()) input_set.insert(fs::weakly_canonical(o.manifest));
  RunDir run(c.out, c.force, input_set);
  run.claim(planned);
  fs::create_directories(c.out / "rearranged");
  if (o.raster) fs::create_directories(c.out / "raster");

  struct Row {
    std::string id;
    std::size_t patches = 0;
    double knn = 0.0;
    double raster = 0.0;
    std::string error;
  };
  std::vector<Row> rows(inputs.size());
  parallel_for(inputs.size(), c.jobs, [&](std::size_t i) {
    auto& row = rows[i];
    row.id = inputs[i].stem().string();
    try {
      const auto bag = read_patch_bag(inputs[i]);
      row.patches = bag.size();
      const auto knn = knn_rearrange(bag, o.window_size);
      row.knn = window_mean_manhattan(knn);
      const auto base = c.out / "rearranged" / row.id;
      write_patch_bag(to_patch_bag(knn), base.string() + ".pbag", BagCheck::AllowDuplicates);
      write_window_sidecar(knn, base.string() + ".windows.csv");
      read_patch_bag(base.string() + ".pbag", BagCheck::AllowDuplicates);
      if (o.raster || o.report) {
        const auto ras = raster_order(bag, o.window_size);
        row.raster = window_mean_manhattan(ras);
        if (o.raster) {
          const auto rbase = c.out / "raster" / row.id;
          write_patch_bag(to_patch_bag(ras), rbase.string() + ".pbag", BagCheck::AllowDuplicates);
          write_window_sidecar(ras, rbase.string() + ".windows.csv");
        }
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
  });

  int failed = 0;
  int worst = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (!row.error.empty()) {
      ++failed;
      worst = 1;
      log(LogLevel::Error, inputs[i].string() + ": " + row.error);
      continue;
    }
    log(LogLevel::Debug, row.id + ": " + std::to_string(row.patches) + " patches");
    run.produced(fs::path("rearranged") / (row.id + ".pbag"));
    run.produced(fs::path("rearranged") / (row.id + ".windows.csv"));
    if (o.raster) {
      run.produced(fs::path("raster") / (row.id + ".pbag"));
      run.produced(fs::path("raster") / (row.id + ".windows.csv"));
    }
  }
  if (o.report) {
    std::ofstream os(run.path("rearrange_report.csv"), std::ios::trunc);
    os << "wsi_id,n_patches,knn_mean_manhattan,raster_mean_manhattan\n";
    char buf[64];
    for (const auto& row : rows) {
      if (!row.error.empty()) continue;
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", row.knn, row.raster);
      os << row.id << ',' << row.patches << ',' << buf << '\n';
    }
    if (!os) fail(ErrorKind::Io, "cannot write rearrange_report.csv");
    run.produced("rearrange_report.csv");
  }
  run.finish();
  log(LogLevel::Info, "rearranged " + std::to_string(rows.size() - failed) + "/" + std::to_string(rows.size()) +
                          " slides with w=" + std::to_string(o.window_size));
  return worst;
}

/// Manifest plus interval labels; the label grid follows the model config.
std::vector<PatientRecord> load_labelled(const fs::path& manifest, int n_intervals) {
  require_file(manifest, "--manifest");
  auto records = load_manifest(manifest);
  require(!records.empty(), ErrorKind::InsufficientData, "manifest lists no patients");
  bin_survival_times(records, n_intervals);
  return records;
}

void cmd_train(const Common& c, TrainOptions o) {
  auto records = load_labelled(o.manifest, o.model.n_intervals);
  o.model.seed = c.seed;
  o.model.input_dim = static_cast<int>(records.front().bags.front().dim());
  o.model.validate();
  require(o.folds >= 2, ErrorKind::Config, "--folds must be >= 2");

  std::vector<fs::path> planned{"metrics.csv"};
  for (int f = 0; f < o.folds; ++f) planned.emplace_back("fold" + std::to_string(f) + ".ckpt");
  RunDir run(c.out, c.force, canonical_set(manifest_inputs(o.manifest, records)));
  run.claim(planned);

  log(LogLevel::Info, "rearranging slides of " + std::to_string(records.size()) + " patients");
  const auto patients = prepare_patients(records, o.model.window_size, c.jobs);

  CrossValidationOptions cv;
  cv.model = o.model;
  cv.folds = o.folds;
  cv.jobs = c.jobs;
  cv.parallel_folds = o.parallel_folds;
  cv.on_epoch = [](int fold, const EpochMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "fold %d epoch %d: train %.4f, val %.4f, val C %.4f", fold, m.epoch, m.train_loss,
                  m.val_loss, m.val_cindex);
    log(LogLevel::Info, buf);
  };
  const auto outcomes = run_cross_validation(records, patients, cv);

  std::ofstream os(run.path("metrics.csv"), std::ios::trunc);
  os << "fold,epoch,train_loss,val_loss,val_cindex\n";
  char buf[160];
  for (const auto& o2 : outcomes) {
    for (const auto& m : o2.fit.history) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.6f,%.6f,%.6f\n", o2.fold, m.epoch, m.train_loss, m.val_loss,
                    m.val_cindex);
      os << buf;
    }
  }
  os.close();
  if (!os) fail(ErrorKind::Io, "cannot write metrics.csv");
  run.produced("metrics.csv");
  for (const auto& o2 : outcomes) {
    const fs::path rel = "fold" + std::to_string(o2.fold) + ".ckpt";
    write_checkpoint(o2.checkpoint, run.path(rel));
    read_checkpoint(c.out / rel);
    run.produced(rel);
    log(LogLevel::Info, "fold " + std::to_string(o2.fold) + ": best epoch " + std::to_string(o2.fit.best_epoch));
  }
  run.finish();
}

std::vector<Checkpoint> load_fold_checkpoints(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::Resolution, "--checkpoint-dir " + dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".ckpt") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  require(!files.empty(), ErrorKind::Resolution, "no .ckpt files in " + dir.string());
  std::vector<Checkpoint> out;
  for (const auto& f : files) {
    log(LogLevel::Debug, "reading " + f.string());
    out.push_back(read_checkpoint(f));
  }
  return out;
}

void cmd_eval(const Common& c, const EvalOptions& o) {
  const auto checkpoints = load_fold_checkpoints(o.checkpoint_dir);
  const auto cfg = HVTSurvConfig::from_kv(checkpoints.front().config);
  const auto records = load_labelled(o.manifest, cfg.n_intervals);
  RunDir run(c.out, c.force, canonical_set(manifest_inputs(o.manifest, records)));
  run.claim({"eval_report.csv", "km_curves.csv"});
  const auto patients = prepare_patients(records, cfg.window_size, c.jobs);
  const auto report = evaluate_checkpoints(records, patients, checkpoints);
  write_evaluation_report(report, run.path("eval_report.csv"), run.path("km_curves.csv"));
  run.produced("eval_report.csv");
  run.produced("km_curves.csv");
  run.finish();
  char buf[160];
  std::snprintf(buf, sizeof buf, "mean C-index %.4f over %zu folds", report.mean_cindex, report.fold_cindex.size());
  log(LogLevel::Info, buf);
  if (report.logrank_defined) {
    std::snprintf(buf, sizeof buf, "pooled log-rank chi2 %.4f, p %.4g", report.logrank.chi_square,
                  report.logrank.p_value);
    log(LogLevel::Info, buf);
  }
}

void cmd_attn(const Common& c, const AttnOptions& o) {
  require_file(o.checkpoint, "--checkpoint");
  require(!o.patient.empty(), ErrorKind::Validation, "--patient is required");
  require(o.drop >= 0.0 && o.drop < 1.0, ErrorKind::Config, "--drop must be in [0, 1)");
  const auto ckpt = read_checkpoint(o.checkpoint);
  const auto cfg = HVTSurvConfig::from_kv(ckpt.config);
  const auto records = load_labelled(o.manifest, cfg.n_intervals);
  const auto it = std::find_if(records.begin(), records.end(),
                               [&](const PatientRecord& r) { return r.patient_id == o.patient; });
  require(it != records.end(), ErrorKind::Lookup, "unknown patient '" + o.patient + "'");

  const fs::path rel = "attention_" + o.patient + ".csv";
  auto inputs = manifest_inputs(o.manifest, records);
  inputs.push_back(o.checkpoint);
  RunDir run(c.out, c.force, canonical_set(inputs));
  run.claim({rel});

  const HVTSurvModel<double> model(cfg);
  const auto params = params_from_checkpoint(model, ckpt);
  const auto prepared = prepare_patients({*it}, cfg.window_size, c.jobs);
  const auto subs = sample_sub_bags(prepared.front(), cfg.n_sub_wsis, kEvalMaskSeed);
  const auto scores = export_attention(model.attention(params, subs), o.drop);
  write_attention_csv(scores, run.path(rel));
  run.produced(rel);
  run.finish();
}

// --------------------------------------------------------------- CLI setup

void add_synth_options(CLI::App& sub, SynthOptions& o) {
  auto& c = o.cfg;
  sub.add_option("--n-patients", c.n_patients, "Number of patients")->capture_default_str();
  sub.add_option("--wsis-min", c.wsis_per_patient.first, "Fewest slides per patient")->capture_default_str();
  sub.add_option("--wsis-max", c.wsis_per_patient.second, "Most slides per patient")->capture_default_str();
  sub.add_option("--patches-min", c.patches_per_wsi.first, "Fewest patches per slide")->capture_default_str();
  sub.add_option("--patches-max", c.patches_per_wsi.second, "Most patches per slide")->capture_default_str();
  sub.add_option("--feature-dim", c.feature_dim, "Patch feature dimension")->capture_default_str();
  sub.add_option("--signal-strength", c.signal_strength, "Slope of the signature share in latent risk")
      ->capture_default_str();
  sub.add_option("--censor-rate", c.censor_rate, "Probability a patient is censored")->capture_default_str();
  sub.add_option("--grid-width", c.grid.width, "Tissue grid width in patches")->capture_default_str();
  sub.add_option("--grid-height", c.grid.height, "Tissue grid height in patches")->capture_default_str();
  sub.add_option("--hole-density", c.grid.hole_density, "Share of grid cells punched out")->capture_default_str();
  sub.add_option("--signature-amplitude", c.signature_amplitude, "Signature offset size")->capture_default_str();
  sub.add_option("--signature-dims", c.signature_dims, "Feature dimensions the signature touches")
      ->capture_default_str();
  sub.add_option("--hazard-slope", c.hazard_slope, "Log-hazard slope in latent risk")->capture_default_str();
  sub.add_option("--base-rate", c.base_rate, "Event rate (per month) at median risk")->capture_default_str();
}

void add_model_options(CLI::App& sub, HVTSurvConfig& m) {
  sub.add_option("--model-dim", m.model_dim, "Width after the input projection")->capture_default_str();
  sub.add_option("--window-size", m.window_size, "Window size w")->capture_default_str();
  sub.add_option("--n-heads", m.n_heads, "Attention heads")->capture_default_str();
  sub.add_option("--n-sub-wsis", m.n_sub_wsis, "Sub-WSIs per slide under random window masking")
      ->capture_default_str();
  sub.add_option("--n-intervals", m.n_intervals, "Discrete survival intervals")->capture_default_str();
  sub.add_option("--ff-ratio", m.ff_ratio, "Feed-forward expansion ratio")->capture_default_str();
  sub.add_option("--pool-hidden", m.pool_hidden, "Attention pooling hidden size")->capture_default_str();
  sub.add_option("--bucket-alpha", m.buckets.alpha, "Bucketing alpha")->capture_default_str();
  sub.add_option("--bucket-beta", m.buckets.beta, "Bucketing beta")->capture_default_str();
  sub.add_option("--bucket-gamma", m.buckets.gamma, "Bucketing gamma")->capture_default_str();
  sub.add_option("--bucket-lambda", m.buckets.lambda, "Largest bucket index")->capture_default_str();
  sub.add_option("--init-std", m.init_std, "Std of the weight initialisation")->capture_default_str();
  sub.add_option("--lr", m.learning_rate, "Learning rate")->capture_default_str();
  sub.add_option("--weight-decay", m.weight_decay, "Decoupled weight decay")->capture_default_str();
  sub.add_option("--patience", m.patience, "Early-stopping patience in epochs")->capture_default_str();
  sub.add_option("--epochs", m.max_epochs, "Maximum epochs (0 keeps the initial parameters)")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HVTSurv survival prediction from whole-slide patch features"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file; keys are long option names without the leading dashes, in [subcommand] sections");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Common common;
  app.add_option("--seed", common.seed, "Root seed for every random stream")->capture_default_str();
  app.add_option("--jobs", common.jobs, "Worker threads for per-slide work")->capture_default_str();
  app.add_option("--out", common.out, "Run directory for outputs");
  app.add_flag("--force", common.force, "Overwrite existing outputs");
  app.fallthrough();

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic cohort (PBAG files + manifest)");
  add_synth_options(*synth_cmd, synth);

  RearrangeOptions rearrange;
  auto* rearrange_cmd = app.add_subcommand("rearrange", "kNN window rearrangement of patch bags");
  rearrange_cmd->add_option("bags", rearrange.bags, "PBAG files");
  rearrange_cmd->add_option("--manifest", rearrange.manifest, "Rearrange every slide listed in a manifest");
  rearrange_cmd->add_option("--window-size", rearrange.window_size, "Window size w")->capture_default_str();
  rearrange_cmd->add_flag("--raster", rearrange.raster, "Also write the raster-order baseline");
  rearrange_cmd->add_flag("--report", rearrange.report, "Write per-slide mean window distances for both orders");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Cross-validated training; one checkpoint per fold");
  train_cmd->add_option("--manifest", train.manifest, "Cohort manifest")->required();
  train_cmd->add_option("--folds", train.folds, "Cross-validation folds")->capture_default_str();
  train_cmd->add_flag("--parallel-folds", train.parallel_folds, "Train folds concurrently on --jobs threads");
  add_model_options(*train_cmd, train.model);

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out C-index, KM curves and log-rank test");
  eval_cmd->add_option("--manifest", eval.manifest, "Cohort manifest")->required();
  eval_cmd->add_option("--checkpoint-dir", eval.checkpoint_dir, "Directory holding fold*.ckpt")->required();

  AttnOptions attn;
  auto* attn_cmd = app.add_subcommand("attn", "Per-layer patch attention scores for one patient");
  attn_cmd->add_option("--manifest", attn.manifest, "Cohort manifest")->required();
  attn_cmd->add_option("--checkpoint", attn.checkpoint, "Model checkpoint")->required();
  attn_cmd->add_option("--patient", attn.patient, "Patient id")->required();
  attn_cmd->add_option("--drop", attn.drop, "Share of the smallest scores zeroed before rescaling")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    g_log_level = parse_log_level();
    require(common.jobs >= 1, ErrorKind::Config, "--jobs must be >= 1");
    int code = 0;
    if (synth_cmd->parsed()) cmd_synth(common, synth);
    if (rearrange_cmd->parsed()) code = cmd_rearrange(common, rearrange);
    if (train_cmd->parsed()) cmd_train(common, train);
    if (eval_cmd->parsed()) cmd_eval(common, eval);
    if (attn_cmd->parsed()) cmd_attn(common, attn);
    return code;
  } catch (const Error& e) {
    log(LogLevel::Error, e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log(LogLevel::Error, e.what());
    return 2;
  }
}
