#include "hvtsurv/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <mutex>

#include "hvtsurv/error.hpp"

namespace hvtsurv {

namespace {

std::vector<PreparedPatient> select(const std::vector<PreparedPatient>& patients, const std::vector<std::size_t>& idx) {
  std::vector<PreparedPatient> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(patients[i]);
  return out;
}

int config_int(const Checkpoint& ckpt, const char* key) {
  const auto it = ckpt.config.find(key);
  require(it != ckpt.config.end(), ErrorKind::Version, std::string("checkpoint lacks '") + key + "'");
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    fail(ErrorKind::Version, std::string("checkpoint key '") + key + "' is not an integer");
  }
}

}  // namespace

std::vector<PreparedPatient> prepare_patients(const std::vector<PatientRecord>& records, int window_size, int jobs) {
  struct Job {
    std::size_t patient;
    std::size_t bag;
  };
  std::vector<Job> work;
  std::vector<PreparedPatient> out(records.size());
  for (std::size_t p = 0; p < records.size(); ++p) {
    const auto& r = records[p];
    require(r.interval_label.has_value(), ErrorKind::Precondition, "patient " + r.patient_id + " has no interval label");
    require(!r.bags.empty(), ErrorKind::Validation, "patient " + r.patient_id + " has no slides");
    out[p].patient_id = r.patient_id;
    out[p].label = *r.interval_label;
    out[p].censored = r.follow_up.censored;
    out[p].time_months = r.follow_up.time_months;
    out[p].wsis.resize(r.bags.size());
    for (std::size_t b = 0; b < r.bags.size(); ++b) work.push_back({p, b});
  }
  parallel_for(work.size(), jobs, [&](std::size_t i) {
    const auto [p, b] = work[i];
    out[p].wsis[b] = knn_rearrange(records[p].bags[b], window_size);
  });
  return out;
}

std::vector<FoldOutcome> run_cross_validation(const std::vector<PatientRecord>& records,
                                              const std::vector<PreparedPatient>& patients,
                                              const CrossValidationOptions& opts) {
  require(records.size() == patients.size(), ErrorKind::Precondition, "records and prepared patients differ in size");
  const auto& cfg = opts.model;
  cfg.validate();
  const HVTSurvModel<double> model(cfg);
  const auto splits = stratified_kfold(records, opts.folds, cfg.seed);

  std::vector<FoldOutcome> outcomes(splits.size());
  std::mutex log_mutex;
  parallel_for(splits.size(), opts.parallel_folds ? opts.jobs : 1, [&](std::size_t f) {
    auto& o = outcomes[f];
    o.fold = static_cast<int>(f);
    o.split = splits[f];
    const auto train = select(patients, o.split.train);
    const auto val = select(patients, o.split.validation);
    try {
      o.fit = fit(model, train, val, derive_seed(cfg.seed, "fold", f), [&](const EpochMetrics& m) {
        if (!opts.on_epoch) return;
        std::lock_guard lock(log_mutex);
        opts.on_epoch(o.fold, m);
      });
    } catch (const Error& e) {
      fail(e.kind(), "fold " + std::to_string(f) + ": " + e.what());
    }
    o.checkpoint = make_checkpoint(o.fit.params, cfg,
                                   {{"fold", std::to_string(f)},
                                    {"folds", std::to_string(splits.size())},
                                    {"best_epoch", std::to_string(o.fit.best_epoch)},
                                    {"n_patients", std::to_string(records.size())}});
  });
  return outcomes;
}

EvaluationReport evaluate_checkpoints(const std::vector<PatientRecord>& records,
                                      const std::vector<PreparedPatient>& patients,
                                      const std::vector<Checkpoint>& checkpoints) {
  require(!checkpoints.empty(), ErrorKind::Precondition, "no checkpoints to evaluate");
  require(records.size() == patients.size(), ErrorKind::Precondition, "records and prepared patients differ in size");
  EvaluationReport report;
  std::vector<FoldSplit> splits;
  std::uint64_t split_seed = 0;
  int folds = 0;
  for (std::size_t c = 0; c < checkpoints.size(); ++c) {
    const auto& ckpt = checkpoints[c];
    const auto cfg = HVTSurvConfig::from_kv(ckpt.config);
    const int fold = config_int(ckpt, "fold");
    if (c == 0) {
      folds = config_int(ckpt, "folds");
      split_seed = cfg.seed;
      require(config_int(ckpt, "n_patients") == static_cast<int>(records.size()), ErrorKind::Version,
              "checkpoint was trained on a cohort of a different size");
      splits = stratified_kfold(records, folds, split_seed);
    }
    require(cfg.seed == split_seed && config_int(ckpt, "folds") == folds, ErrorKind::Version,
            "checkpoints come from different cross-validation runs");
    require(fold >= 0 && fold < folds, ErrorKind::Version, "checkpoint fold index out of range");
    require(!patients.empty() && !patients.front().wsis.empty() &&
                patients.front().wsis.front().features.cols() == cfg.input_dim,
            ErrorKind::Version, "checkpoint input_dim does not match the cohort feature dimension");
    require(patients.front().wsis.front().window_size == cfg.window_size, ErrorKind::Version,
            "checkpoint window size does not match the prepared bags");

    const HVTSurvModel<double> model(cfg);
    const auto params = params_from_checkpoint(model, ckpt);
    const auto preds = predict(model, params, select(patients, splits[fold].test));
    report.fold_cindex.push_back(c_index(preds));
    if (preds.size() >= 2) {
      auto [low, high] = risk_stratify(preds);
      report.low.insert(report.low.end(), low.begin(), low.end());
      report.high.insert(report.high.end(), high.begin(), high.end());
    }
  }
  double sum = 0.0;
  for (double c : report.fold_cindex) sum += c;
  report.mean_cindex = sum / static_cast<double>(report.fold_cindex.size());
  if (!report.low.empty()) report.km_low = km_curve(report.low);
  if (!report.high.empty()) report.km_high = km_curve(report.high);
  try {
    report.logrank = logrank_test(report.low, report.high);
    report.logrank_defined = true;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::UndefinedStatistic) throw;
  }
  return report;
}

void write_evaluation_report(const EvaluationReport& report, const std::filesystem::path& csv_path,
                             const std::filesystem::path& km_path) {
  std::ofstream os(csv_path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write '" + csv_path.string() + "'");
  char buf[128];
  os << "metric,fold,value\n";
  for (std::size_t f = 0; f < report.fold_cindex.size(); ++f) {
    std::snprintf(buf, sizeof buf, "c_index,%zu,%.6f\n", f, report.fold_cindex[f]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean_c_index,all,%.6f\n", report.mean_cindex);
  os << buf;
  if (report.logrank_defined) {
    std::snprintf(buf, sizeof buf, "logrank_chi2,pooled,%.6f\nlogrank_p,pooled,%.6g\n", report.logrank.chi_square,
                  report.logrank.p_value);
    os << buf;
  } else {
    os << "logrank_chi2,pooled,nan\nlogrank_p,pooled,nan\n";
  }
  if (!os) fail(ErrorKind::Io, "write to '" + csv_path.string() + "' failed");

  std::vector<std::pair<std::string, KMCurve>> curves;
  if (!report.low.empty()) curves.emplace_back("low", report.km_low);
  if (!report.high.empty()) curves.emplace_back("high", report.km_high);
  write_km_csv(curves, km_path);
}

void write_attention_csv(const std::vector<PatchScore>& scores, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  os << "layer,wsi_id,patch_index,gx,gy,score\n";
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.6f", s.score);
    os << s.layer << ',' << s.wsi_id << ',' << s.patch_index << ',' << s.gx << ',' << s.gy << ',' << buf << '\n';
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

}  // namespace hvtsurv
