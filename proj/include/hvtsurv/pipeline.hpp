#pragma once

// Cohort-level orchestration shared by the command line tool and the
// acceptance suite: slide preprocessing, cross-validated training and
// out-of-sample evaluation.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "hvtsurv/bagio.hpp"
#include "hvtsurv/survmodel.hpp"
#include "hvtsurv/survstats.hpp"

namespace hvtsurv {

/// Runs task(i) for i in [0, n) on up to `jobs` threads; rethrows the first
/// failure after all workers stop.
template <class Task>
void parallel_for(std::size_t n, int jobs, Task task) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(workers, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

/// Rearranges every slide of every patient (kNN windows); `jobs` worker
/// threads. Records must carry interval labels.
std::vector<PreparedPatient> prepare_patients(const std::vector<PatientRecord>& records, int window_size, int jobs);

struct CrossValidationOptions {
  HVTSurvConfig model;
  int folds = 4;
  int jobs = 1;
  bool parallel_folds = false;
  std::function<void(int fold, const EpochMetrics&)> on_epoch;
};

struct FoldOutcome {
  int fold = 0;
  FoldSplit split;
  FitResult<double> fit;
  Checkpoint checkpoint;
};

/// Stratified splits seeded by `model.seed`, one fit per fold. Patients must
/// be aligned with `records` (same order).
std::vector<FoldOutcome> run_cross_validation(const std::vector<PatientRecord>& records,
                                              const std::vector<PreparedPatient>& patients,
                                              const CrossValidationOptions& opts);

struct EvaluationReport {
  std::vector<double> fold_cindex;
  double mean_cindex = 0.0;
  std::vector<RiskPrediction> low;   // pooled over test folds
  std::vector<RiskPrediction> high;
  LogRankResult logrank;
  bool logrank_defined = false;
  KMCurve km_low;
  KMCurve km_high;
};

/// Out-of-sample risks for each fold's test patients with that fold's
/// checkpoint; median split per fold, groups pooled for KM and log-rank.
EvaluationReport evaluate_checkpoints(const std::vector<PatientRecord>& records,
                                      const std::vector<PreparedPatient>& patients,
                                      const std::vector<Checkpoint>& checkpoints);

void write_evaluation_report(const EvaluationReport& report, const std::filesystem::path& csv_path,
                             const std::filesystem::path& km_path);

void write_attention_csv(const std::vector<PatchScore>& scores, const std::filesystem::path& path);

}  // namespace hvtsurv
