#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace hvtsurv {

struct RiskPrediction {
  std::string patient_id;
  double risk = 0.0;
  double time_months = 0.0;
  bool censored = false;
};

struct KMCurve {
  std::vector<double> event_times;
  std::vector<double> survival;
  std::vector<int> at_risk;
  std::vector<int> events;

  /// Step-function value at time t (1 before the first event).
  double at(double t) const;
};

struct LogRankResult {
  double chi_square = 0.0;
  double p_value = 1.0;
};

/// Harrell-style concordance restricted to pairs (i, j) with i uncensored
/// and T_j > T_i; a pair counts only when f_i > f_j strictly, so risk ties
/// score zero. Throws UndefinedStatistic without comparable pairs.
double c_index(const std::vector<RiskPrediction>& preds);

KMCurve km_curve(const std::vector<RiskPrediction>& preds);

LogRankResult logrank_test(const std::vector<RiskPrediction>& group_a, const std::vector<RiskPrediction>& group_b);

/// Median split; risks equal to the median go to the low group.
std::pair<std::vector<RiskPrediction>, std::vector<RiskPrediction>> risk_stratify(
    const std::vector<RiskPrediction>& preds);

/// Regularized upper incomplete gamma Q(a, x).
double gamma_q(double a, double x);

/// Survival function of the chi-square distribution.
double chi_square_sf(double x, double dof);

/// `time,survival,group` rows, including a leading (0, 1) point per group.
void write_km_csv(const std::vector<std::pair<std::string, KMCurve>>& curves, const std::filesystem::path& path);

}  // namespace hvtsurv
