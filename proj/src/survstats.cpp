#include "hvtsurv/survstats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>

#include "hvtsurv/error.hpp"

namespace hvtsurv {

namespace {

struct TimeCounts {
  int events = 0;
  int exits = 0;  // events + censorings at this time
};

}  // namespace

double KMCurve::at(double t) const {
  const auto it = std::upper_bound(event_times.begin(), event_times.end(), t);
  if (it == event_times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - event_times.begin()) - 1];
}

double c_index(const std::vector<RiskPrediction>& preds) {
  std::vector<std::size_t> order(preds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return preds[a].time_months < preds[b].time_months; });

  long long comparable = 0;
  long long concordant = 0;
  // For each uncensored i, every j with a strictly later time is comparable.
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const auto& pi = preds[order[pos]];
    if (pi.censored) continue;
    auto later = pos + 1;
    while (later < order.size() && preds[order[later]].time_months <= pi.time_months) ++later;
    for (auto q = later; q < order.size(); ++q) {
      ++comparable;
      if (pi.risk > preds[order[q]].risk) ++concordant;
    }
  }
  require(comparable > 0, ErrorKind::UndefinedStatistic, "c-index: no comparable pairs");
  return static_cast<double>(concordant) / static_cast<double>(comparable);
}

KMCurve km_curve(const std::vector<RiskPrediction>& preds) {
  require(!preds.empty(), ErrorKind::Precondition, "km_curve: empty input");
  std::map<double, TimeCounts> by_time;
  for (const auto& p : preds) {
    auto& c = by_time[p.time_months];
    ++c.exits;
    if (!p.censored) ++c.events;
  }
  KMCurve curve;
  int at_risk = static_cast<int>(preds.size());
  double s = 1.0;
  for (const auto& [t, c] : by_time) {
    if (c.events > 0) {
      s *= 1.0 - static_cast<double>(c.events) / at_risk;
      curve.event_times.push_back(t);
      curve.survival.push_back(s);
      curve.at_risk.push_back(at_risk);
      curve.events.push_back(c.events);
    }
    at_risk -= c.exits;
  }
  return curve;
}

LogRankResult logrank_test(const std::vector<RiskPrediction>& group_a, const std::vector<RiskPrediction>& group_b) {
  require(!group_a.empty() && !group_b.empty(), ErrorKind::UndefinedStatistic, "log-rank: a group is empty");
  std::map<double, std::pair<TimeCounts, TimeCounts>> by_time;
  for (const auto& p : group_a) {
    auto& c = by_time[p.time_months].first;
    ++c.exits;
    if (!p.censored) ++c.events;
  }
  for (const auto& p : group_b) {
    auto& c = by_time[p.time_months].second;
    ++c.exits;
    if (!p.censored) ++c.events;
  }

  double n_a = static_cast<double>(group_a.size());
  double n_b = static_cast<double>(group_b.size());
  double observed_minus_expected = 0.0;
  double variance = 0.0;
  int total_events = 0;
  for (const auto& [t, counts] : by_time) {
    const auto& [ca, cb] = counts;
    const double d = ca.events + cb.events;
    const double n = n_a + n_b;
    if (d > 0) {
      total_events += static_cast<int>(d);
      observed_minus_expected += ca.events - d * n_a / n;
      if (n > 1) variance += n_a * n_b * d * (n - d) / (n * n * (n - 1));
    }
    n_a -= ca.exits;
    n_b -= cb.exits;
  }
  require(total_events > 0, ErrorKind::UndefinedStatistic, "log-rank: no events");
  LogRankResult out;
  if (variance <= 0.0) {
    // Every event time removes the whole risk set; the statistic carries no
    // information.
    require(observed_minus_expected == 0.0, ErrorKind::UndefinedStatistic, "log-rank: zero variance");
    return out;
  }
  out.chi_square = observed_minus_expected * observed_minus_expected / variance;
  out.p_value = chi_square_sf(out.chi_square, 1.0);
  return out;
}

std::pair<std::vector<RiskPrediction>, std::vector<RiskPrediction>> risk_stratify(
    const std::vector<RiskPrediction>& preds) {
  require(preds.size() >= 2, ErrorKind::Precondition, "risk_stratify needs at least 2 patients");
  std::vector<double> risks;
  for (const auto& p : preds) risks.push_back(p.risk);
  std::sort(risks.begin(), risks.end());
  const auto n = risks.size();
  const double median = n % 2 ? risks[n / 2] : 0.5 * (risks[n / 2 - 1] + risks[n / 2]);
  std::pair<std::vector<RiskPrediction>, std::vector<RiskPrediction>> out;
  for (const auto& p : preds) (p.risk <= median ? out.first : out.second).push_back(p);
  return out;
}

// Series for x < a + 1, Lentz continued fraction otherwise.
double gamma_q(double a, double x) {
  require(a > 0.0 && x >= 0.0, ErrorKind::Precondition, "gamma_q needs a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  const double log_prefactor = -x + a * std::log(x) - std::lgamma(a);
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15;
  if (x < a + 1.0) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < kMaxIter; ++n) {
      term *= x / (a + n);
      sum += term;
      if (std::abs(term) < std::abs(sum) * kEps) break;
    }
    return std::clamp(1.0 - sum * std::exp(log_prefactor), 0.0, 1.0);
  }
  constexpr double kTiny = std::numeric_limits<double>::min() / kEps;
  double b = x + 1.0 - a;
  double c = 1.0 / kTiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < kMaxIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < kTiny) d = kTiny;
    c = b + an / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return std::clamp(std::exp(log_prefactor) * h, 0.0, 1.0);
}

double chi_square_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return gamma_q(0.5 * dof, 0.5 * x);
}

void write_km_csv(const std::vector<std::pair<std::string, KMCurve>>& curves, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  os << "time,survival,group\n";
  char buf[96];
  for (const auto& [group, curve] : curves) {
    os << "0," << 1 << ',' << group << '\n';
    for (std::size_t i = 0; i < curve.event_times.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.6g,%.6f,", curve.event_times[i], curve.survival[i]);
      os << buf << group << '\n';
    }
  }
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

}  // namespace hvtsurv
