#include "doctest.h"

#include <cmath>
#include <fstream>

#include "hvtsurv/error.hpp"
#include "hvtsurv/survstats.hpp"
#include "test_support.hpp"

using namespace hvtsurv;

namespace {

RiskPrediction pred(double t, bool censored, double risk = 0.0, std::string id = "") {
  return {std::move(id), risk, t, censored};
}

std::vector<double> risks_of(const std::vector<RiskPrediction>& v) {
  std::vector<double> out;
  for (const auto& p : v) out.push_back(p.risk);
  return out;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an hvtsurv::Error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("c_index examples") {
  std::vector<RiskPrediction> p = {pred(1, false, 0.9), pred(2, false, 0.5), pred(3, true, 0.1)};
  CHECK(c_index(p) == 1.0);
  for (auto& x : p) x.risk = 0.5;
  CHECK(c_index(p) == 0.0);
  p = {pred(1, false, -0.9), pred(2, false, -0.5), pred(3, true, -0.1)};
  CHECK(c_index(p) == 0.0);

  // Equal times are not comparable; all-censored has no pairs.
  CHECK(kind_of([] { c_index({pred(2, false, 1), pred(2, false, 0)}); }) == ErrorKind::UndefinedStatistic);
  CHECK(kind_of([] { c_index({pred(1, true, 1), pred(2, true, 0)}); }) == ErrorKind::UndefinedStatistic);
}

TEST_CASE("c_index matches exhaustive enumeration") {
  auto rng = make_rng(1, "cindex-oracle");
  int checked = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = 2 + static_cast<int>(uniform_index(rng, 7));
    auto p = testing::random_predictions(n, rng);
    bool defined = false;
    const double want = testing::brute_force_cindex(p, defined);
    if (!defined) {
      CHECK_THROWS_AS(c_index(p), Error);
      continue;
    }
    ++checked;
    const double c = c_index(p);
    CHECK(c == want);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);

    // Strictly increasing transforms leave the statistic unchanged.
    auto warped = p;
    for (auto& x : warped) x.risk = std::exp(2.0 * x.risk) - 7.0;
    CHECK(c_index(warped) == c);

    // Without risk ties, negating risks maps c to 1 - c.
    auto distinct = p;
    for (std::size_t i = 0; i < distinct.size(); ++i) distinct[i].risk += 1e-3 * static_cast<double>(i);
    auto flipped = distinct;
    for (auto& x : flipped) x.risk = -x.risk;
    CHECK(c_index(flipped) == doctest::Approx(1.0 - c_index(distinct)));
  }
  CHECK(checked > 1000);
}

TEST_CASE("km_curve") {
  SUBCASE("all censored") {
    const auto km = km_curve({pred(1, true), pred(2, true), pred(5, true)});
    for (double s : km.survival) CHECK(s == 1.0);
    CHECK(km.at(10.0) == 1.0);
  }
  SUBCASE("two deaths then a censoring") {
    const auto km = km_curve({pred(2, false), pred(3, true), pred(1, false)});
    CHECK(km.at(0.5) == 1.0);
    CHECK(km.at(1.0) == doctest::Approx(2.0 / 3.0));
    CHECK(km.at(1.5) == doctest::Approx(2.0 / 3.0));
    CHECK(km.at(2.0) == doctest::Approx(1.0 / 3.0));
    CHECK(km.at(4.0) == doctest::Approx(1.0 / 3.0));
    REQUIRE(km.event_times.size() >= 2);
    CHECK(km.at_risk[0] == 3);
    CHECK(km.at_risk[1] == 2);
    CHECK(km.events[0] == 1);
  }
  SUBCASE("single death") {
    const auto km = km_curve({pred(4, false)});
    CHECK(km.at(4.0) == 0.0);
  }
  SUBCASE("no censoring gives the empirical survival function") {
    auto rng = make_rng(2, "km");
    auto p = testing::random_predictions(40, rng);
    for (auto& x : p) x.censored = false;
    const auto km = km_curve(p);
    for (double t = 0.0; t <= 7.0; t += 0.5) {
      double alive = 0;
      for (const auto& x : p) alive += x.time_months > t;
      CHECK(km.at(t) == doctest::Approx(alive / 40.0));
    }
  }
  SUBCASE("monotone with censoring") {
    auto rng = make_rng(3, "km");
    const auto km = km_curve(testing::random_predictions(60, rng));
    for (std::size_t i = 1; i < km.survival.size(); ++i) {
      CHECK(km.survival[i] <= km.survival[i - 1]);
      CHECK(km.at_risk[i] <= km.at_risk[i - 1]);
      CHECK(km.event_times[i] > km.event_times[i - 1]);
    }
  }
  CHECK_THROWS_AS(km_curve({}), Error);
}

TEST_CASE("logrank_test") {
  SUBCASE("identical groups") {
    const std::vector<RiskPrediction> g = {pred(1, false), pred(3, true), pred(4, false), pred(6, false)};
    const auto r = logrank_test(g, g);
    CHECK(r.chi_square == doctest::Approx(0.0).scale(1.0));
    CHECK(r.p_value == doctest::Approx(1.0));
  }
  SUBCASE("fully separated groups") {
    std::vector<RiskPrediction> a(20, pred(1, false)), b(20, pred(100, false));
    const auto r = logrank_test(a, b);
    // One shared event time: O - E = 20 - 10 and Var = 20*20*20*20 / (40^2 * 39).
    CHECK(r.chi_square == doctest::Approx(39.0));
    CHECK(r.p_value < 1e-3);
    CHECK(r.p_value == doctest::Approx(std::erfc(std::sqrt(39.0 / 2.0))));
    const auto swapped = logrank_test(b, a);
    CHECK(swapped.chi_square == r.chi_square);
    CHECK(swapped.p_value == r.p_value);
  }
  SUBCASE("label symmetry and ranges on random groups") {
    auto rng = make_rng(4, "logrank");
    for (int trial = 0; trial < 50; ++trial) {
      auto a = testing::random_predictions(15, rng);
      auto b = testing::random_predictions(12, rng);
      a[0].censored = false;
      const auto r = logrank_test(a, b);
      const auto s = logrank_test(b, a);
      CHECK(r.chi_square >= 0.0);
      CHECK(r.p_value > 0.0);
      CHECK(r.p_value <= 1.0);
      CHECK(r.chi_square == doctest::Approx(s.chi_square));
      CHECK(r.p_value == doctest::Approx(s.p_value));
    }
  }
  SUBCASE("undefined cases") {
    CHECK(kind_of([] { logrank_test({pred(1, true)}, {pred(2, true)}); }) == ErrorKind::UndefinedStatistic);
    CHECK(kind_of([] { logrank_test({pred(1, false)}, {}); }) == ErrorKind::UndefinedStatistic);
  }
}

TEST_CASE("risk_stratify") {
  const auto [low, high] = risk_stratify({pred(1, 0, 3), pred(1, 0, 1), pred(1, 0, 4), pred(1, 0, 2)});
  CHECK(risks_of(low) == std::vector<double>{1, 2});
  CHECK(risks_of(high) == std::vector<double>{3, 4});

  const auto [low3, high3] = risk_stratify({pred(1, 0, 1), pred(1, 0, 2), pred(1, 0, 3)});
  CHECK(risks_of(low3) == std::vector<double>{1, 2});
  CHECK(risks_of(high3) == std::vector<double>{3});

  const auto [all, none] = risk_stratify({pred(1, false, 5), pred(2, false, 5), pred(3, false, 5)});
  CHECK(all.size() == 3);
  CHECK(none.empty());
  CHECK(kind_of([&] { logrank_test(all, none); }) == ErrorKind::UndefinedStatistic);

  CHECK_THROWS_AS(risk_stratify({pred(1, 0, 1)}), Error);
}

TEST_CASE("incomplete gamma and chi-square tail") {
  for (double x : {0.0, 0.1, 1.0, 3.0, 12.0, 40.0}) {
    CHECK(gamma_q(1.0, x) == doctest::Approx(std::exp(-x)).epsilon(1e-10));
    CHECK(gamma_q(0.5, x) == doctest::Approx(std::erfc(std::sqrt(x))).epsilon(1e-10));
    // Q(2, x) = (1 + x) e^{-x}
    CHECK(gamma_q(2.0, x) == doctest::Approx((1.0 + x) * std::exp(-x)).epsilon(1e-10));
  }
  CHECK(chi_square_sf(3.841458820694124, 1.0) == doctest::Approx(0.05).epsilon(1e-8));
  CHECK(chi_square_sf(0.0, 1.0) == 1.0);
  CHECK_THROWS_AS(gamma_q(0.0, 1.0), Error);
}

TEST_CASE("km csv") {
  const auto dir = testing::scratch_dir("km-csv");
  write_km_csv({{"low", km_curve({pred(1, false), pred(2, true)})}, {"high", km_curve({pred(3, false)})}},
               dir / "km.csv");
  std::ifstream is(dir / "km.csv");
  std::string line;
  std::getline(is, line);
  CHECK(line == "time,survival,group");
  std::getline(is, line);
  CHECK(line.rfind("0,1,low", 0) == 0);
}
