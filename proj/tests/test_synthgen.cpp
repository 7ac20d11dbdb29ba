#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <set>

#include "hvtsurv/error.hpp"
#include "hvtsurv/synthgen.hpp"
#include "test_support.hpp"

using namespace hvtsurv;

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) { return pearson(ranks(a), ranks(b)); }

std::vector<double> signature_fraction(const SynthCohort& c) {
  std::vector<double> out;
  for (const auto& patient : c.signature) {
    double sig = 0, all = 0;
    for (const auto& wsi : patient) {
      sig += static_cast<double>(std::count(wsi.begin(), wsi.end(), true));
      all += static_cast<double>(wsi.size());
    }
    out.push_back(sig / all);
  }
  return out;
}

}  // namespace

TEST_CASE("cohort generation is deterministic and well formed") {
  SynthConfig cfg;
  cfg.n_patients = 30;
  cfg.seed = 5;
  const auto a = generate_cohort(cfg);
  const auto b = generate_cohort(cfg);
  REQUIRE(a.records.size() == 30);
  std::set<std::string> ids;
  for (std::size_t p = 0; p < a.records.size(); ++p) {
    const auto& ra = a.records[p];
    const auto& rb = b.records[p];
    CHECK(ra.patient_id == rb.patient_id);
    CHECK(ra.follow_up.time_months == rb.follow_up.time_months);
    CHECK(ra.follow_up.censored == rb.follow_up.censored);
    CHECK(ra.follow_up.time_months >= 0.0);
    CHECK(ra.bags.size() >= 1);
    CHECK(ra.bags.size() <= 2);
    REQUIRE(ra.bags.size() == rb.bags.size());
    for (std::size_t w = 0; w < ra.bags.size(); ++w) {
      CHECK(ra.bags[w].coords == rb.bags[w].coords);
      CHECK(ra.bags[w].features == rb.bags[w].features);
      CHECK(ra.bags[w].size() >= 100);
      CHECK(ra.bags[w].size() <= 300);
      CHECK(ra.bags[w].dim() == 64);
      CHECK_NOTHROW(validate_bag(ra.bags[w]));
      CHECK(ids.insert(ra.bags[w].wsi_id).second);
    }
  }
  cfg.seed = 6;
  CHECK(generate_cohort(cfg).records[0].follow_up.time_months != a.records[0].follow_up.time_months);
}

TEST_CASE("planted signal ranks survival times") {
  SynthConfig cfg;
  cfg.n_patients = 200;
  cfg.signal_strength = 5.0;
  cfg.seed = 11;
  const auto c = generate_cohort(cfg);
  const double rho = spearman(c.latent_risk, c.true_time);
  CHECK(rho < -0.6);
  // The signature share tracks latent risk.
  CHECK(spearman(c.latent_risk, signature_fraction(c)) > 0.8);
}

TEST_CASE("zero signal strength decouples signature share from risk") {
  SynthConfig cfg;
  cfg.n_patients = 400;
  cfg.signal_strength = 0.0;
  cfg.seed = 12;
  const auto c = generate_cohort(cfg);
  const auto frac = signature_fraction(c);
  for (double f : frac) CHECK(f == doctest::Approx(0.5).epsilon(0.01));
  CHECK(std::abs(pearson(c.latent_risk, frac)) < 0.15);
}

TEST_CASE("censoring rate is honoured") {
  SynthConfig cfg;
  cfg.n_patients = 500;
  cfg.censor_rate = 0.86;
  cfg.patches_per_wsi = {10, 20};
  cfg.seed = 13;
  const auto recs = gen_cohort(cfg);
  const double share =
      static_cast<double>(std::count_if(recs.begin(), recs.end(), [](const auto& r) { return r.follow_up.censored; })) /
      500.0;
  CHECK(share == doctest::Approx(0.86).epsilon(0.05 / 0.86));
}

TEST_CASE("irregular masks") {
  const auto full = gen_irregular_mask(7, 5, 0.0, 1);
  CHECK(full.size() == 35);
  for (int y = 0, i = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x, ++i) CHECK(full[i] == GridCell{x, y});

  CHECK(gen_irregular_mask(20, 20, 0.3, 9) == gen_irregular_mask(20, 20, 0.3, 9));
  CHECK(gen_irregular_mask(20, 20, 0.3, 9) != gen_irregular_mask(20, 20, 0.3, 10));

  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto m = gen_irregular_mask(20, 20, 0.3, s);
    CHECK(m.size() >= 200);
    CHECK(m.size() <= 400);
    CHECK(std::is_sorted(m.begin(), m.end(),
                         [](const GridCell& a, const GridCell& b) { return std::tie(a.y, a.x) < std::tie(b.y, b.x); }));
    for (const auto& c : m) {
      CHECK(c.x >= 0);
      CHECK(c.x < 20);
      CHECK(c.y >= 0);
      CHECK(c.y < 20);
    }
  }
}

TEST_CASE("write_cohort output loads back") {
  SynthConfig cfg;
  cfg.n_patients = 6;
  cfg.seed = 3;
  const auto recs = gen_cohort(cfg);
  const auto dir = testing::scratch_dir("synth-write");
  write_cohort(recs, dir);
  const auto back = load_manifest(dir / "manifest.csv");
  REQUIRE(back.size() == recs.size());
  for (std::size_t p = 0; p < recs.size(); ++p) {
    CHECK(back[p].patient_id == recs[p].patient_id);
    CHECK(back[p].follow_up.time_months == recs[p].follow_up.time_months);
    CHECK(back[p].follow_up.censored == recs[p].follow_up.censored);
    REQUIRE(back[p].bags.size() == recs[p].bags.size());
    for (std::size_t w = 0; w < recs[p].bags.size(); ++w) CHECK(back[p].bags[w].features == recs[p].bags[w].features);
  }
}

TEST_CASE("invalid synth configs") {
  SynthConfig cfg;
  cfg.censor_rate = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.patches_per_wsi = {10, 5};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = {};
  cfg.signature_dims = 65;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
