#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hvtsurv/error.hpp"
#include "hvtsurv/rearrange.hpp"
#include "hvtsurv/survmodel.hpp"
#include "test_support.hpp"

using namespace hvtsurv;

namespace {

HVTSurvConfig small_config() {
  HVTSurvConfig cfg;
  cfg.input_dim = 6;
  cfg.model_dim = 8;
  cfg.window_size = 4;
  cfg.n_heads = 2;
  cfg.pool_hidden = 4;
  cfg.n_intervals = 4;
  cfg.init_std = 0.2;
  return cfg;
}

PreparedPatient patient(const std::string& id, std::vector<int> sizes, int label, bool censored, std::uint64_t seed) {
  PreparedPatient p;
  p.patient_id = id;
  p.label = label;
  p.censored = censored;
  p.time_months = 1.0 + label;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    const auto bag = testing::random_bag(id + "_w" + std::to_string(i), sizes[i], 6, seed + i);
    p.wsis.push_back(knn_rearrange(bag, 4));
  }
  return p;
}

}  // namespace

TEST_CASE("survival_from_hazards") {
  const std::vector<double> half = {0.5, 0.5, 0.5, 0.5};
  CHECK(survival_from_hazards(half) == std::vector<double>{0.5, 0.25, 0.125, 0.0625});
  const std::vector<double> zero(4, 0.0);
  CHECK(survival_from_hazards(zero) == std::vector<double>(4, 1.0));
  const std::vector<double> absorbing = {1.0, 0.3, 0.2};
  CHECK(survival_from_hazards(absorbing) == std::vector<double>(3, 0.0));
  const std::vector<double> two = {0.2, 0.3};
  const auto s = survival_from_hazards(two);
  CHECK(s[0] == doctest::Approx(0.8));
  CHECK(s[1] == doctest::Approx(0.56));
  const std::vector<double> bad = {1.5};
  CHECK_THROWS_AS(survival_from_hazards(bad), Error);
}

TEST_CASE("hazard output from logits") {
  const auto out = HazardOutput::from_logits({-60.0, -60.0, -60.0, -60.0});
  for (double h : out.hazards) CHECK(h == doctest::Approx(0.0));
  for (double s : out.survival) CHECK(s == doctest::Approx(1.0));
  CHECK(out.risk == doctest::Approx(-4.0));

  const auto mixed = HazardOutput::from_logits({0.3, -1.0, 2.0, 0.0});
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(mixed.hazards[k] > 0.0);
    CHECK(mixed.hazards[k] < 1.0);
    if (k > 0) CHECK(mixed.survival[k] <= mixed.survival[k - 1]);
  }
}

TEST_CASE("nll_loss") {
  const std::vector<double> half = {0.5, 0.5, 0.5, 0.5};
  CHECK(nll_loss(half, 1, false) == doctest::Approx(1.3863).epsilon(1e-4));
  CHECK(nll_loss(half, 1, false) == doctest::Approx(2.0 * std::log(2.0)));
  CHECK(nll_loss(half, 0, false) == doctest::Approx(std::log(2.0)));
  CHECK(nll_loss(half, 1, true) == doctest::Approx(2.0 * std::log(2.0)));

  const std::vector<double> none(4, 0.0);
  CHECK(nll_loss(none, 2, true) == 0.0);

  // Boundary hazards stay finite through the log floor.
  const std::vector<double> ones(4, 1.0);
  CHECK(std::isfinite(nll_loss(ones, 3, true)));
  CHECK(std::isfinite(nll_loss(none, 3, false)));
  CHECK(nll_loss(none, 3, false) == doctest::Approx(-std::log(kLogFloor)));

  CHECK_THROWS_AS(nll_loss(half, 4, false), Error);
  CHECK_THROWS_AS(nll_loss(half, -1, true), Error);
}

TEST_CASE("nll_loss_logit_grad matches central differences") {
  const std::vector<double> logits = {0.4, -1.2, 0.7, 0.1};
  for (int k = 0; k < 4; ++k) {
    for (bool censored : {false, true}) {
      CAPTURE(k);
      CAPTURE(censored);
      const auto g = nll_loss_logit_grad(HazardOutput::from_logits(logits).hazards, k, censored);
      for (int i = 0; i < 4; ++i) {
        auto up = logits, down = logits;
        up[i] += 1e-6;
        down[i] -= 1e-6;
        const double numeric = (nll_loss(HazardOutput::from_logits(up), k, censored) -
                                nll_loss(HazardOutput::from_logits(down), k, censored)) /
                               2e-6;
        CHECK(g[i] == doctest::Approx(numeric).epsilon(1e-6).scale(1.0));
      }
    }
  }
}

TEST_CASE("drop_and_rescale") {
  std::vector<double> ten(10);
  std::iota(ten.begin(), ten.end(), 1.0);
  std::reverse(ten.begin(), ten.end());
  const auto dropped = drop_and_rescale(ten, 0.8);
  CHECK(std::count_if(dropped.begin(), dropped.end(), [](double v) { return v != 0.0; }) == 2);
  CHECK(dropped[0] == 1.0);
  CHECK(dropped[1] == doctest::Approx(0.9));

  const auto flat = drop_and_rescale(std::vector<double>(7, 0.3), 0.0);
  CHECK(flat == std::vector<double>(7, 0.0));

  const auto kept = drop_and_rescale({0.2, 0.4, 0.3, 0.1}, 0.0);
  CHECK(kept[3] == 0.0);
  CHECK(kept[1] == 1.0);
  CHECK(kept[2] == doctest::Approx(2.0 / 3.0));
  CHECK(std::count(kept.begin(), kept.end(), 0.0) == 1);  // only the minimum lands on zero

  for (double v : drop_and_rescale(ten, 0.5)) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(drop_and_rescale(ten, 1.0), Error);
}

TEST_CASE("model forward") {
  const HVTSurvModel<double> model(small_config());
  const auto ps = model.init_params(3);
  const auto p = patient("P", {13, 9}, 1, false, 20);

  SUBCASE("outputs are valid hazards") {
    const auto out = model.forward(ps, sample_sub_bags(p, 2, 1));
    REQUIRE(out.hazards.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(out.hazards[k] > 0.0);
      CHECK(out.hazards[k] < 1.0);
      CHECK(out.survival[k] == doctest::Approx((k ? out.survival[k - 1] : 1.0) * (1.0 - out.hazards[k])));
    }
  }
  SUBCASE("slide order does not matter") {
    PreparedPatient swapped = p;
    std::reverse(swapped.wsis.begin(), swapped.wsis.end());
    const auto a = model.forward(ps, sample_sub_bags(p, 2, 9));
    const auto b = model.forward(ps, sample_sub_bags(swapped, 2, 9));
    for (std::size_t k = 0; k < 4; ++k) CHECK(a.hazards[k] == doctest::Approx(b.hazards[k]).epsilon(1e-12));
  }
  SUBCASE("sub-bag masking keeps whole windows") {
    const auto subs = sample_sub_bags(p, 2, 4);
    // 13 patches pad to 4 windows (two groups); 9 patches pad to 3 windows.
    REQUIRE(subs.size() == 4);
    for (const auto& s : subs) CHECK(s.length() % 4 == 0);
    const auto single = sample_sub_bags(patient("Q", {3}, 0, true, 5), 2, 4);
    CHECK(single.size() == 1);  // one window cannot be split in two
  }
  SUBCASE("wrong input width") {
    auto subs = sample_sub_bags(p, 1, 0);
    subs[0].features = FeatureMatrix::Zero(subs[0].length(), 5);
    CHECK_THROWS_AS(model.forward(ps, subs), Error);
  }
  SUBCASE("attention record") {
    const auto subs = sample_sub_bags(p, 2, 3);
    const auto rec = model.attention(ps, subs);
    REQUIRE(rec.sub_bags.size() == subs.size());
    double pool_total = 0.0;
    for (const auto& sb : rec.sub_bags) {
      for (const auto& win : sb.local)
        for (Eigen::Index i = 0; i < win.attention.rows(); ++i) CHECK(win.attention.row(i).sum() == doctest::Approx(1.0));
      for (const auto& win : sb.shuffle)
        for (Eigen::Index i = 0; i < win.attention.rows(); ++i) CHECK(win.attention.row(i).sum() == doctest::Approx(1.0));
      pool_total += std::accumulate(sb.pool_weights.begin(), sb.pool_weights.end(), 0.0);
    }
    CHECK(pool_total == doctest::Approx(1.0));

    const auto scores = export_attention(rec, 0.8);
    for (const auto& s : scores) {
      CHECK(s.score >= 0.0);
      CHECK(s.score <= 1.0);
    }
    // Every source patch of both slides is scored once per layer.
    CHECK(scores.size() == 3u * (13 + 9));
  }
}

TEST_CASE("optimisation") {
  auto cfg = small_config();
  const HVTSurvModel<double> model(cfg);
  const auto p = patient("P", {16}, 2, false, 30);
  const auto subs = sample_sub_bags(p, 2, 0);

  SUBCASE("a small gradient step lowers the loss") {
    auto ps = model.init_params(4);
    ps.zero_grad();
    const double before = model.loss_and_grad(ps, subs, p.label, p.censored);
    // Head only: with frozen features the loss is convex in these weights.
    for (const char* name : {"head.weight", "head.bias"}) ps.value(name) -= 1e-2 * ps.grad(name);
    const double after = nll_loss(model.forward(ps, subs), p.label, p.censored);
    CHECK(after < before);
  }
  SUBCASE("AdamW with zero learning rate leaves parameters unchanged") {
    auto ps = model.init_params(5);
    const auto before = ps.checksum();
    AdamW<double> opt(0.0, 1e-5);
    ps.zero_grad();
    model.loss_and_grad(ps, subs, p.label, p.censored);
    opt.step(ps);
    CHECK(ps.checksum() == before);
  }
  SUBCASE("AdamW first step moves every parameter by about lr against its gradient") {
    ParamStore<double> ps;
    ps.add("x", 1, 3) << 1.0, -1.0, 2.0;
    ps.grad("x") << 0.5, -3.0, 1e-3;
    AdamW<double> opt(0.1, 0.0);
    opt.step(ps);
    CHECK(ps.value("x")(0, 0) == doctest::Approx(0.9));
    CHECK(ps.value("x")(0, 1) == doctest::Approx(-0.9));
    CHECK(ps.value("x")(0, 2) == doctest::Approx(1.9).epsilon(1e-4));
  }
  SUBCASE("decoupled weight decay shrinks parameters without gradient") {
    ParamStore<double> ps;
    ps.add("x", 1, 1)(0, 0) = 2.0;
    AdamW<double> opt(0.1, 0.5);
    opt.step(ps);
    CHECK(ps.value("x")(0, 0) == doctest::Approx(2.0 * (1.0 - 0.05)));
  }
  SUBCASE("fit with zero learning rate returns the initial parameters") {
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.0;
    cfg.max_epochs = 2;
    const HVTSurvModel<double> frozen(cfg);
    const std::vector<PreparedPatient> train = {p, patient("A", {8}, 0, true, 31)};
    const std::vector<PreparedPatient> val = {patient("B", {8}, 3, false, 32)};
    const auto result = fit(frozen, train, val, 17);
    CHECK(result.params.checksum() == frozen.init_params(derive_seed(17, "params")).checksum());
    REQUIRE(result.history.size() == 2);
    CHECK(result.history[0].val_loss == result.history[1].val_loss);
  }
}

TEST_CASE("config key/value round trip") {
  auto cfg = small_config();
  cfg.learning_rate = 3.3e-4;
  cfg.buckets.alpha = 1.7;
  cfg.seed = 123456789012345ULL;
  const auto back = HVTSurvConfig::from_kv(cfg.to_kv());
  CHECK(back.to_kv() == cfg.to_kv());
  CHECK(back.learning_rate == cfg.learning_rate);
  CHECK(back.seed == cfg.seed);

  auto kv = cfg.to_kv();
  kv.erase("model_dim");
  CHECK_THROWS_AS(HVTSurvConfig::from_kv(kv), Error);
  kv = cfg.to_kv();
  kv["n_heads"] = "three";
  CHECK_THROWS_AS(HVTSurvConfig::from_kv(kv), Error);

  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = small_config();
  cfg.n_intervals = 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("checkpoint conversion") {
  const HVTSurvModel<double> model(small_config());
  const auto ps = model.init_params(8);
  const auto ckpt = make_checkpoint(ps, model.config());
  const auto back = params_from_checkpoint(model, ckpt);
  REQUIRE(back.entries().size() == ps.entries().size());
  for (std::size_t i = 0; i < ps.entries().size(); ++i)
    CHECK(back.entries()[i].value.isApprox(ps.entries()[i].value.cast<float>().cast<double>()));

  auto broken = ckpt;
  broken.tensors.pop_back();
  CHECK_THROWS_AS(params_from_checkpoint(model, broken), Error);
}
