#include "doctest.h"

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "test_support.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Runs the command line tool with `args` (already shell-quoted where
/// needed) and an optional environment prefix.
RunResult run(const std::string& args, const std::string& env = "") {
  static int counter = 0;
  const auto dir = fs::temp_directory_path() / "hvtsurv-test-cli-io";
  fs::create_directories(dir);
  const auto out = dir / ("out" + std::to_string(counter) + ".txt");
  const auto err = dir / ("err" + std::to_string(counter++) + ".txt");
  const std::string cmd =
      env + " '" HVTSURV_CLI_PATH "' " + args + " > '" + out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const std::string kSmallCohort =
    "synth --n-patients 16 --patches-min 20 --patches-max 40 --feature-dim 8 --grid-width 10 --grid-height 10";
const std::string kSmallModel = "--model-dim 8 --window-size 4 --n-heads 2 --pool-hidden 4";

/// Small cohort shared by the cases below, generated once.
const fs::path& cohort() {
  static const fs::path dir = [] {
    const auto d = hvtsurv::testing::scratch_dir("cli-cohort");
    const auto r = run("--seed 3 --out '" + (d / "syn").string() + "' " + kSmallCohort);
    REQUIRE(r.code == 0);
    return d / "syn";
  }();
  return dir;
}

}  // namespace

TEST_CASE("synth is deterministic and reports a summary") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-synth");
  const auto a = run("--seed 9 --out '" + (dir / "a").string() + "' " + kSmallCohort);
  const auto b = run("--seed 9 --out '" + (dir / "b").string() + "' " + kSmallCohort);
  const auto c = run("--seed 10 --out '" + (dir / "c").string() + "' " + kSmallCohort);
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  REQUIRE(c.code == 0);
  CHECK(a.out.rfind("patients,wsis,patches,censored_ratio\n16,", 0) == 0);
  CHECK(read_file(dir / "a" / "outputs.csv") == read_file(dir / "b" / "outputs.csv"));
  CHECK(read_file(dir / "a" / "manifest.csv") == read_file(dir / "b" / "manifest.csv"));
  CHECK(read_file(dir / "a" / "outputs.csv") != read_file(dir / "c" / "outputs.csv"));

  // One manifest row per slide, grouped by patient.
  const auto rows = read_csv(dir / "a" / "manifest.csv");
  REQUIRE(rows.size() >= 17);
  CHECK(rows[0] == std::vector<std::string>{"patient_id", "wsi_path", "time_months", "censored"});
  std::set<std::string> seen;
  std::string last;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][0] != last) CHECK(seen.insert(rows[i][0]).second);
    last = rows[i][0];
  }
  CHECK(seen.size() == 16);
}

TEST_CASE("synth honours the censoring rate") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-censor");
  const auto r = run("--out '" + dir.string() +
                     "' synth --n-patients 500 --censor-rate 0.86 --patches-min 5 --patches-max 8 --feature-dim 4 "
                     "--signature-dims 4 --wsis-max 1 --grid-width 4 --grid-height 4 --hole-density 0");
  REQUIRE(r.code == 0);
  const auto summary = r.out.substr(r.out.find('\n') + 1);
  const double ratio = std::stod(summary.substr(summary.rfind(',') + 1));
  CHECK(std::abs(ratio - 0.86) <= 0.05);
}

TEST_CASE("run directory collisions") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-force");
  const std::string args = "--out '" + dir.string() + "' " + kSmallCohort;
  REQUIRE(run(args).code == 0);
  const auto again = run(args);
  CHECK(again.code == 1);
  CHECK(again.err.find("--force") != std::string::npos);
  CHECK(run("--force " + args).code == 0);
}

TEST_CASE("config files, precedence and validation") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-config");
  std::ofstream(dir / "run.ini") << "[synth]\nn-patients = 5\npatches-min = 10\npatches-max = 12\nfeature-dim = 4\nsignature-dims = 4\n"
                                    "grid-width = 6\ngrid-height = 6\n";
  const auto from_file = run("--config '" + (dir / "run.ini").string() + "' --out '" + (dir / "a").string() + "' synth");
  REQUIRE(from_file.code == 0);
  CHECK(from_file.out.find("\n5,") != std::string::npos);

  const auto flag_wins = run("--config '" + (dir / "run.ini").string() + "' --out '" + (dir / "b").string() +
                             "' synth --n-patients 7");
  REQUIRE(flag_wins.code == 0);
  CHECK(flag_wins.out.find("\n7,") != std::string::npos);

  std::ofstream(dir / "bad.ini") << "[synth]\nn-patiens = 5\n";
  CHECK(run("--config '" + (dir / "bad.ini").string() + "' --out '" + (dir / "c").string() + "' synth").code == 1);
}

TEST_CASE("exit codes") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-exit");
  CHECK(run("").code == 1);
  CHECK(run("frobnicate").code == 1);
  CHECK(run("synth --no-such-flag").code == 1);
  CHECK(run("--out '" + dir.string() + "' synth --censor-rate 2").code == 1);
  CHECK(run("--out '" + (dir / "x").string() + "' " + kSmallCohort, "HVTSURV_LOG=loud").code == 1);
  CHECK(run("--out '" + (dir / "y").string() + "' " + kSmallCohort, "HVTSURV_LOG=error").code == 0);

  std::ofstream(dir / "broken.csv") << "patient_id,wsi_path,time_months,censored\nP1,nowhere.pbag,1,0\n";
  CHECK(run("--out '" + (dir / "t").string() + "' train --manifest '" + (dir / "broken.csv").string() + "'").code == 1);
}

TEST_CASE("rearrange with report") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-rearrange");
  const auto r = run("--jobs 2 --out '" + dir.string() + "' rearrange --window-size 16 --raster --report --manifest '" +
                     (cohort() / "manifest.csv").string() + "'");
  REQUIRE(r.code == 0);
  const auto report = read_csv(dir / "rearrange_report.csv");
  const auto manifest = read_csv(cohort() / "manifest.csv");
  REQUIRE(report.size() == manifest.size());
  CHECK(report[0] ==
        std::vector<std::string>{"wsi_id", "n_patches", "knn_mean_manhattan", "raster_mean_manhattan"});
  for (std::size_t i = 1; i < report.size(); ++i) {
    for (const char* sub : {"rearranged", "raster"}) {
      CHECK(fs::exists(dir / sub / (report[i][0] + ".pbag")));
      CHECK(fs::exists(dir / sub / (report[i][0] + ".windows.csv")));
    }
  }

  // An unreadable bag fails the run while the readable ones still succeed.
  std::ofstream(dir / "junk.pbag") << "nope";
  const auto bad = run("--out '" + (dir / "mixed").string() + "' rearrange '" + (dir / "junk.pbag").string() + "' '" +
                       (cohort() / "bags").string() + "/" + report[1][0] + ".pbag'");
  CHECK(bad.code == 1);
  CHECK(fs::exists(dir / "mixed" / "rearranged" / (report[1][0] + ".pbag")));
}

TEST_CASE("rearrange report on the irregular-mask suite, default window size") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-rearrange-suite");
  std::string bags;
  for (int s = 0; s < 20; ++s) {
    const int side = 12 + 2 * s;
    const auto bag = hvtsurv::testing::mask_bag("mask" + std::to_string(s), side, side, 0.2, 4, 500 + s);
    hvtsurv::write_patch_bag(bag, dir / (bag.wsi_id + ".pbag"));
    bags += " '" + (dir / (bag.wsi_id + ".pbag")).string() + "'";
  }
  REQUIRE(run("--out '" + (dir / "run").string() + "' rearrange --report" + bags).code == 0);
  const auto report = read_csv(dir / "run" / "rearrange_report.csv");
  REQUIRE(report.size() == 21);
  int knn_wins = 0;
  for (std::size_t i = 1; i < report.size(); ++i) knn_wins += std::stod(report[i][2]) <= std::stod(report[i][3]);
  CHECK(knn_wins >= 19);
}

TEST_CASE("train, eval and attn") {
  const auto dir = hvtsurv::testing::scratch_dir("cli-train");
  const auto manifest = (cohort() / "manifest.csv").string();

  SUBCASE("zero epochs keeps the initial parameters") {
    const auto r = run("--out '" + dir.string() + "' train --manifest '" + manifest + "' --epochs 0 " + kSmallModel);
    REQUIRE(r.code == 0);
    for (int k = 0; k < 4; ++k) CHECK(fs::exists(dir / ("fold" + std::to_string(k) + ".ckpt")));
    CHECK(read_file(dir / "metrics.csv") == "fold,epoch,train_loss,val_loss,val_cindex\n");
  }

  SUBCASE("two epochs, deterministic evaluation and attention export") {
    const auto tr = dir / "tr";
    REQUIRE(run("--out '" + tr.string() + "' train --manifest '" + manifest + "' --folds 4 --epochs 2 " + kSmallModel)
                .code == 0);
    const auto metrics = read_csv(tr / "metrics.csv");
    CHECK(metrics.size() == 1 + 4 * 2);
    for (int k = 0; k < 4; ++k) CHECK(fs::exists(tr / ("fold" + std::to_string(k) + ".ckpt")));

    // Same seed, same checkpoints.
    const auto tr2 = dir / "tr2";
    REQUIRE(run("--out '" + tr2.string() + "' train --manifest '" + manifest + "' --epochs 2 " + kSmallModel).code ==
            0);
    CHECK(read_file(tr / "outputs.csv") == read_file(tr2 / "outputs.csv"));

    const auto e1 = dir / "e1";
    const auto e2 = dir / "e2";
    REQUIRE(run("--out '" + e1.string() + "' eval --manifest '" + manifest + "' --checkpoint-dir '" + tr.string() + "'")
                .code == 0);
    REQUIRE(run("--out '" + e2.string() + "' eval --manifest '" + manifest + "' --checkpoint-dir '" + tr.string() + "'")
                .code == 0);
    CHECK(read_file(e1 / "eval_report.csv") == read_file(e2 / "eval_report.csv"));
    CHECK(read_file(e1 / "km_curves.csv") == read_file(e2 / "km_curves.csv"));
    const auto report = read_csv(e1 / "eval_report.csv");
    CHECK(report[0] == std::vector<std::string>{"metric", "fold", "value"});
    CHECK(report.size() == 1 + 4 + 3);

    const auto patient = read_csv(manifest)[1][0];
    const auto at = dir / "at";
    REQUIRE(run("--out '" + at.string() + "' attn --manifest '" + manifest + "' --checkpoint '" +
                (tr / "fold0.ckpt").string() + "' --patient " + patient)
                .code == 0);
    const auto rows = read_csv(at / ("attention_" + patient + ".csv"));
    CHECK(rows[0] == std::vector<std::string>{"layer", "wsi_id", "patch_index", "gx", "gy", "score"});
    std::map<std::pair<std::string, std::string>, std::pair<int, int>> nonzero_total;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double s = std::stod(rows[i][5]);
      CHECK(s >= 0.0);
      CHECK(s <= 1.0);
      auto& nt = nonzero_total[{rows[i][0], rows[i][1]}];
      nt.first += s != 0.0;
      nt.second += 1;
    }
    CHECK(nonzero_total.size() % 3 == 0);
    for (const auto& [key, nt] : nonzero_total) {
      CAPTURE(key.first);
      const int dropped = static_cast<int>(std::floor(0.8 * nt.second + 1e-9));
      // With nothing dropped the minimum itself rescales to zero.
      CHECK(nt.first == (dropped > 0 ? nt.second - dropped : nt.second - 1));
    }

    CHECK(run("--out '" + (dir / "none").string() + "' attn --manifest '" + manifest + "' --checkpoint '" +
              (tr / "fold0.ckpt").string() + "' --patient NOBODY")
              .code == 1);
  }

  SUBCASE("checkpoint and cohort mismatch") {
    const auto other = dir / "other";
    REQUIRE(run("--seed 4 --out '" + other.string() +
                "' synth --n-patients 8 --patches-min 20 --patches-max 30 --feature-dim 6 --signature-dims 4 --grid-width 8 "
                "--grid-height 8")
                .code == 0);
    const auto tr = dir / "tr0";
    REQUIRE(run("--out '" + tr.string() + "' train --manifest '" + manifest + "' --epochs 0 " + kSmallModel).code == 0);
    CHECK(run("--out '" + (dir / "ev").string() + "' eval --manifest '" + (other / "manifest.csv").string() +
              "' --checkpoint-dir '" + tr.string() + "'")
              .code == 1);
  }
}
