#include "hvtsurv/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <tuple>

#include "hvtsurv/error.hpp"
#include "hvtsurv/rng.hpp"

namespace hvtsurv {

namespace {

constexpr int kMaxMaskAttempts = 64;

int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Breadth-first growth over 8-neighbours inside `allowed`, starting at
/// `start`; stops after `limit` cells.
std::vector<int> grow_blob(const std::vector<GridCell>& cells, const std::vector<int>& cell_at, int width,
                           int height, int start, std::size_t limit) {
  std::vector<char> taken(cells.size(), 0);
  std::vector<int> out;
  std::deque<int> queue{start};
  taken[start] = 1;
  while (!queue.empty() && out.size() < limit) {
    const int cur = queue.front();
    queue.pop_front();
    out.push_back(cur);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = cells[cur].x + dx;
        const int ny = cells[cur].y + dy;
        if ((dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
        const int nb = cell_at[ny * width + nx];
        if (nb >= 0 && !taken[nb]) {
          taken[nb] = 1;
          queue.push_back(nb);
        }
      }
  }
  return out;
}

std::vector<int> index_cells(const std::vector<GridCell>& cells, int width, int height) {
  std::vector<int> cell_at(static_cast<std::size_t>(width) * height, -1);
  for (std::size_t i = 0; i < cells.size(); ++i) cell_at[cells[i].y * width + cells[i].x] = static_cast<int>(i);
  return cell_at;
}

}  // namespace

void SynthConfig::validate() const {
  require(n_patients >= 1, ErrorKind::Config, "n_patients must be >= 1");
  require(wsis_per_patient.first >= 1 && wsis_per_patient.first <= wsis_per_patient.second, ErrorKind::Config,
          "wsis_per_patient range is empty");
  require(patches_per_wsi.first >= 1 && patches_per_wsi.first <= patches_per_wsi.second, ErrorKind::Config,
          "patches_per_wsi range is empty");
  require(feature_dim >= 1, ErrorKind::Config, "feature_dim must be >= 1");
  require(signal_strength >= 0.0, ErrorKind::Config, "signal_strength must be non-negative");
  require(censor_rate >= 0.0 && censor_rate <= 1.0, ErrorKind::Config, "censor_rate must be in [0,1]");
  require(grid.width >= 1 && grid.height >= 1, ErrorKind::Config, "grid must be at least 1x1");
  require(grid.hole_density >= 0.0 && grid.hole_density < 1.0, ErrorKind::Config, "hole_density must be in [0,1)");
  require(signature_dims >= 0 && signature_dims <= feature_dim, ErrorKind::Config,
          "signature_dims must be within feature_dim");
  require(base_rate > 0.0, ErrorKind::Config, "base_rate must be positive");
}

std::vector<GridCell> gen_irregular_mask(int width, int height, double hole_density, std::uint64_t seed) {
  require(width >= 1 && height >= 1, ErrorKind::Precondition, "mask must be at least 1x1");
  require(hole_density >= 0.0 && hole_density < 1.0, ErrorKind::Precondition, "hole_density must be in [0,1)");
  auto rng = make_rng(seed, "mask");
  for (int attempt = 0; attempt < kMaxMaskAttempts; ++attempt) {
    std::vector<GridCell> open;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (uniform01(rng) >= hole_density) open.push_back({x, y});
    if (open.empty()) continue;

    const auto cell_at = index_cells(open, width, height);
    std::vector<int> component(open.size(), -1);
    std::vector<int> best;
    for (std::size_t i = 0; i < open.size(); ++i) {
      if (component[i] >= 0) continue;
      auto blob = grow_blob(open, cell_at, width, height, static_cast<int>(i), open.size());
      for (int c : blob) component[c] = static_cast<int>(i);
      if (blob.size() > best.size()) best = std::move(blob);
    }
    std::vector<GridCell> mask;
    mask.reserve(best.size());
    for (int c : best) mask.push_back(open[c]);
    std::sort(mask.begin(), mask.end(), [](const GridCell& a, const GridCell& b) {
      return std::tie(a.y, a.x) < std::tie(b.y, b.x);
    });
    return mask;
  }
  fail(ErrorKind::Numeric, "irregular mask: every draw was all holes");
}

SynthCohort generate_cohort(const SynthConfig& cfg) {
  cfg.validate();
  SynthCohort out;
  auto rng = make_rng(cfg.seed, "cohort");
  const int width = cfg.grid.width;
  const int height = cfg.grid.height;

  for (int p = 0; p < cfg.n_patients; ++p) {
    char pid[32];
    std::snprintf(pid, sizeof pid, "P%04d", p + 1);
    const double risk = uniform01(rng);
    const double share = 1.0 / (1.0 + std::exp(-cfg.signal_strength * (risk - 0.5)));

    const double rate = cfg.base_rate * std::exp(cfg.hazard_slope * (risk - 0.5));
    double u = uniform01(rng);
    while (u <= 0.0) u = uniform01(rng);
    const double event_time = -std::log(u) / rate;
    FollowUp fu{event_time, false};
    if (uniform01(rng) < cfg.censor_rate) {
      fu.censored = true;
      fu.time_months = uniform01(rng) * event_time;
    }
    // Three decimals so the manifest text round-trips the in-memory value.
    fu.time_months = std::round(fu.time_months * 1000.0) / 1000.0;

    PatientRecord rec{pid, {}, fu, std::nullopt, {}};
    std::vector<std::vector<bool>> sig_flags;
    const int n_wsi = uniform_int(rng, cfg.wsis_per_patient.first, cfg.wsis_per_patient.second);
    for (int w = 0; w < n_wsi; ++w) {
      const auto mask = gen_irregular_mask(width, height, cfg.grid.hole_density, rng());
      const auto cell_at = index_cells(mask, width, height);
      const auto target =
          static_cast<std::size_t>(uniform_int(rng, cfg.patches_per_wsi.first, cfg.patches_per_wsi.second));
      auto chosen = grow_blob(mask, cell_at, width, height,
                              static_cast<int>(uniform_index(rng, mask.size())), target);
      std::sort(chosen.begin(), chosen.end());  // raster order, as a tiler would emit

      std::vector<GridCell> cells;
      for (int c : chosen) cells.push_back(mask[c]);
      const auto local_at = index_cells(cells, width, height);
      const auto n_sig = static_cast<std::size_t>(std::lround(share * static_cast<double>(cells.size())));
      std::vector<bool> is_sig(cells.size(), false);
      if (n_sig > 0) {
        const auto blob = grow_blob(cells, local_at, width, height,
                                    static_cast<int>(uniform_index(rng, cells.size())), n_sig);
        for (int c : blob) is_sig[c] = true;
      }

      PatchBag bag;
      bag.wsi_id = rec.patient_id + "_W" + std::to_string(w + 1);
      const int ox = uniform_int(rng, 0, 40);
      const int oy = uniform_int(rng, 0, 40);
      bag.features.resize(static_cast<Eigen::Index>(cells.size()), cfg.feature_dim);
      for (std::size_t i = 0; i < cells.size(); ++i) {
        bag.coords.push_back({(cells[i].x + ox) * 256, (cells[i].y + oy) * 256});
        const double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
        for (int j = 0; j < cfg.feature_dim; ++j) {
          double v = standard_normal(rng);
          if (is_sig[i] && j < cfg.signature_dims) v += sign * cfg.signature_amplitude;
          bag.features(static_cast<Eigen::Index>(i), j) = static_cast<float>(v);
        }
      }
      rec.bags.push_back(std::move(bag));
      sig_flags.push_back(std::move(is_sig));
    }
    out.records.push_back(std::move(rec));
    out.latent_risk.push_back(risk);
    out.true_time.push_back(event_time);
    out.signature.push_back(std::move(sig_flags));
  }
  return out;
}

std::vector<PatientRecord> gen_cohort(const SynthConfig& cfg) { return generate_cohort(cfg).records; }

void write_cohort(const std::vector<PatientRecord>& records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "bags");
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) fail(ErrorKind::Io, "cannot write manifest in '" + dir.string() + "'");
  manifest << "patient_id,wsi_path,time_months,censored\n";
  char time_buf[64];
  for (const auto& rec : records) {
    std::snprintf(time_buf, sizeof time_buf, "%.3f", rec.follow_up.time_months);
    for (const auto& bag : rec.bags) {
      const auto rel = std::filesystem::path("bags") / (bag.wsi_id + ".pbag");
      write_patch_bag(bag, dir / rel);
      manifest << rec.patient_id << ',' << rel.generic_string() << ',' << time_buf << ','
               << (rec.follow_up.censored ? 1 : 0) << '\n';
    }
  }
  if (!manifest) fail(ErrorKind::Io, "manifest write failed");
}

}  // namespace hvtsurv
