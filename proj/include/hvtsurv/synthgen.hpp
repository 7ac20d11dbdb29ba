#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "hvtsurv/bagio.hpp"

namespace hvtsurv {

struct MaskShape {
  int width = 24;
  int height = 24;
  double hole_density = 0.2;
};

/// Synthetic cohort parameters. Each patient gets a latent risk r ~ U(0,1);
/// a sigmoid(signal_strength * (r - 0.5)) share of every slide's patches
/// carries the signature and the event time is exponential with rate
/// base_rate * exp(hazard_slope * (r - 0.5)).
struct SynthConfig {
  int n_patients = 200;
  std::pair<int, int> wsis_per_patient{1, 2};
  std::pair<int, int> patches_per_wsi{100, 300};
  int feature_dim = 64;
  double signal_strength = 5.0;
  double censor_rate = 0.3;
  MaskShape grid;
  std::uint64_t seed = 0;

  // Signature patches carry +-amplitude (random sign per patch) on the first
  // `signature_dims` feature dimensions, on top of N(0,1) noise. The sign flip
  // keeps the bag mean independent of the signature share.
  double signature_amplitude = 3.0;
  int signature_dims = 8;
  double hazard_slope = 15.0;
  double base_rate = 1.0 / 24.0;

  void validate() const;
};

/// Generator output plus the ground truth the tests need.
struct SynthCohort {
  std::vector<PatientRecord> records;
  std::vector<double> latent_risk;
  std::vector<double> true_time;
  /// signature[p][w][i]: patch i of bag w of patient p carries the signature.
  std::vector<std::vector<std::vector<bool>>> signature;
};

struct GridCell {
  int x = 0;
  int y = 0;
  friend bool operator==(const GridCell&, const GridCell&) = default;
  friend auto operator<=>(const GridCell&, const GridCell&) = default;
};

/// Bernoulli holes followed by the largest 8-connected component; redraws
/// (bounded) when every cell is a hole. Cells are returned sorted by (y, x).
std::vector<GridCell> gen_irregular_mask(int width, int height, double hole_density, std::uint64_t seed);

SynthCohort generate_cohort(const SynthConfig& cfg);
std::vector<PatientRecord> gen_cohort(const SynthConfig& cfg);

/// Writes bags/<wsi_id>.pbag and manifest.csv below `dir`.
void write_cohort(const std::vector<PatientRecord>& records, const std::filesystem::path& dir);

}  // namespace hvtsurv
