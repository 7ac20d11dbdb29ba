#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace hvtsurv {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Coord {
  std::int32_t x = 0;
  std::int32_t y = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
  friend auto operator<=>(const Coord&, const Coord&) = default;
};

/// Patch features of one whole-slide image together with the level-0 pixel
/// coordinates (top-left of each 256x256 tile). Row i of `features` belongs
/// to `coords[i]`.
struct PatchBag {
  std::string wsi_id;
  std::vector<Coord> coords;
  FeatureMatrix features;

  std::size_t size() const { return coords.size(); }
  Eigen::Index dim() const { return features.cols(); }
};

struct FollowUp {
  double time_months = 0.0;
  bool censored = false;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<PatchBag> bags;
  FollowUp follow_up;
  std::optional<int> interval_label;
  /// Resolved file of each bag when loaded from a manifest.
  std::vector<std::filesystem::path> bag_paths;
};

/// Discrete survival time grid. Interval k is [t_k, t_{k+1}) with t_0 = 0,
/// t_n = +inf and `cutpoints` holding t_1 .. t_{n-1}.
struct IntervalScheme {
  int n_intervals = 0;
  std::vector<double> cutpoints;

  int label(double time_months) const;
};

/// Rearranged sequences repeat padded rows, so their PBAG files are checked
/// without the unique-coordinate rule.
enum class BagCheck { Strict, AllowDuplicates };

/// Throws Precondition if the bag breaks its invariants.
void validate_bag(const PatchBag& bag, BagCheck check = BagCheck::Strict);

PatchBag read_patch_bag(const std::filesystem::path& path, BagCheck check = BagCheck::Strict);
void write_patch_bag(const PatchBag& bag, const std::filesystem::path& path, BagCheck check = BagCheck::Strict);

/// Loads `patient_id,wsi_path,time_months,censored` rows. Relative bag paths
/// resolve against the manifest's directory. Patient order follows first
/// appearance in the file.
std::vector<PatientRecord> load_manifest(const std::filesystem::path& path);

/// Linear-interpolation quantiles of uncensored times as cutpoints; labels
/// every record in place.
IntervalScheme bin_survival_times(std::vector<PatientRecord>& records, int n_intervals);

/// Cutpoints only, from a list of uncensored times.
std::vector<double> quantile_cutpoints(std::vector<double> uncensored_times, int n_intervals);

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

/// Censorship-stratified k-fold split. Test fold f holds ~1/folds of the
/// patients; the validation set takes `validation_share` of the remainder
/// (0.2 gives the 60:15:25 ratio at 4 folds).
std::vector<FoldSplit> stratified_kfold(const std::vector<PatientRecord>& records, int folds,
                                        std::uint64_t seed, double validation_share = 0.2);

}  // namespace hvtsurv
