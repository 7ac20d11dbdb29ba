#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hvtsurv/bagio.hpp"

namespace hvtsurv {

/// Patch position in grid units after scaling; both axes start at 1.
struct GridCoord {
  int gx = 1;
  int gy = 1;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

/// A padded feature sequence cut into consecutive windows of `window_size`
/// rows. `origin[i]` is the row of the source PatchBag that row i copies, so
/// padded duplicates share an origin with the row they mirror.
struct RearrangedBag {
  std::string wsi_id;
  FeatureMatrix features;
  std::vector<GridCoord> scaled_coords;
  std::vector<int> origin;
  int window_size = 1;

  Eigen::Index length() const { return features.rows(); }
  int n_windows() const { return static_cast<int>(features.rows() / window_size); }
};

/// One of the m window groups drawn from a RearrangedBag. Windows keep their
/// relative order from the parent; `parent_windows` lists which ones.
struct SubWsiBag {
  std::string source_wsi;
  FeatureMatrix features;
  std::vector<GridCoord> scaled_coords;
  std::vector<int> origin;
  std::vector<int> parent_windows;
  int window_size = 1;

  Eigen::Index length() const { return features.rows(); }
  int n_windows() const { return static_cast<int>(features.rows() / window_size); }
};

struct PaddedBag {
  FeatureMatrix features;
  std::vector<Coord> coords;
  std::vector<int> origin;
  int left = 0;
  int right = 0;
};

/// Pixel coordinates to 1-based grid units: divide by 256, subtract the
/// per-bag minimum, add one.
std::vector<GridCoord> scale_coords(std::span<const Coord> coords);

/// Pads b rows up to the next multiple of w, floor(pad/2) in front and the
/// rest behind. Mirrors without repeating the edge row; falls back to
/// repeating the edge row when the bag is too short to mirror.
PaddedBag reflect_pad(const PatchBag& bag, int w);

/// Greedy nearest-neighbour windowing: the first remaining row anchors a
/// window made of the w rows closest to it (Euclidean, grid units), which
/// are then removed. Ties break on (gy, gx, sequence index).
RearrangedBag knn_rearrange(const PatchBag& bag, int w);

/// Baseline: raster order by (y, x), padded as above, consecutive windows.
RearrangedBag raster_order(const PatchBag& bag, int w);

/// Mean over windows of the unordered-pair sum of Manhattan distances.
double window_mean_manhattan(const RearrangedBag& bag);

/// Seeded partition of whole windows into m sub-bags; group sizes differ by
/// at most one, with the extra windows going to the lowest groups.
std::vector<SubWsiBag> random_window_mask(const RearrangedBag& bag, int m, std::uint64_t seed);

/// The unmasked bag viewed as a single sub-bag.
SubWsiBag as_single_sub_bag(const RearrangedBag& bag);

/// CSV `row_index,window_index,gx,gy`.
void write_window_sidecar(const RearrangedBag& bag, const std::filesystem::path& path);

/// The rearranged sequence as a PBAG payload; coordinates are written back
/// in pixels (grid units times 256) and padded rows are kept.
PatchBag to_patch_bag(const RearrangedBag& bag);

}  // namespace hvtsurv
