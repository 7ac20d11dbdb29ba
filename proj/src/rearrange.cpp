#include "hvtsurv/rearrange.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <tuple>

#include "hvtsurv/error.hpp"
#include "hvtsurv/rng.hpp"

namespace hvtsurv {

namespace {

// Source row for padded position `pos` of a sequence of length b with
// `left` padded rows in front. Positions outside [0, b) mirror about the
// edge row without repeating it.
int reflected_index(int pos, int b, bool replicate) {
  if (pos >= 0 && pos < b) return pos;
  if (replicate) return pos < 0 ? 0 : b - 1;
  return pos < 0 ? -pos : 2 * (b - 1) - pos;
}

PaddedBag pad_rows(const FeatureMatrix& features, const std::vector<Coord>& coords, int w) {
  require(w >= 1, ErrorKind::Precondition, "window size must be >= 1");
  const int b = static_cast<int>(coords.size());
  require(b >= 1, ErrorKind::EmptyBag, "cannot pad an empty bag");
  const int padded = (b + w - 1) / w * w;
  const int extra = padded - b;

  PaddedBag out;
  out.left = extra / 2;
  out.right = extra - out.left;
  const bool replicate = b == 1 || extra >= b;
  out.features.resize(padded, features.cols());
  out.coords.resize(padded);
  out.origin.resize(padded);
  for (int i = 0; i < padded; ++i) {
    const int src = reflected_index(i - out.left, b, replicate);
    out.features.row(i) = features.row(src);
    out.coords[i] = coords[src];
    out.origin[i] = src;
  }
  return out;
}

RearrangedBag gather(const PaddedBag& padded, const std::vector<GridCoord>& grid, const std::vector<int>& order,
                     int w, const std::string& wsi_id) {
  RearrangedBag out;
  out.wsi_id = wsi_id;
  out.window_size = w;
  out.features.resize(static_cast<Eigen::Index>(order.size()), padded.features.cols());
  out.scaled_coords.reserve(order.size());
  out.origin.reserve(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = padded.features.row(order[i]);
    out.scaled_coords.push_back(grid[order[i]]);
    out.origin.push_back(padded.origin[order[i]]);
  }
  return out;
}

}  // namespace

std::vector<GridCoord> scale_coords(std::span<const Coord> coords) {
  std::vector<GridCoord> out;
  if (coords.empty()) return out;
  int min_x = std::numeric_limits<int>::max();
  int min_y = std::numeric_limits<int>::max();
  for (const auto& c : coords) {
    require(c.x >= 0 && c.y >= 0, ErrorKind::Precondition, "negative pixel coordinate");
    min_x = std::min(min_x, c.x / 256);
    min_y = std::min(min_y, c.y / 256);
  }
  out.reserve(coords.size());
  for (const auto& c : coords) out.push_back({c.x / 256 - min_x + 1, c.y / 256 - min_y + 1});
  return out;
}

PaddedBag reflect_pad(const PatchBag& bag, int w) { return pad_rows(bag.features, bag.coords, w); }

RearrangedBag knn_rearrange(const PatchBag& bag, int w) {
  validate_bag(bag);
  const auto padded = reflect_pad(bag, w);
  const auto grid = scale_coords(padded.coords);
  const int total = static_cast<int>(grid.size());

  std::vector<int> remaining(total);
  std::iota(remaining.begin(), remaining.end(), 0);
  std::vector<int> order;
  order.reserve(total);

  using Key = std::tuple<std::int64_t, int, int, int>;
  std::vector<std::pair<Key, int>> candidates;
  std::vector<char> picked(total, 0);
  while (!remaining.empty()) {
    const int anchor = remaining.front();
    const auto& a = grid[anchor];
    candidates.clear();
    for (std::size_t r = 1; r < remaining.size(); ++r) {
      const int idx = remaining[r];
      const std::int64_t dx = grid[idx].gx - a.gx;
      const std::int64_t dy = grid[idx].gy - a.gy;
      candidates.push_back({Key{dx * dx + dy * dy, grid[idx].gy, grid[idx].gx, idx}, idx});
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(w - 1), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take), candidates.end());

    // The anchor is always part of its own window, even among equal-distance
    // padded duplicates.
    order.push_back(anchor);
    picked[anchor] = 1;
    for (std::size_t k = 0; k < take; ++k) {
      order.push_back(candidates[k].second);
      picked[candidates[k].second] = 1;
    }
    std::erase_if(remaining, [&](int idx) { return picked[idx] != 0; });
  }
  return gather(padded, grid, order, w, bag.wsi_id);
}

RearrangedBag raster_order(const PatchBag& bag, int w) {
  validate_bag(bag);
  std::vector<int> perm(bag.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int i, int j) {
    return std::tie(bag.coords[i].y, bag.coords[i].x) < std::tie(bag.coords[j].y, bag.coords[j].x);
  });
  FeatureMatrix sorted(bag.features.rows(), bag.features.cols());
  std::vector<Coord> coords(bag.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    sorted.row(static_cast<Eigen::Index>(i)) = bag.features.row(perm[i]);
    coords[i] = bag.coords[perm[i]];
  }
  auto padded = pad_rows(sorted, coords, w);
  for (auto& o : padded.origin) o = perm[o];
  const auto grid = scale_coords(padded.coords);
  std::vector<int> order(grid.size());
  std::iota(order.begin(), order.end(), 0);
  return gather(padded, grid, order, w, bag.wsi_id);
}

double window_mean_manhattan(const RearrangedBag& bag) {
  const int w = bag.window_size;
  const int n = bag.n_windows();
  require(n >= 1, ErrorKind::Precondition, "bag has no windows");
  double total = 0.0;
  for (int win = 0; win < n; ++win) {
    std::int64_t sum = 0;
    for (int i = win * w; i < (win + 1) * w; ++i)
      for (int j = i + 1; j < (win + 1) * w; ++j)
        sum += std::abs(bag.scaled_coords[i].gx - bag.scaled_coords[j].gx) +
               std::abs(bag.scaled_coords[i].gy - bag.scaled_coords[j].gy);
    total += static_cast<double>(sum);
  }
  return total / n;
}

std::vector<SubWsiBag> random_window_mask(const RearrangedBag& bag, int m, std::uint64_t seed) {
  require(m >= 1, ErrorKind::Config, "number of sub-bags must be >= 1");
  const int n = bag.n_windows();
  require(m <= n, ErrorKind::Config,
          "cannot split " + std::to_string(n) + " windows into " + std::to_string(m) + " sub-bags");

  std::vector<int> windows(n);
  std::iota(windows.begin(), windows.end(), 0);
  auto rng = make_rng(seed, "window-mask");
  portable_shuffle(windows.begin(), windows.end(), rng);

  const int w = bag.window_size;
  std::vector<SubWsiBag> out(m);
  int cursor = 0;
  for (int g = 0; g < m; ++g) {
    const int count = n / m + (g < n % m ? 1 : 0);
    auto& sub = out[g];
    sub.parent_windows.assign(windows.begin() + cursor, windows.begin() + cursor + count);
    cursor += count;
    std::sort(sub.parent_windows.begin(), sub.parent_windows.end());
    sub.source_wsi = bag.wsi_id;
    sub.window_size = w;
    sub.features.resize(static_cast<Eigen::Index>(count) * w, bag.features.cols());
    Eigen::Index row = 0;
    for (int win : sub.parent_windows) {
      sub.features.middleRows(row, w) = bag.features.middleRows(static_cast<Eigen::Index>(win) * w, w);
      row += w;
      for (int i = win * w; i < (win + 1) * w; ++i) {
        sub.scaled_coords.push_back(bag.scaled_coords[i]);
        sub.origin.push_back(bag.origin[i]);
      }
    }
  }
  return out;
}

SubWsiBag as_single_sub_bag(const RearrangedBag& bag) {
  SubWsiBag sub;
  sub.source_wsi = bag.wsi_id;
  sub.features = bag.features;
  sub.scaled_coords = bag.scaled_coords;
  sub.origin = bag.origin;
  sub.window_size = bag.window_size;
  sub.parent_windows.resize(static_cast<std::size_t>(bag.n_windows()));
  std::iota(sub.parent_windows.begin(), sub.parent_windows.end(), 0);
  return sub;
}

void write_window_sidecar(const RearrangedBag& bag, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot write '" + path.string() + "'");
  os << "row_index,window_index,gx,gy\n";
  for (std::size_t i = 0; i < bag.scaled_coords.size(); ++i)
    os << i << ',' << i / static_cast<std::size_t>(bag.window_size) << ',' << bag.scaled_coords[i].gx << ','
       << bag.scaled_coords[i].gy << '\n';
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

PatchBag to_patch_bag(const RearrangedBag& bag) {
  PatchBag out;
  out.wsi_id = bag.wsi_id;
  out.features = bag.features;
  out.coords.reserve(bag.scaled_coords.size());
  for (const auto& g : bag.scaled_coords) out.coords.push_back({g.gx * 256, g.gy * 256});
  return out;
}

}  // namespace hvtsurv
