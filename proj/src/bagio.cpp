#include "hvtsurv/bagio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hvtsurv/error.hpp"
#include "hvtsurv/rng.hpp"

namespace hvtsurv {

namespace {

constexpr std::array<char, 4> kMagic{'P', 'B', 'A', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

int IntervalScheme::label(double time_months) const {
  // [t_k, t_{k+1}): a time equal to a cutpoint belongs to the upper interval.
  return static_cast<int>(std::upper_bound(cutpoints.begin(), cutpoints.end(), time_months) - cutpoints.begin());
}

void validate_bag(const PatchBag& bag, BagCheck check) {
  require(!bag.coords.empty(), ErrorKind::EmptyBag, "bag '" + bag.wsi_id + "' has no patches");
  require(static_cast<Eigen::Index>(bag.coords.size()) == bag.features.rows(), ErrorKind::Precondition,
          "bag '" + bag.wsi_id + "': coordinate count differs from feature rows");
  require(bag.features.cols() >= 1, ErrorKind::Precondition, "bag '" + bag.wsi_id + "': feature dimension is 0");
  std::vector<Coord> sorted = bag.coords;
  for (const auto& c : sorted)
    require(c.x >= 0 && c.y >= 0, ErrorKind::Precondition, "bag '" + bag.wsi_id + "': negative coordinate");
  if (check == BagCheck::AllowDuplicates) return;
  std::sort(sorted.begin(), sorted.end());
  require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), ErrorKind::Precondition,
          "bag '" + bag.wsi_id + "': duplicate coordinates");
}

void write_patch_bag(const PatchBag& bag, const std::filesystem::path& path, BagCheck check) {
  validate_bag(bag, check);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
  os.write(kMagic.data(), 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(bag.size()));
  put_u32(os, static_cast<std::uint32_t>(bag.dim()));
  for (const auto& c : bag.coords) {
    put_u32(os, static_cast<std::uint32_t>(c.x));
    put_u32(os, static_cast<std::uint32_t>(c.y));
  }
  const float* data = bag.features.data();
  const auto n = static_cast<std::size_t>(bag.features.size());
  for (std::size_t i = 0; i < n; ++i) put_u32(os, std::bit_cast<std::uint32_t>(data[i]));
  if (!os) fail(ErrorKind::Io, "write to '" + path.string() + "' failed");
}

PatchBag read_patch_bag(const std::filesystem::path& path, BagCheck check) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";
  require(buf.size() >= 4 && std::memcmp(buf.data(), kMagic.data(), 4) == 0, ErrorKind::Format, "bad magic" + where);
  require(buf.size() >= 16, ErrorKind::Corruption, "truncated header" + where);
  require(get_u32(buf.data() + 4) == kVersion, ErrorKind::Format, "unsupported version" + where);
  const std::uint64_t b = get_u32(buf.data() + 8);
  const std::uint64_t d = get_u32(buf.data() + 12);
  require(b > 0, ErrorKind::EmptyBag, "empty bag" + where);
  require(d > 0, ErrorKind::Corruption, "zero feature dimension" + where);
  const std::uint64_t expected = 16 + b * 8 + b * d * 4;
  require(buf.size() >= expected, ErrorKind::Corruption, "truncated payload" + where);
  require(buf.size() == expected, ErrorKind::Corruption, "trailing bytes" + where);

  PatchBag bag;
  bag.wsi_id = path.stem().string();
  bag.coords.resize(b);
  const unsigned char* p = buf.data() + 16;
  for (std::uint64_t i = 0; i < b; ++i, p += 8)
    bag.coords[i] = {static_cast<std::int32_t>(get_u32(p)), static_cast<std::int32_t>(get_u32(p + 4))};
  bag.features.resize(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(d));
  float* out = bag.features.data();
  for (std::uint64_t i = 0; i < b * d; ++i, p += 4) out[i] = std::bit_cast<float>(get_u32(p));
  try {
    validate_bag(bag, check);
  } catch (const Error& e) {
    fail(ErrorKind::Corruption, e.what());
  }
  return bag;
}

std::vector<PatientRecord> load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::Io, "cannot open manifest '" + path.string() + "'");
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorKind::Validation, "manifest is empty");
  const auto header = split_csv_line(line);
  require(header == std::vector<std::string>{"patient_id", "wsi_path", "time_months", "censored"},
          ErrorKind::Validation, "manifest header must be patient_id,wsi_path,time_months,censored");

  const auto base = path.parent_path();
  std::vector<PatientRecord> records;
  std::map<std::string, std::size_t> index;
  std::set<std::pair<std::string, std::string>> seen;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    const std::string at = "manifest line " + std::to_string(lineno);
    require(cells.size() == 4, ErrorKind::Validation, at + ": expected 4 columns");
    const auto& pid = cells[0];
    const auto& wsi = cells[1];
    require(!pid.empty() && !wsi.empty(), ErrorKind::Validation, at + ": empty patient_id or wsi_path");
    require(seen.emplace(pid, wsi).second, ErrorKind::Validation, at + ": duplicate (patient_id, wsi_path)");

    FollowUp fu;
    std::size_t used = 0;
    try {
      fu.time_months = std::stod(cells[2], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == cells[2].size() && used > 0, ErrorKind::Validation, at + ": unparsable time");
    require(std::isfinite(fu.time_months) && fu.time_months >= 0.0, ErrorKind::Validation,
            at + ": negative or non-finite time");
    require(cells[3] == "0" || cells[3] == "1", ErrorKind::Validation, at + ": censored must be 0 or 1");
    fu.censored = cells[3] == "1";

    std::filesystem::path bag_path = wsi;
    if (bag_path.is_relative()) bag_path = base / bag_path;
    require(std::filesystem::exists(bag_path), ErrorKind::Resolution, at + ": missing bag file " + bag_path.string());

    auto [it, inserted] = index.emplace(pid, records.size());
    if (inserted) {
      records.push_back(PatientRecord{pid, {}, fu, std::nullopt, {}});
    } else {
      const auto& prev = records[it->second].follow_up;
      require(prev.time_months == fu.time_months && prev.censored == fu.censored, ErrorKind::Validation,
              at + ": follow-up differs from earlier rows of patient " + pid);
    }
    records[it->second].bags.push_back(read_patch_bag(bag_path));
    records[it->second].bag_paths.push_back(bag_path);
  }

  if (!records.empty()) {
    const auto d = records.front().bags.front().dim();
    for (const auto& r : records)
      for (const auto& b : r.bags)
        require(b.dim() == d, ErrorKind::Validation, "feature dimension differs across bags (" + b.wsi_id + ")");
  }
  return records;
}

std::vector<double> quantile_cutpoints(std::vector<double> times, int n_intervals) {
  require(n_intervals >= 2, ErrorKind::Config, "need at least 2 intervals");
  std::sort(times.begin(), times.end());
  std::vector<double> uniq = times;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  require(static_cast<int>(uniq.size()) >= n_intervals, ErrorKind::InsufficientData,
          "need at least " + std::to_string(n_intervals) + " distinct uncensored times, have " +
              std::to_string(uniq.size()));

  std::vector<double> cuts;
  const double last = static_cast<double>(times.size() - 1);
  for (int q = 1; q < n_intervals; ++q) {
    const double h = last * q / n_intervals;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, times.size() - 1);
    cuts.push_back(times[lo] + (h - static_cast<double>(lo)) * (times[hi] - times[lo]));
  }
  for (std::size_t i = 1; i < cuts.size(); ++i)
    require(cuts[i] > cuts[i - 1], ErrorKind::InsufficientData, "tied quantiles; cutpoints not strictly increasing");
  return cuts;
}

IntervalScheme bin_survival_times(std::vector<PatientRecord>& records, int n_intervals) {
  std::vector<double> uncensored;
  for (const auto& r : records)
    if (!r.follow_up.censored) uncensored.push_back(r.follow_up.time_months);
  IntervalScheme scheme{n_intervals, quantile_cutpoints(std::move(uncensored), n_intervals)};
  for (auto& r : records) r.interval_label = scheme.label(r.follow_up.time_months);
  return scheme;
}

std::vector<FoldSplit> stratified_kfold(const std::vector<PatientRecord>& records, int folds, std::uint64_t seed,
                                        double validation_share) {
  require(!records.empty(), ErrorKind::Config, "no patients to split");
  require(folds >= 2, ErrorKind::Config, "folds must be >= 2");
  require(static_cast<std::size_t>(folds) <= records.size(), ErrorKind::Config,
          "folds (" + std::to_string(folds) + ") exceed patient count (" + std::to_string(records.size()) + ")");
  require(validation_share >= 0.0 && validation_share < 1.0, ErrorKind::Config, "validation share must be in [0,1)");

  // Strata are laid end to end in shuffled order and dealt round-robin, so
  // fold sizes differ by at most one and so does each stratum's share.
  auto rng = make_rng(seed, "kfold");
  std::vector<std::size_t> order;
  for (int stratum : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (static_cast<int>(records[i].follow_up.censored) == stratum) members.push_back(i);
    portable_shuffle(members.begin(), members.end(), rng);
    order.insert(order.end(), members.begin(), members.end());
  }
  std::vector<int> fold_of(records.size());
  for (std::size_t j = 0; j < order.size(); ++j) fold_of[order[j]] = static_cast<int>(j % folds);

  std::vector<FoldSplit> splits(folds);
  for (int f = 0; f < folds; ++f) {
    std::vector<std::size_t> pool;
    for (std::size_t idx : order) (fold_of[idx] == f ? splits[f].test : pool).push_back(idx);
    for (std::size_t j = 0; j < pool.size(); ++j) {
      const auto before = static_cast<long>(std::floor(static_cast<double>(j) * validation_share + 1e-9));
      const auto after = static_cast<long>(std::floor(static_cast<double>(j + 1) * validation_share + 1e-9));
      (after > before ? splits[f].validation : splits[f].train).push_back(pool[j]);
    }
    std::sort(splits[f].train.begin(), splits[f].train.end());
    std::sort(splits[f].validation.begin(), splits[f].validation.end());
    std::sort(splits[f].test.begin(), splits[f].test.end());
  }
  return splits;
}

}  // namespace hvtsurv
