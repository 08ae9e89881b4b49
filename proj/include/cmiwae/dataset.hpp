// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cmiwae/distributions.hpp"
#include "cmiwae/grid_format.hpp"
#include "cmiwae/random.hpp"
#include "cmiwae/tensor.hpp"

namespace cmiwae {

inline constexpr std::size_t kXChannels = 4;
inline constexpr std::size_t kCChannels = 37;
inline constexpr std::size_t kMonthsPerYear = 7;

// Auxiliary channel layout.
inline constexpr std::size_t kTimeChannel = 0;
inline constexpr std::size_t kEmbedFirst = 1;
inline constexpr std::size_t kEmbedCount = 3;
inline constexpr std::size_t kLonChannel = 4;
inline constexpr std::size_t kLatChannel = 5;
inline constexpr std::size_t kElevChannel = 6;
inline constexpr std::size_t kLandCoverFirst = 7;
inline constexpr std::size_t kLandCoverCount = 18;
inline constexpr std::size_t kMeteoFirst = 25;
inline constexpr std::size_t kMeteoCount = 12;

/// Whether an auxiliary channel is standardized. Land-cover fractions and
/// the (model-filled) month embedding slots are left as they are.
inline bool standardized_channel(std::size_t ch) {
  return ch == kTimeChannel || (ch >= kLonChannel && ch <= kElevChannel) || ch >= kMeteoFirst;
}

inline std::vector<std::string> default_channel_names() {
  std::vector<std::string> n{"time", "month_emb0", "month_emb1", "month_emb2", "lon", "lat", "elevation"};
  for (std::size_t i = 0; i < kLandCoverCount; ++i) n.push_back("lc" + std::to_string(i));
  for (std::size_t i = 0; i < kMeteoCount; ++i) n.push_back("met" + std::to_string(i));
  return n;
}

/// Per auxiliary channel mean and standard deviation.
struct ChannelStats {
  std::vector<double> mean = std::vector<double>(kCChannels, 0.0);
  std::vector<double> stdev = std::vector<double>(kCChannels, 1.0);
};

/// The masked spatio-temporal grid. x holds CNT, BA, ln(CNT+1), ln(BA+1)
/// with missing entries stored as zero; c_raw holds the auxiliary channels
/// as read from file and c the same channels standardized by `c_stats`.
struct MaskedDataset {
  std::size_t T = 0, W = 0, H = 0;
  std::vector<double> x;                  // [T, 4, W, H]
  std::vector<double> c_raw;              // [T, 37, W, H]
  std::vector<double> c;                  // [T, 37, W, H]
  std::vector<std::uint8_t> mask_cnt;     // [T, W, H], 1 = observed
  std::vector<std::uint8_t> mask_ba;      // [T, W, H]
  std::vector<std::uint8_t> geo;          // [W, H], 1 = inside the region
  std::vector<int> year;                  // per t
  std::vector<std::size_t> month;         // per t, 0-based within the year
  ChannelStats c_stats;
  std::vector<std::string> c_names = default_channel_names();

  std::size_t cells() const { return W * H; }
  double x_at(std::size_t t, std::size_t ch, std::size_t cell) const { return x[(t * kXChannels + ch) * cells() + cell]; }
  bool observed(std::size_t t, std::size_t cell, Variable v) const {
    const auto& m = v == Variable::cnt ? mask_cnt : mask_ba;
    return geo[cell] && m[t * cells() + cell];
  }
  bool missing(std::size_t t, std::size_t cell, Variable v) const {
    const auto& m = v == Variable::cnt ? mask_cnt : mask_ba;
    return geo[cell] && !m[t * cells() + cell];
  }

  std::vector<int> years() const {
    std::set<int> s(year.begin(), year.end());
    return {s.begin(), s.end()};
  }

  std::vector<std::size_t> months_of(const std::vector<int>& ys) const {
    std::vector<std::size_t> ts;
    for (std::size_t t = 0; t < T; ++t) {
      if (std::find(ys.begin(), ys.end(), year[t]) != ys.end()) ts.push_back(t);
    }
    return ts;
  }
};

/// Rewrites c from c_raw with the given statistics.
inline void apply_channel_stats(MaskedDataset& ds, const ChannelStats& stats) {
  if (stats.mean.size() != kCChannels || stats.stdev.size() != kCChannels) throw DataError("channel stats size");
  ds.c_stats = stats;
  ds.c.resize(ds.c_raw.size());
  const std::size_t S = ds.cells();
  for (std::size_t t = 0; t < ds.T; ++t) {
    for (std::size_t ch = 0; ch < kCChannels; ++ch) {
      const double m = stats.mean[ch], s = stats.stdev[ch];
      const std::size_t base = (t * kCChannels + ch) * S;
      for (std::size_t i = 0; i < S; ++i) {
        ds.c[base + i] = ds.geo[i] ? (ds.c_raw[base + i] - m) / s : 0.0;
      }
    }
  }
}

/// Mean and standard deviation of each standardized channel over the region
/// cells of the given months; other channels get (0, 1).
inline ChannelStats compute_channel_stats(const MaskedDataset& ds, const std::vector<std::size_t>& ts) {
  ChannelStats st;
  const std::size_t S = ds.cells();
  for (std::size_t ch = 0; ch < kCChannels; ++ch) {
    if (!standardized_channel(ch)) continue;
    double sum = 0.0, n = 0.0;
    for (std::size_t t : ts) {
      for (std::size_t i = 0; i < S; ++i) {
        if (ds.geo[i]) {
          sum += ds.c_raw[(t * kCChannels + ch) * S + i];
          n += 1.0;
        }
      }
    }
    if (n == 0.0) continue;
    const double m = sum / n;
    double v = 0.0;
    for (std::size_t t : ts) {
      for (std::size_t i = 0; i < S; ++i) {
        if (ds.geo[i]) {
          const double d = ds.c_raw[(t * kCChannels + ch) * S + i] - m;
          v += d * d;
        }
      }
    }
    const double sd = std::sqrt(v / n);
    st.mean[ch] = m;
    st.stdev[ch] = sd > 0.0 ? sd : 1.0;
  }
  return st;
}

/// Checks the dataset invariants. Violations that only affect modelling
/// quality (CNT and BA masked differently) are returned as warnings.
inline std::vector<std::string> validate_dataset(const MaskedDataset& ds) {
  std::vector<std::string> warnings;
  const std::size_t S = ds.cells();
  if (ds.x.size() != ds.T * kXChannels * S || ds.c_raw.size() != ds.T * kCChannels * S ||
      ds.mask_cnt.size() != ds.T * S || ds.mask_ba.size() != ds.T * S || ds.geo.size() != S ||
      ds.year.size() != ds.T || ds.month.size() != ds.T) {
    throw DataError("dataset arrays are inconsistent with T=" + std::to_string(ds.T) + ", W=" + std::to_string(ds.W) +
                    ", H=" + std::to_string(ds.H));
  }
  std::size_t mask_disagreements = 0;
  for (std::size_t t = 0; t < ds.T; ++t) {
    if (ds.month[t] >= kMonthsPerYear) throw DataError("month index out of range at t=" + std::to_string(t));
    for (std::size_t i = 0; i < S; ++i) {
      const double cnt = ds.x_at(t, 0, i), ba = ds.x_at(t, 1, i);
      const bool oc = ds.mask_cnt[t * S + i], ob = ds.mask_ba[t * S + i];
      if (oc != ob) ++mask_disagreements;
      const std::string where = " at t=" + std::to_string(t) + ", cell " + std::to_string(i);
      if (!ds.geo[i]) {
        for (std::size_t ch = 0; ch < kXChannels; ++ch) {
          if (ds.x_at(t, ch, i) != 0.0) throw DataError("nonzero value outside the region" + where);
        }
        continue;
      }
      if ((oc && cnt < 0.0) || (ob && ba < 0.0)) throw DataError("negative observation" + where);
      if (oc && std::abs(ds.x_at(t, 2, i) - std::log1p(cnt)) > 1e-9 * (1.0 + std::log1p(cnt))) {
        throw DataError("ln(CNT+1) channel inconsistent" + where);
      }
      if (ob && std::abs(ds.x_at(t, 3, i) - std::log1p(ba)) > 1e-9 * (1.0 + std::log1p(ba))) {
        throw DataError("ln(BA+1) channel inconsistent" + where);
      }
      if (oc && ob && ((cnt == 0.0) != (ba == 0.0))) throw DataError("CNT and BA disagree on zero" + where);
    }
  }
  if (mask_disagreements > 0) {
    warnings.push_back(std::to_string(mask_disagreements) + " cells have different CNT and BA masks");
  }
  return warnings;
}

// ---------------------------------------------------------------------------
// Files

/// Flat `key = value` text with '#' comments.
using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::istream& in, const std::string& what) {
  KeyValues kv;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      if (a == std::string::npos) return std::string();
      return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) throw DataError(what + " line " + std::to_string(line_no) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw DataError(what + ": bad number '" + item + "'");
    }
  }
  return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

struct DatasetFiles {
  static constexpr const char* manifest = "manifest.txt";
  static constexpr const char* x = "x.cmw";
  static constexpr const char* c = "c.cmw";
  static constexpr const char* mask_cnt = "mask_cnt.cmw";
  static constexpr const char* mask_ba = "mask_ba.cmw";
  static constexpr const char* geo = "geo.cmw";
  static constexpr const char* truth = "truth.cmw";
  static constexpr const char* thresholds = "thresholds.txt";
};

inline GridArray to_grid(std::size_t T, std::size_t C, std::size_t W, std::size_t H, GridDtype dtype,
                         std::vector<double> values) {
  GridArray g;
  g.dims = {static_cast<std::uint32_t>(T), static_cast<std::uint32_t>(C), static_cast<std::uint32_t>(W),
            static_cast<std::uint32_t>(H)};
  g.dtype = dtype;
  g.values = std::move(values);
  return g;
}

inline std::vector<double> as_doubles(const std::vector<std::uint8_t>& m) { return {m.begin(), m.end()}; }

/// Writes the dataset (and optionally the full truth x) into `dir`. Returns
/// the paths written.
inline std::vector<std::string> save_dataset(const std::string& dir, const MaskedDataset& ds,
                                             const std::vector<double>* truth_x = nullptr,
                                             const ThresholdSet* thresholds = nullptr) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  std::vector<std::string> written;
  auto grid = [&](const char* name, const GridArray& g) {
    save_grid((root / name).string(), g);
    written.push_back((root / name).string());
  };
  grid(DatasetFiles::x, to_grid(ds.T, kXChannels, ds.W, ds.H, GridDtype::f64, ds.x));
  grid(DatasetFiles::c, to_grid(ds.T, kCChannels, ds.W, ds.H, GridDtype::f64, ds.c_raw));
  grid(DatasetFiles::mask_cnt, to_grid(ds.T, 1, ds.W, ds.H, GridDtype::u8, as_doubles(ds.mask_cnt)));
  grid(DatasetFiles::mask_ba, to_grid(ds.T, 1, ds.W, ds.H, GridDtype::u8, as_doubles(ds.mask_ba)));
  grid(DatasetFiles::geo, to_grid(1, 1, ds.W, ds.H, GridDtype::u8, as_doubles(ds.geo)));
  if (truth_x) grid(DatasetFiles::truth, to_grid(ds.T, kXChannels, ds.W, ds.H, GridDtype::f64, *truth_x));
  if (thresholds) {
    save_thresholds((root / DatasetFiles::thresholds).string(), *thresholds);
    written.push_back((root / DatasetFiles::thresholds).string());
  }
  std::ofstream m(root / DatasetFiles::manifest);
  if (!m) throw DataError("cannot write manifest in " + dir);
  m << "format = cmiwae-dataset\nversion = 1\n";
  m << "T = " << ds.T << "\nW = " << ds.W << "\nH = " << ds.H << "\n";
  std::vector<double> years(ds.year.begin(), ds.year.end()), months(ds.month.begin(), ds.month.end());
  m << "year = " << join_doubles(years) << "\nmonth = " << join_doubles(months) << "\n";
  m << "x = " << DatasetFiles::x << "\nc = " << DatasetFiles::c << "\nmask_cnt = " << DatasetFiles::mask_cnt
    << "\nmask_ba = " << DatasetFiles::mask_ba << "\ngeo = " << DatasetFiles::geo << "\n";
  if (truth_x) m << "truth = " << DatasetFiles::truth << "\n";
  if (thresholds) m << "thresholds = " << DatasetFiles::thresholds << "\n";
  m << "x_channels = CNT,BA,log_CNT,log_BA\nc_channels = ";
  for (std::size_t i = 0; i < ds.c_names.size(); ++i) m << (i ? "," : "") << ds.c_names[i];
  m << "\nc_mean = " << join_doubles(ds.c_stats.mean) << "\nc_std = " << join_doubles(ds.c_stats.stdev) << "\n";
  if (!m) throw DataError("cannot write manifest in " + dir);
  written.push_back((root / DatasetFiles::manifest).string());
  return written;
}

inline KeyValues read_manifest(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / DatasetFiles::manifest;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  KeyValues kv = parse_key_values(in, path.string());
  if (kv["format"] != "cmiwae-dataset") throw DataError(path.string() + ": not a cmiwae dataset manifest");
  if (kv["version"] != "1") throw DataError(path.string() + ": unsupported manifest version");
  return kv;
}

inline std::size_t manifest_size(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw DataError("manifest lacks '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw DataError("manifest '" + key + "' is not a count");
  }
}

inline void check_dims(const GridArray& g, std::size_t T, std::size_t C, std::size_t W, std::size_t H,
                       const std::string& what) {
  if (g.dims[0] != T || g.dims[1] != C || g.dims[2] != W || g.dims[3] != H) {
    throw DataError(what + ": extents [" + std::to_string(g.dims[0]) + "," + std::to_string(g.dims[1]) + "," +
                    std::to_string(g.dims[2]) + "," + std::to_string(g.dims[3]) + "] inconsistent with manifest");
  }
}

inline std::vector<std::uint8_t> as_mask(const GridArray& g) { return {g.values.begin(), g.values.end()}; }

/// Loads a dataset directory and standardizes c with the manifest
/// statistics. Nothing is returned unless every file checks out.
inline MaskedDataset load_dataset(const std::string& dir, std::vector<std::string>* warnings = nullptr) {
  const KeyValues kv = read_manifest(dir);
  const std::filesystem::path root(dir);
  auto file = [&](const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw DataError("manifest lacks '" + key + "'");
    return (root / it->second).string();
  };
  MaskedDataset ds;
  ds.T = manifest_size(kv, "T");
  ds.W = manifest_size(kv, "W");
  ds.H = manifest_size(kv, "H");
  const GridArray x = load_grid(file("x"));
  check_dims(x, ds.T, kXChannels, ds.W, ds.H, "x");
  const GridArray c = load_grid(file("c"));
  check_dims(c, ds.T, kCChannels, ds.W, ds.H, "c");
  const GridArray mc = load_grid(file("mask_cnt"));
  check_dims(mc, ds.T, 1, ds.W, ds.H, "mask_cnt");
  const GridArray mb = load_grid(file("mask_ba"));
  check_dims(mb, ds.T, 1, ds.W, ds.H, "mask_ba");
  const GridArray geo = load_grid(file("geo"));
  check_dims(geo, 1, 1, ds.W, ds.H, "geo");
  if (mc.dtype != GridDtype::u8 || mb.dtype != GridDtype::u8 || geo.dtype != GridDtype::u8) {
    throw DataError("mask files must use the u8 dtype");
  }
  ds.x = x.values;
  ds.c_raw = c.values;
  ds.mask_cnt = as_mask(mc);
  ds.mask_ba = as_mask(mb);
  ds.geo = as_mask(geo);
  for (double v : parse_doubles(kv.at("year"), "manifest year")) ds.year.push_back(static_cast<int>(v));
  for (double v : parse_doubles(kv.at("month"), "manifest month")) ds.month.push_back(static_cast<std::size_t>(v));
  if (kv.count("c_channels")) {
    ds.c_names.clear();
    std::stringstream ss(kv.at("c_channels"));
    std::string item;
    while (std::getline(ss, item, ',')) ds.c_names.push_back(item);
    if (ds.c_names.size() != kCChannels) throw DataError("manifest lists " + std::to_string(ds.c_names.size()) + " auxiliary channels, expected 37");
  }
  ChannelStats st;
  if (kv.count("c_mean")) st.mean = parse_doubles(kv.at("c_mean"), "manifest c_mean");
  if (kv.count("c_std")) st.stdev = parse_doubles(kv.at("c_std"), "manifest c_std");
  for (double s : st.stdev) {
    if (!(s > 0.0)) throw DataError("manifest c_std must be positive");
  }
  auto w = validate_dataset(ds);
  apply_channel_stats(ds, st);
  if (warnings) warnings->insert(warnings->end(), w.begin(), w.end());
  return ds;
}

/// The full x [T, 4, W, H] including values hidden in the dataset.
inline std::vector<double> load_truth(const std::string& dir, const MaskedDataset& ds) {
  const KeyValues kv = read_manifest(dir);
  if (!kv.count("truth")) throw DataError("dataset in " + dir + " has no truth file");
  const GridArray g = load_grid((std::filesystem::path(dir) / kv.at("truth")).string());
  check_dims(g, ds.T, kXChannels, ds.W, ds.H, "truth");
  return g.values;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SynthConfig {
  std::size_t years = 12;
  std::size_t W = 32;
  std::size_t H = 16;
  int first_year = 1993;
  double missing_fraction = 0.142;
  std::size_t n_layers = 4;  // grid must be divisible by 2^(n_layers-2)
  std::uint64_t seed = 7;
};

struct SyntheticData {
  MaskedDataset data;
  std::vector<double> truth_x;  // [T, 4, W, H], nothing hidden
};

namespace detail {

// White noise blurred by a separable Gaussian of width `ell` cells and
// rescaled to zero mean and unit variance.
inline std::vector<double> smooth_field(Rng& rng, std::size_t W, std::size_t H, double ell) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> f(W * H), tmp(W * H, 0.0);
  for (double& v : f) v = normal(rng);
  const long r = static_cast<long>(std::ceil(3.0 * ell));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  for (long i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * (i * i) / (ell * ell));
  auto at = [](long i, long n) {  // reflect, repeatedly when the kernel is wider than the grid
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const long w_ = static_cast<long>(W), h_ = static_cast<long>(H);
  for (long w = 0; w < w_; ++w) {
    for (long h = 0; h < h_; ++h) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * f[static_cast<std::size_t>(at(w + i, w_) * h_ + h)];
      tmp[static_cast<std::size_t>(w * h_ + h)] = s;
    }
  }
  for (long w = 0; w < w_; ++w) {
    for (long h = 0; h < h_; ++h) {
      double s = 0.0;
      for (long i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(w * h_ + at(h + i, h_))];
      f[static_cast<std::size_t>(w * h_ + h)] = s;
    }
  }
  double m = 0.0;
  for (double v : f) m += v;
  m /= static_cast<double>(f.size());
  double var = 0.0;
  for (double v : f) var += (v - m) * (v - m);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (double& v : f) v = (v - m) / sd;
  return f;
}

}  // namespace detail

/// Wildfire-like synthetic data. Auxiliary channels are smooth random
/// fields with a seasonal cycle; fire intensity is a softplus of a sparse
/// linear map of them plus a hidden smooth field; blobs of missing cells are
/// planted in even calendar years only.
inline SyntheticData synthesize(const SynthConfig& cfg) {
  const std::size_t down = std::size_t{1} << (cfg.n_layers >= 2 ? cfg.n_layers - 2 : 0);
  if (cfg.W == 0 || cfg.H == 0 || cfg.W % down != 0 || cfg.H % down != 0) {
    throw Error("synthesize: grid " + std::to_string(cfg.W) + "x" + std::to_string(cfg.H) + " not divisible by " +
                std::to_string(down));
  }
  if (cfg.years < 1) throw Error("synthesize: need at least one year");
  if (cfg.missing_fraction < 0.0 || cfg.missing_fraction >= 0.5) throw Error("synthesize: missing fraction out of range");
  const std::size_t W = cfg.W, H = cfg.H, S = W * H, T = cfg.years * kMonthsPerYear;
  SyntheticData out;
  MaskedDataset& ds = out.data;
  ds.T = T;
  ds.W = W;
  ds.H = H;
  ds.x.assign(T * kXChannels * S, 0.0);
  ds.c_raw.assign(T * kCChannels * S, 0.0);
  ds.mask_cnt.assign(T * S, 1);
  ds.mask_ba.assign(T * S, 1);
  ds.geo.assign(S, 0);
  for (std::size_t t = 0; t < T; ++t) {
    ds.year.push_back(cfg.first_year + static_cast<int>(t / kMonthsPerYear));
    ds.month.push_back(t % kMonthsPerYear);
  }

  Rng static_rng = make_rng(cfg.seed, {1});
  // Region: an ellipse with a wobbly edge.
  const std::vector<double> edge = detail::smooth_field(static_rng, W, H, 3.0);
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t h = 0; h < H; ++h) {
      const double u = (static_cast<double>(w) + 0.5 - 0.5 * W) / (0.5 * W);
      const double v = (static_cast<double>(h) + 0.5 - 0.5 * H) / (0.5 * H);
      ds.geo[w * H + h] = (u * u + v * v) < 0.95 + 0.12 * edge[w * H + h] ? 1 : 0;
    }
  }
  const std::vector<double> elev = detail::smooth_field(static_rng, W, H, 4.0);
  std::vector<std::vector<double>> lc_logit(kLandCoverCount);
  for (auto& f : lc_logit) f = detail::smooth_field(static_rng, W, H, 3.0);
  std::vector<std::vector<double>> met_static(kMeteoCount);
  for (auto& f : met_static) f = detail::smooth_field(static_rng, W, H, 5.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> met_phase(kMeteoCount), met_amp(kMeteoCount), met_offset(kMeteoCount), met_unit(kMeteoCount);
  for (std::size_t j = 0; j < kMeteoCount; ++j) {
    met_phase[j] = 2.0 * std::numbers::pi * unif(static_rng);
    met_amp[j] = 0.5 + unif(static_rng);
    met_offset[j] = std::round(200.0 * unif(static_rng));
    met_unit[j] = std::pow(10.0, std::round(3.0 * unif(static_rng)) - 1.0);
  }

  // Land cover as fractions summing to one per cell.
  std::vector<double> lc(kLandCoverCount * S);
  for (std::size_t i = 0; i < S; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < kLandCoverCount; ++k) z += (lc[k * S + i] = std::exp(1.5 * lc_logit[k][i]));
    for (std::size_t k = 0; k < kLandCoverCount; ++k) lc[k * S + i] /= z;
  }

  out.truth_x.assign(T * kXChannels * S, 0.0);
  std::vector<double> met_std(kMeteoCount * S);
  for (std::size_t t = 0; t < T; ++t) {
    Rng month_rng = make_rng(cfg.seed, {2, t});
    const double phase = 2.0 * std::numbers::pi * static_cast<double>(ds.month[t]) / kMonthsPerYear;
    const double season = std::sin(std::numbers::pi * (static_cast<double>(ds.month[t]) + 0.5) / kMonthsPerYear);
    const double time = static_cast<double>(ds.year[t]) + static_cast<double>(ds.month[t]) / kMonthsPerYear;
    for (std::size_t j = 0; j < kMeteoCount; ++j) {
      const std::vector<double> noise = detail::smooth_field(month_rng, W, H, 3.0);
      for (std::size_t i = 0; i < S; ++i) {
        met_std[j * S + i] = met_amp[j] * std::cos(phase + met_phase[j]) + 0.7 * met_static[j][i] + 0.7 * noise[i];
      }
    }
    const std::vector<double> hidden = detail::smooth_field(month_rng, W, H, 2.5);
    for (std::size_t w = 0; w < W; ++w) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t i = w * H + h;
        if (!ds.geo[i]) continue;
        double* crow = ds.c_raw.data() + t * kCChannels * S;
        crow[kTimeChannel * S + i] = time;
        crow[kLonChannel * S + i] = -125.0 + 58.0 * (static_cast<double>(w) + 0.5) / static_cast<double>(W);
        crow[kLatChannel * S + i] = 25.0 + 24.0 * (static_cast<double>(h) + 0.5) / static_cast<double>(H);
        crow[kElevChannel * S + i] = 900.0 + 450.0 * elev[i];
        for (std::size_t k = 0; k < kLandCoverCount; ++k) crow[(kLandCoverFirst + k) * S + i] = lc[k * S + i];
        for (std::size_t j = 0; j < kMeteoCount; ++j) {
          crow[(kMeteoFirst + j) * S + i] = met_offset[j] + met_unit[j] * met_std[j * S + i];
        }
        const double eta = -1.4 + 1.2 * met_std[0 * S + i] + 0.8 * met_std[1 * S + i] - 0.6 * met_std[2 * S + i] +
                           6.0 * (lc[0 * S + i] - lc[1 * S + i]) - 0.3 * elev[i] + 1.5 * season + 1.2 * hidden[i];
        const double lambda = detail::softplus_value(eta);
        const double fire = 1.0 - std::exp(-lambda);
        double cnt = 0.0, ba = 0.0;
        if (unif(month_rng) < fire) {
          std::poisson_distribution<int> extra(1.5 * lambda);
          cnt = 1.0 + extra(month_rng);
          std::normal_distribution<double> log_ba(1.2 + 0.8 * std::log(cnt) + 0.9 * eta, 0.8);
          ba = std::exp(log_ba(month_rng));
        }
        double* x = out.truth_x.data() + t * kXChannels * S;
        x[0 * S + i] = cnt;
        x[1 * S + i] = ba;
        x[2 * S + i] = std::log1p(cnt);
        x[3 * S + i] = std::log1p(ba);
      }
    }
  }

  // Missingness: blobs in months of even years until the target fraction
  // of region cells is hidden; a blob persists into the next month of the
  // same year with probability 1/2.
  std::size_t region = 0;
  for (auto g : ds.geo) region += g;
  const auto target = static_cast<std::size_t>(std::llround(cfg.missing_fraction * static_cast<double>(region * T)));
  std::vector<std::size_t> even_months;
  for (std::size_t t = 0; t < T; ++t) {
    if (ds.year[t] % 2 == 0) even_months.push_back(t);
  }
  std::size_t hidden = 0;
  Rng blob_rng = make_rng(cfg.seed, {3});
  const std::size_t even_capacity = even_months.size() * region;
  if (target > even_capacity) throw Error("synthesize: missing fraction exceeds the even-year capacity");
  while (hidden < target) {
    std::size_t t = even_months[static_cast<std::size_t>(unif(blob_rng) * static_cast<double>(even_months.size()))];
    const double cw = unif(blob_rng) * static_cast<double>(W), ch = unif(blob_rng) * static_cast<double>(H);
    const double rw = 1.5 + 3.5 * unif(blob_rng), rh = 1.5 + 2.5 * unif(blob_rng);
    while (true) {
      for (std::size_t w = 0; w < W && hidden < target; ++w) {
        for (std::size_t h = 0; h < H && hidden < target; ++h) {
          const double du = (static_cast<double>(w) + 0.5 - cw) / rw, dv = (static_cast<double>(h) + 0.5 - ch) / rh;
          const std::size_t i = w * H + h;
          if (du * du + dv * dv > 1.0 || !ds.geo[i] || !ds.mask_cnt[t * S + i]) continue;
          ds.mask_cnt[t * S + i] = 0;
          ds.mask_ba[t * S + i] = 0;
          ++hidden;
        }
      }
      if (hidden >= target || unif(blob_rng) >= 0.5 || t + 1 >= T || ds.year[t + 1] != ds.year[t]) break;
      ++t;
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t ch = 0; ch < kXChannels; ++ch) {
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t idx = (t * kXChannels + ch) * S + i;
        ds.x[idx] = ds.mask_cnt[t * S + i] ? out.truth_x[idx] : 0.0;
      }
    }
  }
  std::vector<std::size_t> all(T);
  std::iota(all.begin(), all.end(), std::size_t{0});
  apply_channel_stats(ds, compute_channel_stats(ds, all));
  validate_dataset(ds);
  return out;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<int> train_years;
  std::vector<int> validation_years;  // exactly two
};

/// All two-year validation choices in a seeded shuffled order; the first
/// `count` are returned (all of them when count is 0).
inline std::vector<Split> enumerate_splits(const std::vector<int>& years, std::size_t count, std::uint64_t seed) {
  if (years.size() < 3) throw Error("enumerate_splits: need at least three years");
  std::vector<Split> all;
  for (std::size_t a = 0; a < years.size(); ++a) {
    for (std::size_t b = a + 1; b < years.size(); ++b) {
      Split s;
      s.validation_years = {years[a], years[b]};
      for (std::size_t k = 0; k < years.size(); ++k) {
        if (k != a && k != b) s.train_years.push_back(years[k]);
      }
      all.push_back(std::move(s));
    }
  }
  if (count > all.size()) {
    throw Error("enumerate_splits: " + std::to_string(count) + " splits requested but only " +
                std::to_string(all.size()) + " exist");
  }
  Rng rng = make_rng(seed, {0x5b1c});
  // Fisher-Yates with an explicit index draw, so the order does not depend
  // on the standard library's shuffle.
  for (std::size_t i = all.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(all[i - 1], all[j]);
  }
  if (count > 0) all.resize(count);
  return all;
}

/// Cells hidden on top of the dataset masks for validation scoring.
struct ValidationMasks {
  std::vector<std::uint8_t> hidden;  // [T, W, H]; 1 = observed cell newly hidden
  std::size_t count = 0;
};

/// For each validation month, the missingness pattern of a randomly chosen
/// training month is laid over it; previously observed region cells that
/// it covers become validation targets.
inline ValidationMasks make_validation_masks(const MaskedDataset& ds, const Split& split, std::uint64_t seed) {
  const std::size_t S = ds.cells();
  ValidationMasks vm;
  vm.hidden.assign(ds.T * S, 0);
  // Only months that actually have missing region cells can donate.
  std::vector<std::size_t> donors;
  for (std::size_t t : ds.months_of(split.train_years)) {
    for (std::size_t i = 0; i < S; ++i) {
      if (ds.geo[i] && (!ds.mask_cnt[t * S + i] || !ds.mask_ba[t * S + i])) {
        donors.push_back(t);
        break;
      }
    }
  }
  if (donors.empty()) return vm;
  for (std::size_t t : ds.months_of(split.validation_years)) {
    Rng rng = make_rng(seed, {0x7a11, t});
    const std::size_t donor = donors[static_cast<std::size_t>(rng() % donors.size())];
    for (std::size_t i = 0; i < S; ++i) {
      const bool donor_missing = !ds.mask_cnt[donor * S + i] || !ds.mask_ba[donor * S + i];
      const bool observed = ds.mask_cnt[t * S + i] && ds.mask_ba[t * S + i];
      if (ds.geo[i] && donor_missing && observed) {
        vm.hidden[t * S + i] = 1;
        ++vm.count;
      }
    }
  }
  return vm;
}

/// A copy of the dataset with extra cells hidden (and their values zeroed).
inline MaskedDataset apply_hidden(const MaskedDataset& ds, const std::vector<std::uint8_t>& hidden) {
  MaskedDataset out = ds;
  const std::size_t S = ds.cells();
  for (std::size_t t = 0; t < ds.T; ++t) {
    for (std::size_t i = 0; i < S; ++i) {
      if (!hidden[t * S + i]) continue;
      out.mask_cnt[t * S + i] = 0;
      out.mask_ba[t * S + i] = 0;
      for (std::size_t ch = 0; ch < kXChannels; ++ch) out.x[(t * kXChannels + ch) * S + i] = 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batches

/// A set of months gathered for one forward pass.
struct GridBatch {
  std::vector<std::size_t> t;          // dataset time indices
  std::size_t W = 0, H = 0;
  Tensor x;                            // [B, 4, W, H] as stored
  Tensor c;                            // [B, 37, W, H] standardized
  std::vector<std::uint8_t> mask_cnt;  // [B, W, H]
  std::vector<std::uint8_t> mask_ba;
  std::vector<std::size_t> months;
  ObservationTargets targets;          // observation flags include the region

  std::size_t size() const { return t.size(); }
  std::vector<std::uint64_t> ids() const { return {t.begin(), t.end()}; }
};

inline GridBatch make_batch(const MaskedDataset& ds, const std::vector<std::size_t>& ts) {
  const std::size_t B = ts.size(), S = ds.cells();
  GridBatch b;
  b.t = ts;
  b.W = ds.W;
  b.H = ds.H;
  std::vector<double> x(B * kXChannels * S), c(B * kCChannels * S);
  b.mask_cnt.resize(B * S);
  b.mask_ba.resize(B * S);
  b.targets.samples = B;
  b.targets.cells = S;
  b.targets.cnt.resize(B * S);
  b.targets.ba.resize(B * S);
  b.targets.obs_cnt.resize(B * S);
  b.targets.obs_ba.resize(B * S);
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t t = ts[i];
    if (t >= ds.T) throw DataError("make_batch: month index out of range");
    std::copy_n(ds.x.begin() + static_cast<long>(t * kXChannels * S), kXChannels * S, x.begin() + static_cast<long>(i * kXChannels * S));
    std::copy_n(ds.c.begin() + static_cast<long>(t * kCChannels * S), kCChannels * S, c.begin() + static_cast<long>(i * kCChannels * S));
    b.months.push_back(ds.month[t]);
    for (std::size_t s = 0; s < S; ++s) {
      b.mask_cnt[i * S + s] = ds.mask_cnt[t * S + s];
      b.mask_ba[i * S + s] = ds.mask_ba[t * S + s];
      b.targets.cnt[i * S + s] = ds.x_at(t, 0, s);
      b.targets.ba[i * S + s] = ds.x_at(t, 1, s);
      b.targets.obs_cnt[i * S + s] = ds.observed(t, s, Variable::cnt) ? 1 : 0;
      b.targets.obs_ba[i * S + s] = ds.observed(t, s, Variable::ba) ? 1 : 0;
    }
  }
  b.x = Tensor::from({B, kXChannels, ds.W, ds.H}, std::move(x));
  b.c = Tensor::from({B, kCChannels, ds.W, ds.H}, std::move(c));
  return b;
}

}  // namespace cmiwae
