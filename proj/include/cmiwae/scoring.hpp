// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cmiwae/dataset.hpp"
#include "cmiwae/distributions.hpp"

namespace cmiwae {

/// Unnormalized weight 1 - (1 + y)^(-1/4) with y = (u+1)^2/1000 for counts
/// and (u+1)/1000 for burnt area, evaluated without cancellation.
inline double weight_hat(Variable v, double u) {
  if (u < 0.0) throw DomainError("weight: threshold must be nonnegative");
  const double y = v == Variable::cnt ? (u + 1.0) * (u + 1.0) / 1000.0 : (u + 1.0) / 1000.0;
  return -std::expm1(-0.25 * std::log1p(y));
}

/// Weights normalized so that the last threshold gets weight one.
inline std::array<double, kThresholdCount> threshold_weights(Variable v, const std::array<double, kThresholdCount>& u) {
  std::array<double, kThresholdCount> w{};
  const double top = weight_hat(v, u.back());
  for (std::size_t k = 0; k < kThresholdCount; ++k) w[k] = weight_hat(v, u[k]) / top;
  return w;
}

/// Sum in a fixed pairwise order; the result does not depend on how the
/// caller chunked the work.
inline double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

struct PredictionRow {
  std::size_t t = 0, w = 0, h = 0;
  Variable var = Variable::cnt;
  std::array<double, kThresholdCount> p{};
};

/// Predicted CDFs at the thresholds, one row per (cell, variable).
struct PredictionSet {
  std::vector<PredictionRow> rows;

  /// Every vector must lie in [0, 1] and be nondecreasing.
  void validate() const {
    for (const auto& r : rows) {
      for (std::size_t k = 0; k < kThresholdCount; ++k) {
        if (!(r.p[k] >= 0.0 && r.p[k] <= 1.0) || (k > 0 && r.p[k] < r.p[k - 1])) {
          throw NumericError("invalid CDF vector at t=" + std::to_string(r.t) + ", w=" + std::to_string(r.w) +
                             ", h=" + std::to_string(r.h) + ", " + variable_name(r.var));
        }
      }
    }
  }
};

/// Ground truth x [T, 4, W, H].
struct TruthGrid {
  std::size_t T = 0, W = 0, H = 0;
  const std::vector<double>* x = nullptr;

  double value(std::size_t t, std::size_t w, std::size_t h, Variable v) const {
    if (t >= T || w >= W || h >= H) throw DataError("prediction cell outside the truth grid");
    return (*x)[((t * kXChannels + static_cast<std::size_t>(v)) * W + w) * H + h];
  }
};

struct ScoreReport {
  double s_cnt = 0.0;
  double s_ba = 0.0;
  double s_total = 0.0;
  std::size_t cells = 0;
  std::vector<double> row_scores;  // aligned with the prediction rows
};

struct ScoreOptions {
  /// Use the count weights for burnt area too, as the printed formula reads.
  bool formula_as_printed = false;
};

/// Contribution Σ_u ω(u) (1{u ≥ v} - p̂(u))² of one vector.
inline double row_score(const std::array<double, kThresholdCount>& p, double v,
                        const std::array<double, kThresholdCount>& u,
                        const std::array<double, kThresholdCount>& w) {
  double s = 0.0;
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    const double d = (u[k] >= v ? 1.0 : 0.0) - p[k];
    s += w[k] * d * d;
  }
  return s;
}

using CellKey = std::tuple<std::size_t, std::size_t, std::size_t, int>;

/// Threshold-weighted quadratic score. When `expected` is given, the
/// prediction rows must cover exactly those (t, w, h, variable) keys.
inline ScoreReport score(const PredictionSet& pred, const TruthGrid& truth, const ThresholdSet& U,
                         const ScoreOptions& opt = {}, const std::set<CellKey>* expected = nullptr) {
  const auto w_cnt = threshold_weights(Variable::cnt, U.cnt);
  const auto w_ba = opt.formula_as_printed ? threshold_weights(Variable::cnt, U.ba) : threshold_weights(Variable::ba, U.ba);
  ScoreReport rep;
  std::vector<std::pair<CellKey, double>> terms;
  std::set<CellKey> seen;
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> cells;
  for (const auto& r : pred.rows) {
    const CellKey key{r.t, r.w, r.h, static_cast<int>(r.var)};
    if (!seen.insert(key).second) {
      throw DataError("duplicate prediction row at t=" + std::to_string(r.t) + ", w=" + std::to_string(r.w) +
                      ", h=" + std::to_string(r.h) + ", " + variable_name(r.var));
    }
    if (expected && !expected->count(key)) {
      throw DataError("prediction row at t=" + std::to_string(r.t) + ", w=" + std::to_string(r.w) + ", h=" +
                      std::to_string(r.h) + " is not a scored cell");
    }
    cells.insert({r.t, r.w, r.h});
    const double v = truth.value(r.t, r.w, r.h, r.var);
    const double s = r.var == Variable::cnt ? row_score(r.p, v, U.cnt, w_cnt) : row_score(r.p, v, U.ba, w_ba);
    rep.row_scores.push_back(s);
    terms.emplace_back(key, s);
  }
  if (expected && seen.size() != expected->size()) {
    throw DataError("predictions cover " + std::to_string(seen.size()) + " of " + std::to_string(expected->size()) +
                    " scored values");
  }
  // Summed in key order, so the result does not depend on row order.
  std::sort(terms.begin(), terms.end());
  std::vector<double> cnt_terms, ba_terms;
  for (const auto& [key, s] : terms) (std::get<3>(key) == 0 ? cnt_terms : ba_terms).push_back(s);
  rep.s_cnt = pairwise_sum(cnt_terms.data(), cnt_terms.size());
  rep.s_ba = pairwise_sum(ba_terms.data(), ba_terms.size());
  rep.s_total = rep.s_cnt + rep.s_ba;
  rep.cells = cells.size();
  return rep;
}

/// Keys of every missing region value of the dataset (or of `hidden` when
/// given, an extra [T, W, H] mask of cells to score).
inline std::set<CellKey> missing_keys(const MaskedDataset& ds, const std::vector<std::uint8_t>* hidden = nullptr) {
  std::set<CellKey> keys;
  for (std::size_t t = 0; t < ds.T; ++t) {
    for (std::size_t w = 0; w < ds.W; ++w) {
      for (std::size_t h = 0; h < ds.H; ++h) {
        const std::size_t cell = w * ds.H + h;
        for (Variable v : {Variable::cnt, Variable::ba}) {
          const bool target = hidden ? ((*hidden)[t * ds.cells() + cell] && ds.geo[cell]) : ds.missing(t, cell, v);
          if (target) keys.insert({t, w, h, static_cast<int>(v)});
        }
      }
    }
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Prediction files

inline void write_predictions(std::ostream& out, const PredictionSet& pred) {
  out << "t,w,h,var";
  for (std::size_t k = 1; k <= kThresholdCount; ++k) out << ",p" << k;
  out << '\n';
  char buf[64];
  for (const auto& r : pred.rows) {
    out << r.t << ',' << r.w << ',' << r.h << ',' << variable_name(r.var);
    for (double p : r.p) {
      std::snprintf(buf, sizeof buf, ",%.9g", p);
      out << buf;
    }
    out << '\n';
  }
}

inline void save_predictions(const std::string& path, const PredictionSet& pred) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  write_predictions(out, pred);
  if (!out) throw DataError("write failed for " + path);
}

inline PredictionSet read_predictions(std::istream& in, const std::string& what = "prediction file") {
  PredictionSet pred;
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,w,h,var,p1", 0) != 0) throw DataError(what + ": missing header");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 4 + kThresholdCount) throw DataError(what + " line " + std::to_string(line_no) + ": wrong field count");
    PredictionRow r;
    try {
      r.t = std::stoull(f[0]);
      r.w = std::stoull(f[1]);
      r.h = std::stoull(f[2]);
      for (std::size_t k = 0; k < kThresholdCount; ++k) r.p[k] = std::stod(f[4 + k]);
    } catch (const std::exception&) {
      throw DataError(what + " line " + std::to_string(line_no) + ": bad number");
    }
    if (f[3] == "CNT") r.var = Variable::cnt;
    else if (f[3] == "BA") r.var = Variable::ba;
    else throw DataError(what + " line " + std::to_string(line_no) + ": unknown variable '" + f[3] + "'");
    pred.rows.push_back(r);
  }
  return pred;
}

inline PredictionSet load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_predictions(in, path);
}

inline void write_score_report(std::ostream& out, const ScoreReport& rep) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "S_CNT = %.10g\nS_BA = %.10g\nS_total = %.10g\ncells = %zu\n", rep.s_cnt, rep.s_ba,
                rep.s_total, rep.cells);
  out << buf;
}

// ---------------------------------------------------------------------------
// Climatology

/// Empirical CDF at each threshold of a sorted sample.
inline std::array<double, kThresholdCount> empirical_cdf(const std::vector<double>& sorted,
                                                         const std::array<double, kThresholdCount>& u) {
  std::array<double, kThresholdCount> p{};
  if (sorted.empty()) {
    p.fill(1.0);
    return p;
  }
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    const auto n = std::upper_bound(sorted.begin(), sorted.end(), u[k]) - sorted.begin();
    p[k] = static_cast<double>(n) / static_cast<double>(sorted.size());
  }
  return p;
}

/// Per-cell empirical CDF over the observed values of the given months;
/// cells with fewer than `min_count` observations use the pooled values
/// of all cells. Predicts every (cell, variable) in `keys`.
inline PredictionSet climatology_baseline(const MaskedDataset& ds, const std::vector<std::size_t>& train_months,
                                          const std::set<CellKey>& keys, const ThresholdSet& U,
                                          std::size_t min_count = 5) {
  const std::size_t S = ds.cells();
  std::array<std::vector<std::vector<double>>, 2> per_cell;
  std::array<std::vector<double>, 2> pooled;
  for (int v = 0; v < 2; ++v) {
    per_cell[v].assign(S, {});
    for (std::size_t t : train_months) {
      for (std::size_t i = 0; i < S; ++i) {
        if (!ds.observed(t, i, static_cast<Variable>(v))) continue;
        const double val = ds.x_at(t, static_cast<std::size_t>(v), i);
        per_cell[v][i].push_back(val);
        pooled[v].push_back(val);
      }
    }
    for (auto& c : per_cell[v]) std::sort(c.begin(), c.end());
    std::sort(pooled[v].begin(), pooled[v].end());
  }
  PredictionSet out;
  for (const auto& [t, w, h, v] : keys) {
    const std::size_t cell = w * ds.H + h;
    const Variable var = static_cast<Variable>(v);
    const auto& sample = per_cell[v][cell].size() >= min_count ? per_cell[v][cell] : pooled[v];
    out.rows.push_back({t, w, h, var, empirical_cdf(sample, U.of(var))});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Per variable and threshold: predicted probabilities grouped into
/// `bins` equal-width bins with the observed frequency of 1{v ≤ u}.
inline void write_reliability_csv(std::ostream& out, const PredictionSet& pred, const TruthGrid& truth,
                                  const ThresholdSet& U, std::size_t bins = 10) {
  out << "var,threshold_index,threshold,bin,mean_predicted,observed_frequency,count\n";
  for (Variable var : {Variable::cnt, Variable::ba}) {
    for (std::size_t k = 0; k < kThresholdCount; ++k) {
      std::vector<double> sum_p(bins, 0.0), sum_o(bins, 0.0);
      std::vector<std::size_t> n(bins, 0);
      for (const auto& r : pred.rows) {
        if (r.var != var) continue;
        const std::size_t b = std::min(bins - 1, static_cast<std::size_t>(r.p[k] * static_cast<double>(bins)));
        sum_p[b] += r.p[k];
        sum_o[b] += truth.value(r.t, r.w, r.h, var) <= U.of(var)[k] ? 1.0 : 0.0;
        ++n[b];
      }
      for (std::size_t b = 0; b < bins; ++b) {
        if (n[b] == 0) continue;
        out << variable_name(var) << ',' << k + 1 << ',' << U.of(var)[k] << ',' << b << ','
            << sum_p[b] / static_cast<double>(n[b]) << ',' << sum_o[b] / static_cast<double>(n[b]) << ',' << n[b]
            << '\n';
      }
    }
  }
}

/// Histogram of per-cell total scores (CNT + BA contributions).
inline void write_score_histogram_csv(std::ostream& out, const PredictionSet& pred, const ScoreReport& rep,
                                      std::size_t bins = 20) {
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, double> per_cell;
  for (std::size_t i = 0; i < pred.rows.size(); ++i) {
    const auto& r = pred.rows[i];
    per_cell[{r.t, r.w, r.h}] += rep.row_scores[i];
  }
  double hi = 0.0;
  for (const auto& [k, s] : per_cell) hi = std::max(hi, s);
  if (hi <= 0.0) hi = 1.0;
  std::vector<std::size_t> counts(bins, 0);
  for (const auto& [k, s] : per_cell) {
    ++counts[std::min(bins - 1, static_cast<std::size_t>(s / hi * static_cast<double>(bins)))];
  }
  out << "bin_low,bin_high,count\n";
  for (std::size_t b = 0; b < bins; ++b) {
    out << hi * static_cast<double>(b) / static_cast<double>(bins) << ','
        << hi * static_cast<double>(b + 1) / static_cast<double>(bins) << ',' << counts[b] << '\n';
  }
}

}  // namespace cmiwae
