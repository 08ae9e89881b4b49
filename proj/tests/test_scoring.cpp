// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "cmiwae/cmiwae.hpp"
#include "support/cases.hpp"
#include "support/oracles.hpp"

using namespace cmiwae;

namespace {

const ThresholdSet kU = ThresholdSet::synthetic_default();

double rel(double a, long double b) {
  return std::abs(static_cast<long double>(a) - b) / std::max(1.0L, std::abs(b));
}

}  // namespace

TEST(Weights, ExamplesAndNormalization) {
  EXPECT_NEAR(weight_hat(Variable::cnt, 0.0), 2.498438670923660e-4, 1e-18);
  EXPECT_EQ(weight_hat(Variable::cnt, 0.0), weight_hat(Variable::ba, 0.0));
  for (Variable v : {Variable::cnt, Variable::ba}) {
    const auto w = threshold_weights(v, kU.of(v));
    EXPECT_EQ(w.back(), 1.0);
    for (std::size_t k = 1; k < kThresholdCount; ++k) EXPECT_LT(w[k - 1], w[k]);
    for (double e : w) {
      EXPECT_GT(e, 0.0);
      EXPECT_LE(e, 1.0);
    }
  }
  EXPECT_THROW(weight_hat(Variable::cnt, -0.5), DomainError);
}

TEST(Weights, MatchHighPrecisionAtFiftyPoints) {
  for (std::size_t i = 0; i < 50; ++i) {
    const double u = i < 25 ? 0.04 * static_cast<double>(i) * static_cast<double>(i) : std::pow(10.0, 0.2 * static_cast<double>(i - 25));
    for (Variable v : {Variable::cnt, Variable::ba}) {
      const double ref = oracle::weight_hat_mp(v, u);
      EXPECT_LT(std::abs(weight_hat(v, u) - ref) / ref, 1e-12) << "u=" << u;
    }
  }
}

TEST(Score, PerfectStepScoresZero) {
  std::vector<double> x(4, 0.0);
  x[0] = 7.5;
  x[1] = 0.0;
  const TruthGrid truth{1, 1, 1, &x};
  PredictionSet pred;
  PredictionRow cnt{0, 0, 0, Variable::cnt, {}}, ba{0, 0, 0, Variable::ba, {}};
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    cnt.p[k] = kU.cnt[k] >= 7.5 ? 1.0 : 0.0;
    ba.p[k] = 1.0;
  }
  pred.rows = {cnt, ba};
  const ScoreReport r = score(pred, truth, kU);
  EXPECT_EQ(r.s_cnt, 0.0);
  EXPECT_EQ(r.s_ba, 0.0);
  EXPECT_EQ(r.cells, 1u);
}

TEST(Score, ZeroTruthWithZeroPredictionScoresAllWeights) {
  std::vector<double> x(4, 0.0);
  const TruthGrid truth{1, 1, 1, &x};
  PredictionSet pred;
  pred.rows = {{0, 0, 0, Variable::cnt, {}}, {0, 0, 0, Variable::ba, {}}};
  const ScoreReport r = score(pred, truth, kU);
  double wc = 0, wb = 0;
  for (double w : threshold_weights(Variable::cnt, kU.cnt)) wc += w;
  for (double w : threshold_weights(Variable::ba, kU.ba)) wb += w;
  EXPECT_NEAR(r.s_cnt, wc, 1e-14);
  EXPECT_NEAR(r.s_ba, wb, 1e-14);
  EXPECT_EQ(r.s_total, r.s_cnt + r.s_ba);
}

TEST(Score, IndicatorIncludesEquality) {
  std::vector<double> x(4, 0.0);
  x[0] = kU.cnt[5];
  const TruthGrid truth{1, 1, 1, &x};
  PredictionSet pred;
  PredictionRow row{0, 0, 0, Variable::cnt, {}};
  for (std::size_t k = 5; k < kThresholdCount; ++k) row.p[k] = 1.0;
  pred.rows = {row};
  EXPECT_EQ(score(pred, truth, kU).s_cnt, 0.0);
}

TEST(Score, MatchesDirectOracleOnRandomSets) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const cases::ScoringCase c = cases::random_scoring_case(seed, kU);
    for (bool printed : {false, true}) {
      const ScoreReport r = score(c.pred, c.truth(), kU, {printed});
      const auto ref = oracle::direct_score(c.pred, c.truth(), kU, printed);
      ASSERT_LT(rel(r.s_cnt, ref.cnt), 1e-12) << seed;
      ASSERT_LT(rel(r.s_ba, ref.ba), 1e-12) << seed;
      ASSERT_LT(rel(r.s_total, ref.cnt + ref.ba), 1e-12) << seed;
      ASSERT_EQ(r.s_total, r.s_cnt + r.s_ba);
    }
  }
}

TEST(Score, PrintedFormulaOnlyChangesBurntArea) {
  const cases::ScoringCase c = cases::random_scoring_case(4, kU);
  const ScoreReport a = score(c.pred, c.truth(), kU), b = score(c.pred, c.truth(), kU, {true});
  EXPECT_EQ(a.s_cnt, b.s_cnt);
  EXPECT_NE(a.s_ba, b.s_ba);
}

TEST(Score, InvariantToRowOrder) {
  cases::ScoringCase c = cases::random_scoring_case(12, kU);
  const ScoreReport a = score(c.pred, c.truth(), kU);
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    std::shuffle(c.pred.rows.begin(), c.pred.rows.end(), rng);
    const ScoreReport b = score(c.pred, c.truth(), kU);
    EXPECT_EQ(a.s_cnt, b.s_cnt);
    EXPECT_EQ(a.s_ba, b.s_ba);
    EXPECT_EQ(a.cells, b.cells);
  }
}

TEST(Score, CellSetMismatchIsAnError) {
  cases::ScoringCase c = cases::random_scoring_case(3, kU);
  std::set<CellKey> keys;
  for (const auto& r : c.pred.rows) keys.insert({r.t, r.w, r.h, static_cast<int>(r.var)});
  EXPECT_NO_THROW(score(c.pred, c.truth(), kU, {}, &keys));
  PredictionSet dup = c.pred;
  dup.rows.push_back(dup.rows.front());
  EXPECT_THROW(score(dup, c.truth(), kU), DataError);
  PredictionSet fewer = c.pred;
  fewer.rows.pop_back();
  EXPECT_THROW(score(fewer, c.truth(), kU, {}, &keys), DataError);
  std::set<CellKey> smaller = keys;
  smaller.erase(smaller.begin());
  EXPECT_THROW(score(c.pred, c.truth(), kU, {}, &smaller), DataError);
  PredictionSet outside = c.pred;
  outside.rows.push_back({c.T, 0, 0, Variable::cnt, {}});
  EXPECT_THROW(score(outside, c.truth(), kU), DataError);
}

// Against the truth's own CDF, perturbed predictions score worse both in
// exact expectation and on average over resampled truths.
TEST(Score, TrueDistributionIsOptimal) {
  ZmlnParams z;
  z.p0 = 0.4;
  z.mu = {1.2, 2.0};
  z.sigma = {0.8, 1.5};
  const auto F = zmln_cdf_at_thresholds(z, kU, Variable::cnt);
  const auto w = threshold_weights(Variable::cnt, kU.cnt);
  Rng rng = make_rng(9, {});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> truth(1000);
  for (double& v : truth) v = unit(rng) < z.p0 ? 0.0 : std::exp(z.mu[0] + z.sigma[0] * normal(rng));
  auto expected = [&](const std::array<double, kThresholdCount>& p) {
    double s = 0;
    for (std::size_t k = 0; k < kThresholdCount; ++k) s += w[k] * (F[k] * (1 - F[k]) + (F[k] - p[k]) * (F[k] - p[k]));
    return s;
  };
  auto sampled = [&](const std::array<double, kThresholdCount>& p) {
    double s = 0;
    for (double v : truth) s += row_score(p, v, kU.cnt, w);
    return s / 1000.0;
  };
  const double e0 = expected(F), s0 = sampled(F);
  for (int rep = 0; rep < 100; ++rep) {
    auto p = F;
    const std::size_t lo = static_cast<std::size_t>(unit(rng) * 10);
    const double delta = (unit(rng) < 0.5 ? -1 : 1) * (0.1 + 0.2 * unit(rng));
    for (std::size_t k = lo; k < lo + 8; ++k) p[k] = std::clamp(p[k] + delta, 0.0, 1.0);
    std::sort(p.begin(), p.end());
    EXPECT_GT(expected(p), e0);
    EXPECT_GT(sampled(p), s0);
  }
}

TEST(PredictionFile, RoundTripsToNineDigits) {
  const cases::ScoringCase c = cases::random_scoring_case(8, kU);
  std::stringstream ss;
  write_predictions(ss, c.pred);
  const PredictionSet back = read_predictions(ss);
  ASSERT_EQ(back.rows.size(), c.pred.rows.size());
  for (std::size_t i = 0; i < back.rows.size(); ++i) {
    EXPECT_EQ(back.rows[i].t, c.pred.rows[i].t);
    EXPECT_EQ(back.rows[i].var, c.pred.rows[i].var);
    for (std::size_t k = 0; k < kThresholdCount; ++k) EXPECT_NEAR(back.rows[i].p[k], c.pred.rows[i].p[k], 5e-9);
  }
  std::stringstream header("t,w,h\n");
  EXPECT_THROW(read_predictions(header), DataError);
  std::stringstream bad;
  write_predictions(bad, c.pred);
  std::string text = bad.str();
  text.replace(text.find(",CNT,"), 5, ",XYZ,");
  std::stringstream bad2(text);
  EXPECT_THROW(read_predictions(bad2), DataError);
}

TEST(PredictionSet, ValidateRejectsBadVectors) {
  PredictionSet s;
  s.rows.push_back({0, 0, 0, Variable::cnt, {}});
  s.rows[0].p.fill(0.5);
  EXPECT_NO_THROW(s.validate());
  s.rows[0].p[3] = 0.4;
  EXPECT_THROW(s.validate(), NumericError);
  s.rows[0].p.fill(1.0 + 1e-12);
  EXPECT_THROW(s.validate(), NumericError);
  s.rows[0].p.fill(std::nan(""));
  EXPECT_THROW(s.validate(), NumericError);
}

TEST(Climatology, EmpiricalCdfExamples) {
  SynthConfig sc;
  sc.years = 2;
  sc.W = 8;
  sc.H = 4;
  MaskedDataset ds = synthesize(sc).data;
  std::size_t a = 0;
  while (!ds.geo[a]) ++a;
  std::size_t b = a + 1;
  while (!ds.geo[b]) ++b;
  const std::vector<std::size_t> months{0, 1, 2, 3, 4, 5};
  const std::size_t S = ds.cells();
  for (std::size_t t : months) {
    ds.mask_cnt[t * S + a] = ds.mask_ba[t * S + a] = 1;
    ds.mask_cnt[t * S + b] = ds.mask_ba[t * S + b] = 1;
    for (std::size_t ch = 0; ch < 4; ++ch) ds.x[(t * 4 + ch) * S + a] = 0.0;
    const double v = t % 2 ? 5.0 : 0.0;
    ds.x[(t * 4 + 0) * S + b] = v;
    ds.x[(t * 4 + 1) * S + b] = v;
  }
  const std::size_t wa = a / ds.H, ha = a % ds.H, wb = b / ds.H, hb = b % ds.H;
  const std::set<CellKey> keys{{9, wa, ha, 0}, {9, wa, ha, 1}, {9, wb, hb, 0}};
  const PredictionSet p = climatology_baseline(ds, months, keys, kU);
  ASSERT_EQ(p.rows.size(), 3u);
  for (const auto& r : p.rows) {
    if (r.w == wa && r.h == ha) {
      for (double e : r.p) EXPECT_EQ(e, 1.0);
    } else {
      for (std::size_t k = 0; k < kThresholdCount; ++k) EXPECT_EQ(r.p[k], kU.cnt[k] < 5.0 ? 0.5 : 1.0);
    }
  }
  p.validate();
  const PredictionSet pooled = climatology_baseline(ds, {0, 1}, keys, kU);
  const auto reference = [&] {
    std::vector<double> all;
    for (std::size_t t : {0u, 1u})
      for (std::size_t i = 0; i < S; ++i)
        if (ds.observed(t, i, Variable::cnt)) all.push_back(ds.x_at(t, 0, i));
    std::sort(all.begin(), all.end());
    return empirical_cdf(all, kU.cnt);
  }();
  for (const auto& r : pooled.rows) {
    if (r.var == Variable::cnt) {
      EXPECT_EQ(r.p, reference);
    }
  }
}

TEST(Climatology, MissingKeysCoverEveryMissingRegionValue) {
  SynthConfig sc;
  sc.years = 2;
  sc.W = 8;
  sc.H = 4;
  const MaskedDataset ds = synthesize(sc).data;
  std::size_t n = 0;
  for (std::size_t t = 0; t < ds.T; ++t)
    for (std::size_t i = 0; i < ds.cells(); ++i)
      for (Variable v : {Variable::cnt, Variable::ba}) n += ds.missing(t, i, v) ? 1 : 0;
  const auto keys = missing_keys(ds);
  EXPECT_EQ(keys.size(), n);
  EXPECT_GT(n, 0u);
  for (const auto& [t, w, h, v] : keys) EXPECT_TRUE(ds.geo[w * ds.H + h]);
}
