// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cmiwae/cmiwae.hpp"
#include "support/oracles.hpp"

using namespace cmiwae;

namespace {

ZmbParams random_zmb(std::uint64_t seed, double p0 = -1.0) {
  Rng rng = make_rng(seed, {3});
  std::normal_distribution<double> n(0.0, 1.5);
  std::vector<double> raw(57 * 1);
  for (double& r : raw) r = n(rng);
  ZmbParams p = ZmbParams::from_raw(raw.data(), 1);
  if (p0 >= 0.0) p.p0 = p0;
  return p;
}

void expect_valid_cdf(const std::array<double, kThresholdCount>& p) {
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    EXPECT_GE(p[k], 0.0);
    EXPECT_LE(p[k], 1.0);
    if (k > 0) {
      EXPECT_GE(p[k], p[k - 1]);
    }
  }
}

}  // namespace

TEST(Gaussian, LogProbExamples) {
  const DiagGaussian g{Tensor::from({2}, {0.3, -1.2}), Tensor::from({2}, {1.0, 1.0})};
  EXPECT_NEAR(g.log_prob(Tensor::from({2}, {0.3, -1.2})).item(), -1.837877066409345, 1e-12);
  const DiagGaussian s{Tensor::from({1}, {0.0}), Tensor::from({1}, {1.0})};
  EXPECT_NEAR(s.log_prob(Tensor::from({1}, {1.0})).item(), -1.418938533204673, 1e-12);
  EXPECT_THROW((DiagGaussian{Tensor::from({1}, {0.0}), Tensor::from({1}, {0.0})}.log_prob(Tensor::from({1}, {1.0}))),
               DomainError);
}

TEST(Gaussian, DensityIntegratesToOne) {
  const double mu = 0.7, sigma = 1.3;
  const DiagGaussian g{Tensor::from({1}, {mu}), Tensor::from({1}, {sigma})};
  // Composite Simpson over ±12σ.
  const std::size_t n = 20000;
  const double a = mu - 12 * sigma, b = mu + 12 * sigma, h = (b - a) / n;
  double s = 0.0;
  for (std::size_t i = 0; i <= n; ++i) {
    const double wgt = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    s += wgt * std::exp(g.log_prob(Tensor::from({1}, {a + h * static_cast<double>(i)})).item());
  }
  EXPECT_NEAR(s * h / 3.0, 1.0, 1e-8);
}

TEST(Gaussian, LogProbMaximizedAtMean) {
  const DiagGaussian g{Tensor::from({3}, {0.1, 2.0, -3.0}), Tensor::from({3}, {0.5, 1.5, 2.0})};
  const double top = g.log_prob(g.mu).item();
  Rng rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    const Tensor z = g.mu + Tensor::from({3}, {n(rng), n(rng), n(rng)});
    EXPECT_LT(g.log_prob(z).item(), top);
  }
}

TEST(Gaussian, RsampleExamples) {
  Tensor mu = Tensor::from({2}, {0.4, -0.9}, true), sigma = Tensor::from({2}, {1.1, 0.3}, true);
  const DiagGaussian g{mu, sigma};
  const Tensor at_zero = g.rsample(Tensor::zeros({2}));
  EXPECT_EQ(at_zero[0], 0.4);
  EXPECT_EQ(at_zero[1], -0.9);
  const Tensor eps = Tensor::from({2}, {0.7, -1.6});
  backward(sum_all(g.rsample(eps)));
  EXPECT_EQ(mu.grad()[0], 1.0);
  EXPECT_EQ(mu.grad()[1], 1.0);
  EXPECT_EQ(sigma.grad()[0], 0.7);
  EXPECT_EQ(sigma.grad()[1], -1.6);
  EXPECT_THROW(g.rsample(Tensor::zeros({3})), ShapeError);
}

TEST(Gaussian, SampleMeanMonteCarlo) {
  const double mu = 1.7, sigma = 0.8;
  const std::size_t N = 100000;
  Rng rng = make_rng(5, {});
  const Tensor eps = Tensor::from({N}, standard_normals(rng, N));
  const DiagGaussian g{Tensor::full({N}, mu), Tensor::full({N}, sigma)};
  const Tensor z = g.rsample(eps);
  double s = 0;
  for (double v : z.values()) s += v;
  EXPECT_LT(std::abs(s / N - mu), 4 * sigma / std::sqrt(static_cast<double>(N)));
}

TEST(Gaussian, ReparameterizedGradientOfSecondMoment) {
  const double sigma0 = 1.3, mu0 = 0.4;
  const std::size_t N = 10000;
  Rng rng = make_rng(6, {});
  const auto eps = standard_normals(rng, N);
  std::vector<double> g(N);
  for (std::size_t i = 0; i < N; ++i) {
    Tensor sigma = Tensor::from({1}, {sigma0}, true);
    const DiagGaussian d{Tensor::from({1}, {mu0}), sigma};
    backward(sum_all(square(d.rsample(Tensor::from({1}, {eps[i]})))));
    g[i] = sigma.grad()[0];
  }
  double m = 0, v = 0;
  for (double x : g) m += x;
  m /= N;
  for (double x : g) v += (x - m) * (x - m);
  const double se = std::sqrt(v / (N - 1) / N);
  EXPECT_LT(std::abs(m - 2 * sigma0), 3 * se);
}

TEST(Zmln, LogProbExamples) {
  ZmlnParams p;
  p.p0 = 0.7;
  EXPECT_NEAR(zmln_log_prob(p, 0, 0), -0.356674943938732, 1e-12);
  p.p0 = 0.0;
  p.mu = {0, 0};
  p.sigma = {1, 1};
  EXPECT_NEAR(zmln_log_prob(p, 1, 1), -1.837877066409345, 1e-12);
  EXPECT_EQ(zmln_log_prob(p, 0, 2), kImpossibleLogProb);
  EXPECT_THROW(zmln_log_prob(p, -1, 2), DomainError);
}

TEST(Zmln, TotalMassIsOne) {
  ZmlnParams p;
  p.p0 = 0.35;
  p.mu = {0.8, 2.1};
  p.sigma = {0.7, 1.4};
  // Product density, so the double integral factorizes; each factor is a
  // trapezoid rule on a log grid (dx = x dlog x).
  auto integral = [&](int i) {
    const double lo = p.mu[i] - 10 * p.sigma[i], hi = p.mu[i] + 10 * p.sigma[i];
    const std::size_t n = 4000;
    double s = 0;
    for (std::size_t j = 0; j <= n; ++j) {
      const double lx = lo + (hi - lo) * static_cast<double>(j) / n;
      const double x = std::exp(lx);
      const double f = std::exp(lognormal_log_pdf(x, p.mu[i], p.sigma[i])) * x;
      s += (j == 0 || j == n ? 0.5 : 1.0) * f;
    }
    return s * (hi - lo) / n;
  };
  EXPECT_NEAR(p.p0 + (1 - p.p0) * integral(0) * integral(1), 1.0, 1e-3);
}

TEST(Zmln, CdfExamples) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  ZmlnParams p;
  p.p0 = 0.5;
  p.mu = {0, 0};
  p.sigma = {1, 1};
  ThresholdSet one = U;
  one.cnt[1] = 1.0;
  EXPECT_NEAR(zmln_cdf_at_thresholds(p, one, Variable::cnt)[1], 0.75, 1e-15);
  ZmlnParams atom;
  atom.p0 = 1.0;
  for (double v : zmln_cdf_at_thresholds(atom, U, Variable::ba)) EXPECT_EQ(v, 1.0);
  ZmlnParams tail;
  tail.p0 = 0.2;
  tail.mu = {-4.0, 0.0};
  tail.sigma = {0.5, 1.0};
  ThresholdSet far = U;
  far.cnt[27] = std::exp(-4.0 + 8 * 0.5);
  EXPECT_GT(zmln_cdf_at_thresholds(tail, far, Variable::cnt)[27], 1 - 1e-14);
}

TEST(Zmln, CdfIsValidAndAtLeastP0) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  Rng rng(7);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int i = 0; i < 500; ++i) {
    const double raw[5] = {n(rng), n(rng), n(rng), n(rng), n(rng)};
    const ZmlnParams p = ZmlnParams::from_raw(raw, 1);
    for (Variable v : {Variable::cnt, Variable::ba}) {
      const auto c = zmln_cdf_at_thresholds(p, U, v);
      expect_valid_cdf(c);
      EXPECT_GE(c[0], p.p0);
    }
  }
}

TEST(Zmb, LogProbExamples) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  const BinLayout bc = BinLayout::from(U.cnt), bb = BinLayout::from(U.ba);
  ZmbParams p = random_zmb(8);
  EXPECT_DOUBLE_EQ(zmb_log_prob(p, 0, 0, bc, bb), std::log(p.p0));
  EXPECT_EQ(zmb_log_prob(p, 0, 3, bc, bb), kImpossibleLogProb);
  // Uniform masses: bins (2,3] and (5,6] of the count thresholds have equal width.
  p.cnt_mass.fill(1.0 / 29);
  EXPECT_DOUBLE_EQ(zmb_log_prob(p, 2.5, 7.0, bc, bb), zmb_log_prob(p, 5.5, 7.0, bc, bb));
}

TEST(Zmb, SumsToOneOverAtomAndBins) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  const BinLayout bc = BinLayout::from(U.cnt), bb = BinLayout::from(U.ba);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const ZmbParams p = random_zmb(100 + s);
    auto point = [](const BinLayout& l, std::size_t b) {
      if (b == 0) return 0.5 * l.edges[0];
      if (b < kThresholdCount) return 0.5 * (l.edges[b - 1] + l.edges[b]);
      return 1.5 * l.edges[kThresholdCount - 1];
    };
    long double total = std::exp(zmb_log_prob(p, 0, 0, bc, bb));
    for (std::size_t i = 0; i < 29; ++i)
      for (std::size_t j = 0; j < 29; ++j)
        total += std::exp(zmb_log_prob(p, point(bc, i), point(bb, j), bc, bb)) * bc.width(i) * bb.width(j);
    EXPECT_NEAR(static_cast<double>(total), 1.0, 1e-9);
    for (Variable v : {Variable::cnt, Variable::ba}) {
      double m = 0;
      for (double e : p.mass(v)) m += e;
      EXPECT_NEAR(m, 1.0, 1e-12);
    }
  }
}

TEST(Zmb, CdfMatchesCumulativeSum) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const ZmbParams p = random_zmb(200 + s);
    for (Variable v : {Variable::cnt, Variable::ba}) {
      const auto c = zmb_cdf_at_thresholds(p, v);
      for (std::size_t k = 0; k < kThresholdCount; ++k) {
        long double acc = 0;
        for (std::size_t b = 0; b <= k; ++b) acc += p.mass(v)[b];
        EXPECT_NEAR(c[k], static_cast<double>(p.p0 + (1 - p.p0) * acc), 1e-14);
      }
      EXPECT_NEAR(c[27], 1 - (1 - p.p0) * p.mass(v)[28], 1e-14);
      expect_valid_cdf(c);
    }
  }
}

TEST(Zmb, CdfExamples) {
  ZmbParams p = random_zmb(9);
  p.cnt_mass.fill(0.0);
  p.cnt_mass[3] = 1.0;
  EXPECT_EQ(zmb_cdf_at_thresholds(p, Variable::cnt)[27], 1.0);
  p.p0 = 0.0;
  p.ba_mass.fill(0.0);
  p.ba_mass[0] = 1.0;
  for (double v : zmb_cdf_at_thresholds(p, Variable::ba)) EXPECT_EQ(v, 1.0);
}

TEST(ObservationLikelihood, GridMatchesCellOracle) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  for (auto kind : {ObservationKind::zmln, ObservationKind::zmb}) {
    const std::size_t P = observation_param_count(kind), S = 6, B = 2, K = 3;
    Rng rng(10);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> raw(B * K * P * S);
    for (double& r : raw) r = n(rng);
    ObservationTargets tgt;
    tgt.samples = B;
    tgt.cells = S;
    const double cnt[] = {0, 3, 0, 1, 120, 0.3, 0, 5, 2, 0, 7, 0};
    const double ba[] = {0, 40, 0, 2.5, 2e5, 0.7, 0, 1, 60, 0, 0, 3};
    const std::uint8_t oc[] = {1, 1, 0, 1, 1, 1, 1, 0, 1, 1, 1, 0};
    const std::uint8_t ob[] = {1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 0, 0};
    tgt.cnt.assign(cnt, cnt + 12);
    tgt.ba.assign(ba, ba + 12);
    tgt.obs_cnt.assign(oc, oc + 12);
    tgt.obs_ba.assign(ob, ob + 12);
    const Tensor ll = observation_log_lik(Tensor::from({B * K, P, 3, 2}, raw), tgt, K, kind, U);
    for (std::size_t item = 0; item < B * K; ++item) {
      const std::size_t i = item / K;
      double ref = 0;
      for (std::size_t s = 0; s < S; ++s) {
        std::vector<double> r(P);
        for (std::size_t c = 0; c < P; ++c) r[c] = raw[(item * P + c) * S + s];
        const std::size_t at = i * S + s;
        ref += kind == ObservationKind::zmln
                   ? oracle::zmln_cell({r[0], r[1], r[2], r[3], r[4]}, cnt[at], ba[at], oc[at], ob[at])
                   : oracle::zmb_cell(r, cnt[at], ba[at], oc[at], ob[at], U);
      }
      EXPECT_NEAR(ll[item], ref, 1e-10 * std::max(1.0, std::abs(ref))) << observation_name(kind);
    }
  }
}

TEST(ObservationLikelihood, GradientMatchesFiniteDifferences) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  for (auto kind : {ObservationKind::zmln, ObservationKind::zmb}) {
    const std::size_t P = observation_param_count(kind);
    Rng rng(11);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> raw(2 * P * 4);
    for (double& r : raw) r = n(rng);
    Tensor decoded = Tensor::from({2, P, 2, 2}, raw, true);
    ObservationTargets tgt{1, 4, {0, 2, 9, 0.5}, {0, 30, 4, 0}, {1, 1, 1, 1}, {1, 1, 1, 0}};
    auto f = [&] { return sum_all(observation_log_lik(decoded, tgt, 2, kind, U)); };
    backward(f());
    const std::vector<double> an(decoded.grad().begin(), decoded.grad().end());
    NoGradGuard guard;
    const auto num = oracle::numeric_grad([&] { return f().item(); }, decoded, 1e-6);
    for (std::size_t i = 0; i < num.size(); ++i) EXPECT_NEAR(an[i], num[i], 1e-6) << observation_name(kind);
  }
}

TEST(Thresholds, RoundTripAndRejection) {
  const ThresholdSet U = ThresholdSet::synthetic_default();
  std::stringstream ss;
  write_thresholds(ss, U);
  const ThresholdSet back = parse_thresholds(ss);
  EXPECT_EQ(back.cnt, U.cnt);
  EXPECT_EQ(back.ba, U.ba);

  auto with_line_changed = [&](std::size_t line, const std::string& text) {
    std::stringstream src;
    write_thresholds(src, U);
    std::string out, l;
    std::size_t i = 0;
    while (std::getline(src, l)) out += (i++ == line ? text : l) + "\n";
    std::istringstream in(out);
    return parse_thresholds(in);
  };
  EXPECT_THROW(with_line_changed(3, "0.1"), DataError);     // not increasing
  EXPECT_THROW(with_line_changed(3, "abc"), DataError);     // not a number
  EXPECT_THROW(with_line_changed(0, "1.0"), DataError);     // outside a section
  EXPECT_THROW(with_line_changed(30, "# dropped"), DataError);  // wrong count
  std::istringstream empty("");
  EXPECT_THROW(parse_thresholds(empty), DataError);
}
