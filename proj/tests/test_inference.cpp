// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmiwae/cmiwae.hpp"
#include "support/experiments.hpp"
#include "support/toy_models.hpp"

using namespace cmiwae;

namespace {

struct MiniSetup {
  SyntheticData syn = miniature_dataset(11);
  CmiwaeModel model{miniature_architecture(), ThresholdSet::synthetic_default(), 21};
  std::set<CellKey> keys = missing_keys(syn.data);
};

double sample_std(const std::vector<double>& v) { return std::sqrt(experiments::mean_se(v).var); }

}  // namespace

TEST(Snis, RecoversEnumeratedPosteriorMixture) {
  const auto r = experiments::snis_recovery(10000, 1);
  EXPECT_TRUE(r.within) << "max z " << r.max_z;
  EXPECT_LT(r.max_abs_err, 0.02);
}

TEST(Snis, SingleDrawIsThatDrawsCdf) {
  toy::SignSurrogate m;
  const toy::SignSurrogate::Batch b{3.0, 12.0};
  PredictOptions opt;
  opt.draws = 1;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    opt.seed = seed;
    const auto sp = predict_sample(m, b, {{0, Variable::cnt}}, opt);
    const double z = m.q_mu + m.q_sigma * draw_noise({0}, 1, 1, seed, kPredictStream, 0)[0];
    EXPECT_EQ(sp.cdf[0], zmln_cdf_at_thresholds(z > 0 ? m.plus : m.minus, m.U, Variable::cnt));
  }
}

TEST(Snis, ConstantDecoderCollapsesToClosedForm) {
  const SyntheticData syn = miniature_dataset(11);
  const GridBatch b = make_batch(syn.data, {miniature_months(syn.data, 1)[0]});
  toy::ConstantDecoder m(b, 4);
  PredictOptions opt;
  opt.draws = 37;
  opt.chunk = 10;
  const std::size_t S = b.W * b.H;
  const auto sp = predict_sample(m, b, {{3, Variable::cnt}, {9, Variable::ba}}, opt);
  const auto fc = cell_cdf(ObservationKind::zmln, m.raw.ptr() + 3, S, m.U, Variable::cnt);
  const auto fb = cell_cdf(ObservationKind::zmln, m.raw.ptr() + 9, S, m.U, Variable::ba);
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    EXPECT_NEAR(sp.cdf[0][k], fc[k], 1e-14);
    EXPECT_NEAR(sp.cdf[1][k], fb[k], 1e-14);
  }
  for (double lw : sp.log_w) EXPECT_EQ(lw, sp.log_w[0]);
}

TEST(Snis, NormalizedWeightsSumToOne) {
  MiniSetup s;
  const GridBatch b = make_batch(prepared_for(s.model, s.syn.data), {miniature_months(s.syn.data, 1)[0]});
  PredictOptions opt;
  opt.draws = 64;
  const auto sp = predict_sample(s.model, b, {}, opt);
  ASSERT_EQ(sp.log_w.size(), 64u);
  const double top = *std::max_element(sp.log_w.begin(), sp.log_w.end());
  double tot = 0;
  for (double lw : sp.log_w) tot += std::exp(lw - top);
  double sum = 0;
  for (double lw : sp.log_w) sum += std::exp(lw - top) / tot;
  EXPECT_NEAR(sum, 1.0, 1e-12);
  EXPECT_NEAR(sp.bound, top + std::log(tot / 64.0), 1e-12);
}

TEST(Snis, RejectsZeroDraws) {
  toy::SignSurrogate m;
  PredictOptions opt;
  opt.draws = 0;
  EXPECT_THROW(predict_sample(m, {}, {}, opt), Error);
}

TEST(Snis, MoreDrawsLowerVariance) {
  toy::SignSurrogate m;
  const toy::SignSurrogate::Batch b{3.0, 12.0};
  auto spread = [&](std::size_t J) {
    std::vector<double> v;
    for (std::uint64_t rep = 0; rep < 30; ++rep) {
      PredictOptions opt;
      opt.draws = J;
      opt.seed = 100 + rep;
      v.push_back(predict_sample(m, b, {{0, Variable::cnt}}, opt).cdf[0][5]);
    }
    return sample_std(v);
  };
  EXPECT_LT(spread(1024), spread(16));
}

TEST(Predict, ChunkSizeDoesNotChangeResults) {
  MiniSetup s;
  const MaskedDataset ds = prepared_for(s.model, s.syn.data);
  PredictOptions a, b;
  a.draws = b.draws = 30;
  a.chunk = 30;
  b.chunk = 7;
  const auto pa = predict_keys(s.model, ds, s.keys, a), pb = predict_keys(s.model, ds, s.keys, b);
  ASSERT_EQ(pa.predictions.rows.size(), pb.predictions.rows.size());
  for (std::size_t r = 0; r < pa.predictions.rows.size(); ++r)
    for (std::size_t k = 0; k < kThresholdCount; ++k)
      EXPECT_NEAR(pa.predictions.rows[r].p[k], pb.predictions.rows[r].p[k], 1e-13);
}

TEST(Predict, EveryVectorIsAValidCdf) {
  for (ObservationKind kind : {ObservationKind::zmln, ObservationKind::zmb}) {
    MiniSetup s;
    CmiwaeModel model(miniature_architecture(kind), ThresholdSet::synthetic_default(), 22);
    PredictOptions opt;
    opt.draws = 20;
    const auto p = predict_keys(model, prepared_for(model, s.syn.data), s.keys, opt);
    ASSERT_EQ(p.predictions.rows.size(), s.keys.size());
    for (const auto& r : p.predictions.rows) {
      for (std::size_t k = 0; k < kThresholdCount; ++k) {
        EXPECT_GE(r.p[k], 0.0);
        EXPECT_LE(r.p[k], 1.0);
        if (k > 0) {
          EXPECT_GE(r.p[k], r.p[k - 1]);
        }
      }
    }
  }
}

TEST(Predict, IgnoresValuesAtMissingCells) {
  MiniSetup s;
  MaskedDataset other = s.syn.data;
  const std::size_t S = other.cells();
  for (std::size_t t = 0; t < other.T; ++t)
    for (std::size_t i = 0; i < S; ++i) {
      if (!other.mask_cnt[t * S + i]) other.x[(t * 4 + 0) * S + i] = other.x[(t * 4 + 2) * S + i] = 77.0 + i;
      if (!other.mask_ba[t * S + i]) other.x[(t * 4 + 1) * S + i] = other.x[(t * 4 + 3) * S + i] = 5.0 + t;
    }
  PredictOptions opt;
  opt.draws = 16;
  const auto a = predict_keys(s.model, prepared_for(s.model, s.syn.data), s.keys, opt);
  const auto b = predict_keys(s.model, prepared_for(s.model, other), s.keys, opt);
  ASSERT_EQ(a.predictions.rows.size(), b.predictions.rows.size());
  for (std::size_t r = 0; r < a.predictions.rows.size(); ++r) EXPECT_EQ(a.predictions.rows[r].p, b.predictions.rows[r].p);
  EXPECT_EQ(a.bounds, b.bounds);
}

TEST(Predict, GridMismatchIsDataError) {
  MiniSetup s;
  SynthConfig sc;
  sc.years = 2;
  sc.W = 16;
  sc.H = 8;
  EXPECT_THROW(prepared_for(s.model, synthesize(sc).data), DataError);
}

TEST(Ensemble, SingleModelEqualsPlainPrediction) {
  MiniSetup s;
  PredictOptions opt;
  opt.draws = 12;
  const auto plain = predict_keys(s.model, prepared_for(s.model, s.syn.data), s.keys, opt);
  for (MixRule rule : {MixRule::likelihood, MixRule::uniform}) {
    const PredictionSet e = ensemble_predict({&s.model}, s.syn.data, s.keys, opt, rule);
    ASSERT_EQ(e.rows.size(), plain.predictions.rows.size());
    for (std::size_t r = 0; r < e.rows.size(); ++r) EXPECT_EQ(e.rows[r].p, plain.predictions.rows[r].p);
  }
}

TEST(Ensemble, IdenticalMembersReproduceEither) {
  MiniSetup s;
  PredictOptions opt;
  opt.draws = 12;
  const auto one = predict_keys(s.model, prepared_for(s.model, s.syn.data), s.keys, opt);
  for (MixRule rule : {MixRule::likelihood, MixRule::uniform}) {
    const PredictionSet mixed = mix_predictions({one, one}, rule);
    for (std::size_t r = 0; r < mixed.rows.size(); ++r) EXPECT_EQ(mixed.rows[r].p, one.predictions.rows[r].p);
  }
}

TEST(Ensemble, LikelihoodWeightsSaturate) {
  const auto w = mixture_weights({-5000.0, -4000.0}, MixRule::likelihood);
  EXPECT_LT(w[0], 1e-300);
  EXPECT_EQ(w[1], 1.0);
  const auto u = mixture_weights({-5000.0, -4000.0}, MixRule::uniform);
  EXPECT_EQ(u[0], 0.5);
  const auto even = mixture_weights({2.0, 2.0, 2.0, 2.0}, MixRule::likelihood);
  for (double e : even) EXPECT_EQ(e, 0.25);

  MiniSetup s;
  CmiwaeModel other(miniature_architecture(), ThresholdSet::synthetic_default(), 99);
  PredictOptions opt;
  opt.draws = 8;
  auto a = predict_keys(s.model, prepared_for(s.model, s.syn.data), s.keys, opt);
  auto b = predict_keys(other, prepared_for(other, s.syn.data), s.keys, opt);
  for (auto& [t, bound] : b.bounds) bound = a.bounds.at(t) - 1000.0;
  const PredictionSet mixed = mix_predictions({a, b}, MixRule::likelihood);
  for (std::size_t r = 0; r < mixed.rows.size(); ++r)
    for (std::size_t k = 0; k < kThresholdCount; ++k) EXPECT_NEAR(mixed.rows[r].p[k], a.predictions.rows[r].p[k], 1e-12);
}

TEST(Ensemble, MixtureIsConvexCombination) {
  MiniSetup s;
  CmiwaeModel other(miniature_architecture(), ThresholdSet::synthetic_default(), 98);
  PredictOptions opt;
  opt.draws = 8;
  const auto a = predict_keys(s.model, prepared_for(s.model, s.syn.data), s.keys, opt);
  const auto b = predict_keys(other, prepared_for(other, s.syn.data), s.keys, opt);
  const PredictionSet mixed = mix_predictions({a, b}, MixRule::likelihood);
  for (std::size_t r = 0; r < mixed.rows.size(); ++r) {
    const auto& row = mixed.rows[r];
    const auto w = mixture_weights({a.bounds.at(row.t), b.bounds.at(row.t)}, MixRule::likelihood);
    for (std::size_t k = 0; k < kThresholdCount; ++k) {
      EXPECT_NEAR(row.p[k], w[0] * a.predictions.rows[r].p[k] + w[1] * b.predictions.rows[r].p[k], 1e-15);
    }
  }
}

TEST(Ensemble, RejectsIncompatibleMembers) {
  MiniSetup s;
  Architecture wide = miniature_architecture();
  wide.grid_w = 16;
  CmiwaeModel other(wide, ThresholdSet::synthetic_default(), 5);
  PredictOptions opt;
  opt.draws = 2;
  EXPECT_THROW(ensemble_predict({&s.model, &other}, s.syn.data, s.keys, opt, MixRule::likelihood), DataError);
  ThresholdSet U = ThresholdSet::synthetic_default();
  U.cnt[27] = 150;
  CmiwaeModel shifted(miniature_architecture(), U, 5);
  EXPECT_THROW(ensemble_predict({&s.model, &shifted}, s.syn.data, s.keys, opt, MixRule::likelihood), DataError);
  EXPECT_THROW(ensemble_predict({}, s.syn.data, s.keys, opt, MixRule::likelihood), Error);
  EXPECT_THROW(parse_mix("median"), Error);
  EXPECT_EQ(parse_mix("uniform"), MixRule::uniform);
}
