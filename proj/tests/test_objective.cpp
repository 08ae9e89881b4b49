// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cmiwae/cmiwae.hpp"
#include "support/cases.hpp"
#include "support/experiments.hpp"
#include "support/oracles.hpp"
#include "support/toy_models.hpp"

using namespace cmiwae;

namespace {

std::vector<double> grads_named(const std::vector<NamedTensor>& params, const std::string& prefix) {
  std::vector<double> g;
  for (const auto& p : params) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (p.value.has_grad()) {
      g.insert(g.end(), p.value.grad().begin(), p.value.grad().end());
    } else {
      g.insert(g.end(), p.value.numel(), 0.0);
    }
  }
  return g;
}

std::vector<double> vec(std::span<const double> s) { return {s.begin(), s.end()}; }

void zero_all(const std::vector<NamedTensor>& params) {
  for (auto p : params) p.value.zero_grad();
}

}  // namespace

TEST(ImputeZero, Examples) {
  const Tensor x = Tensor::from({1, 4, 2, 1}, {3, 0, 5.5, 0, std::log1p(3.0), 0, std::log1p(5.5), 0});
  const std::vector<std::uint8_t> all{1, 1}, none{0, 0}, mixed{1, 0};
  const Tensor same = impute_zero(x, all, all);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same[i], x[i]);
  const Tensor zero = impute_zero(x, none, none);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(zero[i], 0.0);
  const Tensor x2 = Tensor::from({1, 4, 2, 1}, {3, 7, 5.5, 2, std::log1p(3.0), std::log1p(7.0), std::log1p(5.5), std::log1p(2.0)});
  const Tensor m = impute_zero(x2, mixed, all);
  EXPECT_EQ(m[0], 3.0);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_EQ(m[4], std::log1p(3.0));
  EXPECT_EQ(m[5], 0.0);
  for (std::size_t i : {2u, 3u, 6u, 7u}) EXPECT_EQ(m[i], x2[i]);
  EXPECT_THROW(impute_zero(x, {1}, all), ShapeError);
}

TEST(Noise, CommonRandomNumbersAcrossK) {
  const std::vector<std::uint64_t> ids{4, 9};
  const Tensor big = draw_noise(ids, 16, 3, 5, 1, 2);
  const Tensor small = draw_noise(ids, 4, 3, 5, 1, 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(small[(i * 4 + k) * 3 + j], big[(i * 16 + k) * 3 + j]);
  const Tensor tail = draw_noise(ids, 4, 3, 5, 1, 2, 12);
  EXPECT_EQ(tail[0], big[12 * 3]);
  const Tensor one = draw_noise({9}, 16, 3, 5, 1, 2);
  for (std::size_t e = 0; e < 48; ++e) EXPECT_EQ(one[e], big[48 + e]);
  EXPECT_NE(draw_noise(ids, 1, 1, 6, 1, 2)[0], big[0]);
}

TEST(LogWeights, RecomposeFromPrimitives) {
  for (ObservationKind kind : {ObservationKind::zmln, ObservationKind::zmb}) {
    Miniature mini = make_miniature(11, 4, 3, kind);
    Rng rng = make_rng(mini.dropout_seed, {0xd0});
    const WeightedDraws w = log_weights(mini.model, mini.batch, mini.eps, {true, &rng});
    const auto ref = experiments::recompose_log_weights(mini.model, mini.batch, mini.eps, mini.dropout_seed, true);
    ASSERT_EQ(w.log_w.numel(), ref.size());
    for (std::size_t n = 0; n < ref.size(); ++n) {
      EXPECT_NEAR(w.log_w[n], ref[n], 1e-12 * std::max(1.0, std::abs(ref[n]))) << observation_name(kind);
      EXPECT_EQ(w.log_w[n], w.log_lik[n] + w.log_prior[n] - w.log_q[n]);
    }
  }
}

TEST(Bound, SingleSampleIsTheElbo) {
  Miniature mini = make_miniature(13, 1, 4);
  Rng rng = make_rng(mini.dropout_seed, {0xd0});
  const double value = [&] {
    NoGradGuard guard;
    return summarize_bound(log_weights(mini.model, mini.batch, mini.eps, {true, &rng}).log_w).value;
  }();
  const auto ref = experiments::recompose_log_weights(mini.model, mini.batch, mini.eps, mini.dropout_seed, true);
  double elbo = 0;
  for (double v : ref) elbo += v;
  EXPECT_LT(std::abs(value - elbo), 1e-10);
  const BoundEstimate eval = cmiwae_bound(mini.model, mini.batch, mini.eps, {});
  const auto ref_eval = experiments::recompose_log_weights(mini.model, mini.batch, mini.eps, 0, false);
  double elbo_eval = 0;
  for (double v : ref_eval) elbo_eval += v;
  EXPECT_LT(std::abs(eval.value - elbo_eval), 1e-10);
}

TEST(Bound, ValueIsSumAndMeanIsPerSample) {
  const Tensor lw = Tensor::from({2, 3}, {-1, -2, -3, 0.5, 0.5, 0.5});
  const BoundEstimate e = summarize_bound(lw);
  const double a = std::log((std::exp(-1.0) + std::exp(-2.0) + std::exp(-3.0)) / 3), b = 0.5;
  EXPECT_NEAR(e.per_sample[0], a, 1e-15);
  EXPECT_NEAR(e.per_sample[1], b, 1e-15);
  EXPECT_NEAR(e.value, a + b, 1e-15);
  EXPECT_NEAR(e.mean(), (a + b) / 2, 1e-15);
  EXPECT_EQ(e.K, 3u);
}

TEST(Bound, DegenerateModelIsExactForEveryK) {
  const SyntheticData syn = miniature_dataset(11);
  const GridBatch b = make_batch(syn.data, miniature_months(syn.data, 4));
  toy::ConstantDecoder model(b, 2);
  double expected = 0;
  const std::size_t S = b.W * b.H;
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t s = 0; s < S; ++s) {
      std::array<double, 5> raw{};
      for (std::size_t p = 0; p < 5; ++p) raw[p] = model.raw[(i * 5 + p) * S + s];
      expected += oracle::zmln_cell(raw, b.targets.cnt[i * S + s], b.targets.ba[i * S + s], b.targets.obs_cnt[i * S + s],
                                    b.targets.obs_ba[i * S + s]);
    }
  }
  for (std::size_t K : {1u, 8u, 64u}) {
    for (std::uint64_t seed : {1u, 2u}) {
      const Tensor eps = draw_noise(b.ids(), K, model.d, seed, 7, 0);
      EXPECT_NEAR(cmiwae_bound(model, b, eps, {}).value, expected, 1e-9) << "K=" << K;
    }
  }
}

TEST(Bound, EmptyMaskLeavesPriorOverPosterior) {
  const SyntheticData syn = miniature_dataset(11);
  MaskedDataset ds = syn.data;
  std::fill(ds.mask_cnt.begin(), ds.mask_cnt.end(), 0);
  std::fill(ds.mask_ba.begin(), ds.mask_ba.end(), 0);
  const GridBatch b = make_batch(ds, {0, 1});
  CmiwaeModel model(miniature_architecture(), ThresholdSet::synthetic_default(), 3);
  const Tensor eps = draw_noise(b.ids(), 3, 3, 1, 0, 0);
  NoGradGuard guard;
  const WeightedDraws w = log_weights(model, b, eps, {});
  for (std::size_t n = 0; n < 6; ++n) {
    EXPECT_EQ(w.log_lik[n], 0.0);
    EXPECT_EQ(w.log_w[n], w.log_prior[n] - w.log_q[n]);
  }
}

TEST(Bound, MonotoneInKWithCommonNoise) {
  Miniature mini = make_miniature(17, 1, 3);
  const auto r = experiments::bound_monotonicity(mini.model, mini.batch, {1, 4, 16}, 60);
  for (const auto& g : r.gap) EXPECT_GT(g.mean, -g.se);
  EXPECT_LT(r.bound[0].mean, r.bound[2].mean);
}

TEST(Bound, RejectsEmptySampleCount) {
  Miniature mini = make_miniature();
  EXPECT_THROW(cmiwae_bound(mini.model, mini.batch, Tensor::zeros({3, 0, 3}), {}), Error);
  EXPECT_THROW(cmiwae_loss(mini.model, mini.batch, Tensor::zeros({3, 0, 3}), {}), Error);
  EXPECT_THROW(cmiwae_loss(mini.model, mini.batch, mini.eps, {}, Estimator::stl), Error);
  EXPECT_THROW(cmiwae_bound(mini.model, mini.batch, Tensor::zeros({3, 4, 2}), {}), ShapeError);
}

TEST(Bound, FiniteForHugeLogWeights) {
  const Tensor lw = Tensor::from({2, 3}, {-1e4, -1e4 + 1, -2e4, 1e4, 1e4 - 5, -1e4});
  const BoundEstimate e = summarize_bound(lw);
  EXPECT_TRUE(std::isfinite(e.value));
  EXPECT_NEAR(e.per_sample[1], 1e4 + std::log((1 + std::exp(-5.0)) / 3), 1e-9);

  toy::LinearGaussian m;
  toy::VectorBatch b = m.sample_batch(2, 9);
  for (std::size_t i = 0; i < b.x.numel(); ++i) b.x.ptr()[i] *= 60.0;
  const Tensor eps = draw_noise(b.ids(), 8, m.d, 3, 0, 0);
  const LossResult r = cmiwae_loss(m, b, eps, {});
  EXPECT_LT(r.bound.value, -1e4);
  EXPECT_TRUE(std::isfinite(r.bound.value));
  backward(r.loss);
  for (const auto& p : m.encoder_parameters())
    for (double g : p.value.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Dreg, DecoderAndPriorGradientsMatchPlain) {
  Miniature mini = make_miniature(19, 4, 3);
  auto run = [&](Estimator est) {
    zero_all(mini.model.parameters());
    Rng rng = make_rng(mini.dropout_seed, {0xd0});
    backward(cmiwae_loss(mini.model, mini.batch, mini.eps, {true, &rng}, est).loss);
    return std::make_pair(grads_named(mini.model.parameters(), "decoder"), grads_named(mini.model.parameters(), "aux"));
  };
  const auto plain = run(Estimator::plain), dreg = run(Estimator::dreg);
  ASSERT_FALSE(plain.first.empty());
  ASSERT_FALSE(plain.second.empty());
  for (std::size_t i = 0; i < plain.first.size(); ++i)
    EXPECT_NEAR(plain.first[i], dreg.first[i], 1e-10 * std::max(1.0, std::abs(plain.first[i])));
  for (std::size_t i = 0; i < plain.second.size(); ++i)
    EXPECT_NEAR(plain.second[i], dreg.second[i], 1e-10 * std::max(1.0, std::abs(plain.second[i])));
}

TEST(Dreg, SingleSampleMatchesStickingTheLanding) {
  toy::LinearGaussian m;
  const toy::VectorBatch b = m.sample_batch(3, 4);
  const Tensor eps = draw_noise(b.ids(), 1, m.d, 8, 0, 0);
  const auto ref = experiments::dreg_gradient_oracle(m, b, eps);
  const auto dreg = experiments::gamma_gradient(m, b, eps, Estimator::dreg);
  const auto stl = experiments::gamma_gradient(m, b, eps, Estimator::stl);
  for (std::size_t j = 0; j < ref.size(); ++j) {
    EXPECT_NEAR(dreg[j], ref[j], 1e-10 * std::max(1.0, std::abs(ref[j])));
    EXPECT_NEAR(stl[j], ref[j], 1e-10 * std::max(1.0, std::abs(ref[j])));
  }
}

TEST(Dreg, ManySamplesMatchHandFormula) {
  toy::LinearGaussian m;
  const toy::VectorBatch b = m.sample_batch(3, 4);
  const Tensor eps = draw_noise(b.ids(), 6, m.d, 8, 0, 0);
  const auto ref = experiments::dreg_gradient_oracle(m, b, eps);
  const auto dreg = experiments::gamma_gradient(m, b, eps, Estimator::dreg);
  for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(dreg[j], ref[j], 1e-10 * std::max(1.0, std::abs(ref[j])));
  const auto plain = experiments::gamma_gradient(m, b, eps, Estimator::plain);
  double diff = 0;
  for (std::size_t j = 0; j < ref.size(); ++j) diff += std::abs(plain[j] - dreg[j]);
  EXPECT_GT(diff, 1e-6);
}

TEST(Dreg, UnbiasedAgainstPlainEstimator) {
  const auto r = experiments::dreg_unbiasedness(4000, 8);
  EXPECT_LT(r.max_z, 3.0);
}

TEST(Dreg, LowerVarianceThanPlainEstimator) {
  const auto r = experiments::dreg_variance(30, 100, 8);
  EXPECT_LE(r.median_dreg, r.median_plain);
}

TEST(MaskingContract, MissingValuesDoNotReachTheObjective) {
  const SyntheticData syn = miniature_dataset(11);
  const MaskedDataset other = cases::scramble_missing(syn.data, 5);
  const auto ts = miniature_months(syn.data, 3);
  const GridBatch a = make_batch(syn.data, ts), b = make_batch(other, ts);
  ASSERT_NE(vec(a.x.values()), vec(b.x.values()));
  for (ObservationKind kind : {ObservationKind::zmln, ObservationKind::zmb}) {
    CmiwaeModel model(miniature_architecture(kind), ThresholdSet::synthetic_default(), 4);
    const Tensor eps = draw_noise(a.ids(), 4, 3, 2, 0, 0);
    const BoundEstimate ea = cmiwae_bound(model, a, eps, {}), eb = cmiwae_bound(model, b, eps, {});
    EXPECT_EQ(ea.value, eb.value);
    EXPECT_EQ(vec(ea.log_w.values()), vec(eb.log_w.values()));
    auto grads = [&](const GridBatch& batch) {
      zero_all(model.parameters());
      Rng rng(3);
      backward(cmiwae_loss(model, batch, eps, {true, &rng}).loss);
      return grads_named(model.parameters(), "");
    };
    EXPECT_EQ(grads(a), grads(b));
  }
}

TEST(Ablation, FixedPriorIsStandardNormal) {
  Architecture a = miniature_architecture();
  a.fittable_prior = false;
  CmiwaeModel model(a, ThresholdSet::synthetic_default(), 5);
  for (const auto& p : model.parameters()) EXPECT_NE(p.name.rfind("aux.head", 0), 0u) << p.name;
  const SyntheticData syn = miniature_dataset(11);
  const GridBatch b = make_batch(syn.data, {0, 5});
  const auto ctx = model.condition(b, {});
  for (std::size_t i = 0; i < ctx.prior.mu.numel(); ++i) {
    EXPECT_EQ(ctx.prior.mu[i], 0.0);
    EXPECT_EQ(ctx.prior.sigma[i], 1.0);
  }
  EXPECT_FALSE(ctx.prior.mu.requires_grad());

  CmiwaeModel fitted(miniature_architecture(), ThresholdSet::synthetic_default(), 5);
  const Tensor eps = draw_noise(b.ids(), 2, 3, 1, 0, 0);
  backward(cmiwae_loss(fitted, b, eps, {}).loss);
  double head = 0;
  for (const auto& p : fitted.parameters())
    if (p.name.rfind("aux.head", 0) == 0 && p.value.has_grad())
      for (double g : p.value.grad()) head += std::abs(g);
  EXPECT_GT(head, 0.0);
}

TEST(Ablation, WithoutSkipsDecoderSeesOnlyZ) {
  Architecture a = miniature_architecture();
  a.skips = false;
  CmiwaeModel model(a, ThresholdSet::synthetic_default(), 6);
  const SyntheticData syn = miniature_dataset(11);
  const GridBatch b1 = make_batch(syn.data, {0, 1}), b2 = make_batch(syn.data, {7, syn.data.T - 1});
  const auto c1 = model.condition(b1, {}), c2 = model.condition(b2, {});
  EXPECT_TRUE(c1.intermediates.empty());
  const Tensor z = draw_noise(b1.ids(), 2, 3, 1, 0, 0);
  EXPECT_EQ(vec(model.decode(b1, c1, z, {}).values()), vec(model.decode(b2, c2, z, {}).values()));
  CmiwaeModel with(miniature_architecture(), ThresholdSet::synthetic_default(), 6);
  const auto w1 = with.condition(b1, {}), w2 = with.condition(b2, {});
  EXPECT_NE(vec(with.decode(b1, w1, z, {}).values()), vec(with.decode(b2, w2, z, {}).values()));
}
