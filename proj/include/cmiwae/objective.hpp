// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "cmiwae/distributions.hpp"
#include "cmiwae/layers.hpp"
#include "cmiwae/random.hpp"
#include "cmiwae/tensor.hpp"

namespace cmiwae {

/// Zero imputation of x [B, 4, W, H] laid out as (CNT, BA, ln(CNT+1),
/// ln(BA+1)). Missing entries become 0 and the log channels are recomputed
/// from the imputed values. Masks are [B, W, H] with 1 = observed.
inline Tensor impute_zero(const Tensor& x, const std::vector<std::uint8_t>& mask_cnt,
                          const std::vector<std::uint8_t>& mask_ba) {
  if (x.dim() != 4 || x.shape()[1] != 4) throw ShapeError("impute_zero expects [B, 4, W, H], got " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0], S = x.shape()[2] * x.shape()[3];
  if (mask_cnt.size() != B * S || mask_ba.size() != B * S) throw ShapeError("impute_zero: mask size mismatch");
  Tensor out = x.clone();
  double* p = out.ptr();
  for (std::size_t b = 0; b < B; ++b) {
    double* cnt = p + (b * 4 + 0) * S;
    double* ba = p + (b * 4 + 1) * S;
    double* lcnt = p + (b * 4 + 2) * S;
    double* lba = p + (b * 4 + 3) * S;
    for (std::size_t s = 0; s < S; ++s) {
      if (!mask_cnt[b * S + s]) {
        cnt[s] = 0.0;
        lcnt[s] = 0.0;
      }
      if (!mask_ba[b * S + s]) {
        ba[s] = 0.0;
        lba[s] = 0.0;
      }
    }
  }
  return out;
}

/// Gradient estimator for the inference network.
enum class Estimator {
  plain,  // reparameterized gradient of the bound as written
  dreg,   // doubly reparameterized: squared normalized weights on the z path
  stl     // sticking the landing: score path severed, no reweighting
};

/// Conditioning computed once per batch from the always-observed inputs.
/// Models extend this with whatever their decoder needs.
struct PriorContext {
  DiagGaussian prior;  // [B, d]
};

// A model usable by the objective and inference code provides
//
//   using Batch = ...;                 // exposes `size()` and `ids()`
//   using Context = ...;               // has a DiagGaussian `prior`
//   DiagGaussian posterior(const Batch&, const ForwardMode&);
//   Context condition(const Batch&, const ForwardMode&);
//   Tensor decode(const Batch&, const Context&, const Tensor& z, const ForwardMode&);
//   Tensor log_lik(const Batch&, const Tensor& decoded, std::size_t K);   // [B, K]
//   std::size_t latent() const;
//
// where z is [B, K, d] and ids() returns one stable identifier per sample
// (used to address noise streams).

/// Standard normal noise [B, K, d]. Draw (i, k) comes from its own stream
/// keyed by (seed, key..., ids[i], k), so bounds with different K share
/// common random numbers.
inline Tensor draw_noise(const std::vector<std::uint64_t>& ids, std::size_t K, std::size_t d, std::uint64_t seed,
                         std::uint64_t key_a, std::uint64_t key_b, std::size_t k_offset = 0) {
  std::vector<double> v(ids.size() * K * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      Rng rng = make_rng(seed, {key_a, key_b, ids[i], k + k_offset});
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t j = 0; j < d; ++j) v[(i * K + k) * d + j] = normal(rng);
    }
  }
  return Tensor::from({ids.size(), K, d}, std::move(v));
}

/// Log importance weights [B, K] and everything needed to finish a
/// gradient estimate.
struct WeightedDraws {
  Tensor log_w;       // log p(x_o | z, c) + log p(z | c) - log q(z | x_o, c)
  Tensor log_lik;     // [B, K]
  Tensor log_prior;   // [B, K]
  Tensor log_q;       // [B, K]
  std::shared_ptr<GradientScale> scale;  // filled for DReG only
};

template <class Model>
WeightedDraws log_weights(Model& model, const typename Model::Batch& batch, const Tensor& eps,
                          const ForwardMode& mode, Estimator estimator = Estimator::plain) {
  if (eps.dim() != 3 || eps.shape()[0] != batch.size() || eps.shape()[2] != model.latent()) {
    throw ShapeError("log_weights: noise " + shape_str(eps.shape()) + " does not match batch of " +
                     std::to_string(batch.size()) + " with latent " + std::to_string(model.latent()));
  }
  const std::size_t K = eps.shape()[1];
  if (K < 1) throw Error("log_weights: K must be at least 1");
  const DiagGaussian q = model.posterior(batch, mode);
  auto ctx = model.condition(batch, mode);
  WeightedDraws out;
  const Tensor z_live = q.rsample(eps);
  Tensor z = z_live;
  if (estimator == Estimator::dreg) {
    out.scale = std::make_shared<GradientScale>();
    z = rescale_gradient(z_live, out.scale);
  }
  const DiagGaussian q_eval =
      estimator == Estimator::plain ? q : DiagGaussian{detach(q.mu), detach(q.sigma)};
  out.log_q = q_eval.log_prob(z);
  out.log_prior = ctx.prior.log_prob(z);
  const Tensor decoded = model.decode(batch, ctx, z, mode);
  out.log_lik = model.log_lik(batch, decoded, K);
  out.log_w = out.log_lik + out.log_prior - out.log_q;
  return out;
}

/// Value of the K-sample bound on a batch.
struct BoundEstimate {
  double value = 0.0;               // Σ_i [logsumexp_k log w_ik - ln K]
  std::vector<double> per_sample;   // logsumexp_k log w_ik - ln K
  Tensor log_w;                     // [B, K], untracked
  std::size_t K = 0;

  double mean() const { return per_sample.empty() ? 0.0 : value / static_cast<double>(per_sample.size()); }
};

inline BoundEstimate summarize_bound(const Tensor& log_w) {
  BoundEstimate est;
  est.K = log_w.shape()[1];
  est.log_w = detach(log_w);
  const Tensor lse = logsumexp(est.log_w, 1);
  const double log_k = std::log(static_cast<double>(est.K));
  for (std::size_t i = 0; i < lse.numel(); ++i) {
    est.per_sample.push_back(lse[i] - log_k);
    est.value += lse[i] - log_k;
  }
  return est;
}

/// Evaluates the bound without recording gradients.
template <class Model>
BoundEstimate cmiwae_bound(Model& model, const typename Model::Batch& batch, const Tensor& eps,
                           const ForwardMode& mode) {
  if (eps.dim() != 3 || eps.shape()[1] < 1) throw Error("cmiwae_bound: K must be at least 1");
  NoGradGuard guard;
  return summarize_bound(log_weights(model, batch, eps, mode, Estimator::plain).log_w);
}

struct LossResult {
  Tensor loss;          // scalar, tracked; backward() yields the estimator
  BoundEstimate bound;
};

/// Negative bound arranged so that backward() produces the chosen gradient
/// estimator. Decoder and prior parameters always receive the ordinary
/// pathwise gradient.
template <class Model>
LossResult cmiwae_loss(Model& model, const typename Model::Batch& batch, const Tensor& eps, const ForwardMode& mode,
                       Estimator estimator = Estimator::dreg) {
  if (eps.dim() != 3 || eps.shape()[1] < 1) throw Error("cmiwae_loss: K must be at least 1");
  if (estimator == Estimator::stl && eps.shape()[1] != 1) {
    throw Error("cmiwae_loss: sticking-the-landing is defined for K = 1 only");
  }
  WeightedDraws draws = log_weights(model, batch, eps, mode, estimator);
  LossResult result;
  result.bound = summarize_bound(draws.log_w);
  if (draws.scale) {
    // Normalized weights per data sample; the z path of sample i, draw k is
    // scaled by w̄_ik on top of the w̄_ik the log-sum-exp already applies.
    const std::size_t B = draws.log_w.shape()[0], K = draws.log_w.shape()[1];
    draws.scale->factors.resize(B * K);
    for (std::size_t i = 0; i < B; ++i) {
      const double lse = result.bound.per_sample[i] + std::log(static_cast<double>(K));
      for (std::size_t k = 0; k < K; ++k) {
        draws.scale->factors[i * K + k] = std::exp(draws.log_w[i * K + k] - lse);
      }
    }
  }
  result.loss = neg(sum_all(logsumexp(draws.log_w, 1)));
  return result;
}

}  // namespace cmiwae
