// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <utility>
#include <vector>

#include "cmiwae/dataset.hpp"
#include "cmiwae/model.hpp"
#include "cmiwae/objective.hpp"
#include "cmiwae/scoring.hpp"

namespace cmiwae {

/// Noise stream tag for prediction draws.
inline constexpr std::uint64_t kPredictStream = 0x9d1c7;

struct PredictOptions {
  std::size_t draws = 100;   // J
  std::size_t chunk = 50;    // draws decoded per forward pass
  std::uint64_t seed = 0;
  std::uint64_t model_index = 0;
};

/// Result of importance sampling for one data sample.
struct SamplePrediction {
  std::vector<std::array<double, kThresholdCount>> cdf;  // one per target
  std::vector<double> log_w;                             // J log weights
  double bound = 0.0;                                    // logsumexp(log_w) - ln J
};

using CellTarget = std::pair<std::size_t, Variable>;  // (cell, variable)

/// Self-normalized importance sampling estimate of the CDF at each target:
/// p̂(u) = Σ_j w̄_j F_j(u), where F_j is the observation-model CDF under draw
/// j from the variational distribution. `b` must hold exactly one sample;
/// the model runs in inference mode without recording gradients.
template <class Model>
SamplePrediction predict_sample(Model& model, const typename Model::Batch& b, const std::vector<CellTarget>& targets,
                                const PredictOptions& opt) {
  if (opt.draws < 1) throw Error("predict: need at least one draw");
  if (b.size() != 1) throw ShapeError("predict_sample expects a batch of one sample");
  NoGradGuard guard;
  const ForwardMode mode{false, nullptr};
  const DiagGaussian q = model.posterior(b, mode);
  const auto ctx = model.condition(b, mode);
  const std::vector<std::uint64_t> ids = b.ids();
  const std::size_t chunk = std::max<std::size_t>(1, opt.chunk);
  SamplePrediction out;
  std::vector<std::array<double, kThresholdCount>> acc(targets.size());
  for (auto& a : acc) a.fill(0.0);
  double top = -std::numeric_limits<double>::infinity();
  double total = 0.0;
  for (std::size_t start = 0; start < opt.draws; start += chunk) {
    const std::size_t kc = std::min(chunk, opt.draws - start);
    const Tensor eps = draw_noise(ids, kc, model.latent(), opt.seed, kPredictStream, opt.model_index, start);
    const Tensor z = q.rsample(eps);
    const Tensor decoded = model.decode(b, ctx, z, mode);
    const Tensor log_w = model.log_lik(b, decoded, kc) + ctx.prior.log_prob(z) - q.log_prob(z);
    for (std::size_t k = 0; k < kc; ++k) {
      const double lw = log_w[k];
      if (!std::isfinite(lw)) throw NumericError("predict: non-finite importance weight");
      out.log_w.push_back(lw);
      if (lw > top) {
        const double r = std::exp(top - lw);
        for (auto& a : acc) {
          for (double& v : a) v *= r;
        }
        total *= r;
        top = lw;
      }
      const double w = std::exp(lw - top);
      total += w;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto f = model.cdf(decoded, k, targets[i].first, targets[i].second);
        for (std::size_t u = 0; u < kThresholdCount; ++u) acc[i][u] += w * f[u];
      }
    }
  }
  out.cdf.resize(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t u = 0; u < kThresholdCount; ++u) out.cdf[i][u] = acc[i][u] / total;
  }
  out.bound = top + std::log(total) - std::log(static_cast<double>(opt.draws));
  return out;
}

/// The dataset as this model expects it: auxiliary channels standardized
/// with the model's statistics.
inline MaskedDataset prepared_for(const CmiwaeModel& m, const MaskedDataset& ds) {
  if (ds.W != m.arch.grid_w || ds.H != m.arch.grid_h) {
    throw DataError("dataset grid " + std::to_string(ds.W) + "x" + std::to_string(ds.H) + " does not match model grid " +
                    std::to_string(m.arch.grid_w) + "x" + std::to_string(m.arch.grid_h));
  }
  MaskedDataset out = ds;
  apply_channel_stats(out, m.c_stats);
  return out;
}

/// Predictions for every key, grouped by month, plus the per-month bound.
struct DatasetPrediction {
  PredictionSet predictions;
  std::map<std::size_t, double> bounds;  // t -> bound estimate
};

/// Runs predict_sample for each month that has keys. `ds` must already be
/// prepared for the model.
inline DatasetPrediction predict_keys(CmiwaeModel& m, const MaskedDataset& ds, const std::set<CellKey>& keys,
                                      const PredictOptions& opt) {
  std::map<std::size_t, std::vector<CellKey>> by_month;
  for (const auto& k : keys) by_month[std::get<0>(k)].push_back(k);
  DatasetPrediction out;
  for (const auto& [t, ks] : by_month) {
    std::vector<CellTarget> targets;
    for (const auto& [tt, w, h, v] : ks) targets.emplace_back(w * ds.H + h, static_cast<Variable>(v));
    const GridBatch b = make_batch(ds, {t});
    const SamplePrediction sp = predict_sample(m, b, targets, opt);
    out.bounds[t] = sp.bound;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const auto& [tt, w, h, v] = ks[i];
      out.predictions.rows.push_back({tt, w, h, static_cast<Variable>(v), sp.cdf[i]});
    }
  }
  out.predictions.validate();
  return out;
}

enum class MixRule { likelihood, uniform };

inline MixRule parse_mix(const std::string& s) {
  if (s == "likelihood") return MixRule::likelihood;
  if (s == "uniform") return MixRule::uniform;
  throw Error("unknown mixing rule '" + s + "' (expected likelihood or uniform)");
}

/// Per-month mixture weights over models: softmax of the bound estimates,
/// or uniform.
inline std::vector<double> mixture_weights(const std::vector<double>& bounds, MixRule rule) {
  std::vector<double> w(bounds.size(), 1.0 / static_cast<double>(bounds.size()));
  if (rule == MixRule::uniform) return w;
  const double top = *std::max_element(bounds.begin(), bounds.end());
  double s = 0.0;
  for (std::size_t m = 0; m < bounds.size(); ++m) s += (w[m] = std::exp(bounds[m] - top));
  for (double& v : w) v /= s;
  return w;
}

/// Mixes per-model predictions month by month. All inputs must predict the
/// same keys in the same order.
inline PredictionSet mix_predictions(const std::vector<DatasetPrediction>& parts, MixRule rule) {
  if (parts.empty()) throw Error("ensemble: no models");
  PredictionSet out;
  const auto& first = parts[0].predictions.rows;
  for (const auto& p : parts) {
    if (p.predictions.rows.size() != first.size()) throw DataError("ensemble: models predicted different cell sets");
  }
  std::map<std::size_t, std::vector<double>> weights;
  for (const auto& [t, unused] : parts[0].bounds) {
    std::vector<double> b;
    for (const auto& p : parts) b.push_back(p.bounds.at(t));
    weights[t] = mixture_weights(b, rule);
  }
  for (std::size_t r = 0; r < first.size(); ++r) {
    PredictionRow row = first[r];
    const auto& w = weights.at(row.t);
    row.p.fill(0.0);
    for (std::size_t m = 0; m < parts.size(); ++m) {
      const auto& src = parts[m].predictions.rows[r];
      if (src.t != row.t || src.w != row.w || src.h != row.h || src.var != row.var) {
        throw DataError("ensemble: models predicted different cell orders");
      }
      for (std::size_t u = 0; u < kThresholdCount; ++u) row.p[u] += w[m] * src.p[u];
    }
    for (double& v : row.p) v = std::min(v, 1.0);
    out.rows.push_back(row);
  }
  out.validate();
  return out;
}

inline void check_compatible(const std::vector<CmiwaeModel*>& models) {
  for (const auto* m : models) {
    if (m->arch.grid_w != models[0]->arch.grid_w || m->arch.grid_h != models[0]->arch.grid_h) {
      throw DataError("ensemble: models were trained on different grids");
    }
    if (m->thresholds.cnt != models[0]->thresholds.cnt || m->thresholds.ba != models[0]->thresholds.ba) {
      throw DataError("ensemble: models use different threshold sets");
    }
  }
}

/// Likelihood-weighted (or uniform) ensemble prediction. Model m draws from
/// its own noise streams, and model 0 uses the same streams as a plain
/// prediction, so an ensemble of one reproduces predict_keys exactly.
inline PredictionSet ensemble_predict(const std::vector<CmiwaeModel*>& models, const MaskedDataset& ds,
                                      const std::set<CellKey>& keys, PredictOptions opt, MixRule rule) {
  if (models.empty()) throw Error("ensemble: no models");
  check_compatible(models);
  std::vector<DatasetPrediction> parts;
  for (std::size_t m = 0; m < models.size(); ++m) {
    opt.model_index = m;
    parts.push_back(predict_keys(*models[m], prepared_for(*models[m], ds), keys, opt));
  }
  return mix_predictions(parts, rule);
}

}  // namespace cmiwae
