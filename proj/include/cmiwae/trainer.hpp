// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cmiwae/dataset.hpp"
#include "cmiwae/inference.hpp"
#include "cmiwae/model.hpp"
#include "cmiwae/objective.hpp"
#include "cmiwae/scoring.hpp"

namespace cmiwae {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 12;
  std::size_t K = 32;
  double lr_start = 1.2e-4;
  double lr_max = 3e-3;
  double lr_final = 3e-5;
  double beta1_high = 0.95;
  double beta1_low = 0.85;
  double beta2 = 0.99;
  double eps = 1e-5;
  double weight_decay = 0.01;
  double warmup = 0.25;
  double clip_norm = 10.0;
  double norm_momentum = 0.1;
  std::size_t validation_draws = 100;
  bool fixed_validation_seed = false;  // same validation masks and draws every epoch
  Estimator estimator = Estimator::dreg;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw Error("train: epochs must be at least 1");
    if (batch_size < 1) throw Error("train: batch size must be at least 1");
    if (K < 1) throw Error("train: K must be at least 1");
    const bool frozen = lr_start == 0.0 && lr_max == 0.0 && lr_final == 0.0;
    if (!frozen && !(lr_start < lr_max && lr_final < lr_max)) {
      throw Error("train: learning rates must satisfy lr_start < lr_max and lr_final < lr_max");
    }
    if (warmup < 0.0 || warmup > 1.0) throw Error("train: warmup fraction must lie in [0, 1]");
    if (validation_draws < 1) throw Error("train: validation draws must be at least 1");
  }
};

inline Json train_config_to_json(const TrainConfig& c) {
  return Json{{"epochs", c.epochs},         {"batch_size", c.batch_size},
              {"K", c.K},                   {"lr_start", c.lr_start},
              {"lr_max", c.lr_max},         {"lr_final", c.lr_final},
              {"beta1_high", c.beta1_high}, {"beta1_low", c.beta1_low},
              {"beta2", c.beta2},           {"eps", c.eps},
              {"weight_decay", c.weight_decay}, {"warmup", c.warmup},
              {"clip_norm", c.clip_norm},   {"norm_momentum", c.norm_momentum},
              {"validation_draws", c.validation_draws},
              {"fixed_validation_seed", c.fixed_validation_seed},
              {"estimator", c.estimator == Estimator::dreg ? "dreg" : c.estimator == Estimator::stl ? "stl" : "plain"},
              {"seed", c.seed}};
}

struct Schedule {
  double lr;
  double beta1;
};

namespace detail {

// Cosine interpolation from a (pos = 0) to b (pos = 1).
inline double cos_interp(double a, double b, double pos) {
  return a + 0.5 * (b - a) * (1.0 - std::cos(std::numbers::pi * pos));
}

}  // namespace detail

/// One-cycle policy: over the warm-up steps the learning rate rises
/// cosine-shaped from lr_start to lr_max while beta1 falls from beta1_high
/// to beta1_low; afterwards lr anneals to lr_final at the last step and
/// beta1 returns to beta1_high.
inline Schedule one_cycle(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0 || step >= total) {
    throw Error("one_cycle: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + ")");
  }
  if (total == 1) return {cfg.lr_start, cfg.beta1_high};
  const auto warm = std::min<std::size_t>(
      total - 1, std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.warmup * static_cast<double>(total)))));
  if (step < warm) {
    const double pos = static_cast<double>(step) / static_cast<double>(warm);
    return {detail::cos_interp(cfg.lr_start, cfg.lr_max, pos), detail::cos_interp(cfg.beta1_high, cfg.beta1_low, pos)};
  }
  const std::size_t span = total - 1 - warm;
  const double pos = span == 0 ? 1.0 : static_cast<double>(step - warm) / static_cast<double>(span);
  return {detail::cos_interp(cfg.lr_max, cfg.lr_final, pos), detail::cos_interp(cfg.beta1_low, cfg.beta1_high, pos)};
}

/// First and second moment estimates, one pair per parameter.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;

  void init(const std::vector<NamedTensor>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.value.numel(), 0.0);
      v.emplace_back(p.value.numel(), 0.0);
    }
    t = 0;
  }
};

/// True when every gradient entry is finite.
inline bool gradients_finite(const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    for (double g : p.value.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  return true;
}

/// Scales all gradients so their joint Euclidean norm is at most max_norm.
/// Returns the norm before scaling.
inline double clip_global_norm(std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params) {
      if (!p.value.has_grad()) continue;
      for (double& g : p.value.grad_mut()) g *= s;
    }
  }
  return norm;
}

/// One Adam update with decoupled weight decay: decayed parameters are
/// first multiplied by (1 - lr * wd), then moved by the bias-corrected
/// moment ratio. Returns false (and changes nothing) if any gradient is
/// not finite. Parameters without a gradient are treated as having zero
/// gradient.
inline bool adam_step(std::vector<NamedTensor>& params, AdamState& st, double lr, double beta1,
                      const TrainConfig& cfg) {
  if (st.m.size() != params.size()) throw ShapeError("adam_step: state does not match parameters");
  if (!gradients_finite(params)) return false;
  ++st.t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].value;
    if (st.m[i].size() != p.numel()) throw ShapeError("adam_step: state shape mismatch for " + params[i].name);
    const auto g = p.grad();
    double* x = p.ptr();
    if (params[i].decay && cfg.weight_decay != 0.0) {
      for (std::size_t j = 0; j < p.numel(); ++j) x[j] *= 1.0 - lr * cfg.weight_decay;
    }
    for (std::size_t j = 0; j < p.numel(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      st.m[i][j] = beta1 * st.m[i][j] + (1.0 - beta1) * gj;
      st.v[i][j] = cfg.beta2 * st.v[i][j] + (1.0 - cfg.beta2) * gj * gj;
      x[j] -= lr * (st.m[i][j] / bc1) / (std::sqrt(st.v[i][j] / bc2) + cfg.eps);
    }
  }
  return true;
}

struct EpochLog {
  std::size_t epoch = 0;        // 1-based
  double bound = 0.0;           // mean per-sample training bound
  double val_score = 0.0;       // validation score per hidden cell (NaN if none)
  double lr = 0.0;              // learning rate at the epoch's last step
  std::size_t skipped_steps = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_score = std::numeric_limits<double>::quiet_NaN();
};

/// Standard deviations of the raw CNT and BA values observed in the
/// given months; used to scale the encoder's raw inputs.
inline InputScale data_scale(const MaskedDataset& ds, const std::vector<std::size_t>& ts) {
  double s[2] = {0, 0}, s2[2] = {0, 0}, n = 0;
  for (std::size_t t : ts) {
    for (std::size_t i = 0; i < ds.cells(); ++i) {
      if (!ds.observed(t, i, Variable::cnt) || !ds.observed(t, i, Variable::ba)) continue;
      for (std::size_t v = 0; v < 2; ++v) {
        const double x = ds.x_at(t, v, i);
        s[v] += x;
        s2[v] += x * x;
      }
      n += 1.0;
    }
  }
  InputScale out;
  if (n < 2) return out;
  const double sd0 = std::sqrt(std::max(0.0, s2[0] / n - (s[0] / n) * (s[0] / n)));
  const double sd1 = std::sqrt(std::max(0.0, s2[1] / n - (s[1] / n) * (s[1] / n)));
  out.cnt = sd0 > 0.0 ? sd0 : 1.0;
  out.ba = sd1 > 0.0 ? sd1 : 1.0;
  return out;
}

/// Validation score for the current model: extra cells hidden from the
/// validation months are predicted and scored, and the total is divided by
/// the number of hidden cells. NaN when nothing was hidden.
inline double validation_score(CmiwaeModel& model, const MaskedDataset& ds, const Split& split, std::uint64_t seed,
                               std::size_t draws) {
  const ValidationMasks vm = make_validation_masks(ds, split, seed);
  if (vm.count == 0) return std::numeric_limits<double>::quiet_NaN();
  const MaskedDataset hidden = apply_hidden(ds, vm.hidden);
  const std::set<CellKey> keys = missing_keys(ds, &vm.hidden);
  PredictOptions opt;
  opt.draws = draws;
  opt.seed = seed;
  const DatasetPrediction pred = predict_keys(model, hidden, keys, opt);
  const TruthGrid truth{ds.T, ds.W, ds.H, &ds.x};
  return score(pred.predictions, truth, model.thresholds).s_total / static_cast<double>(vm.count);
}

/// Everything needed to continue an interrupted run.
struct TrainState {
  std::size_t epochs_done = 0;
  std::size_t step = 0;
  AdamState adam;
  TrainResult result;
};

inline Checkpoint state_to_checkpoint(const CmiwaeModel& model, const TrainState& st) {
  Checkpoint ck = make_checkpoint(model);
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.push_back({"adam.m." + params[i].name, Tensor::from({st.adam.m[i].size()}, st.adam.m[i]), false});
    ck.tensors.push_back({"adam.v." + params[i].name, Tensor::from({st.adam.v[i].size()}, st.adam.v[i]), false});
  }
  for (const auto& nt : st.result.best.tensors) ck.tensors.push_back({"best." + nt.name, nt.value, false});
  Json log = Json::array();
  for (const auto& e : st.result.log) {
    log.push_back({e.epoch, e.bound, std::isnan(e.val_score) ? Json(nullptr) : Json(e.val_score), e.lr,
                   e.skipped_steps});
  }
  ck.metadata = {{"kind", "train-state"},
                 {"epochs_done", st.epochs_done},
                 {"step", st.step},
                 {"adam_t", st.adam.t},
                 {"best_epoch", st.result.best_epoch},
                 {"best_metadata", st.result.best.metadata},
                 {"log", log}};
  return ck;
}

/// Trains one model on a split and returns the checkpoint of the epoch with
/// the lowest validation score. `ds` supplies raw auxiliary channels; they
/// are standardized with statistics from the training years only.
inline TrainResult train(const MaskedDataset& ds, const Split& split, const Architecture& arch, const ThresholdSet& U,
                         const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch = {},
                         const Checkpoint* resume = nullptr,
                         const std::function<void(const Checkpoint&)>& on_state = {}) {
  cfg.validate();
  const std::vector<std::size_t> train_months = ds.months_of(split.train_years);
  if (train_months.empty()) throw DataError("train: split has no training months");
  MaskedDataset data = ds;
  apply_channel_stats(data, compute_channel_stats(ds, train_months));

  CmiwaeModel model(arch, U, stream_seed(cfg.seed, {0x30de1}));
  model.c_stats = data.c_stats;
  model.x_scale = data_scale(data, train_months);
  std::vector<NamedTensor> params = model.parameters();
  for (auto& nl : model.encoder.stack.norms) nl.momentum = cfg.norm_momentum;
  for (auto& nl : model.aux_encoder.stack.norms) nl.momentum = cfg.norm_momentum;
  model.decoder.fc_norm.momentum = cfg.norm_momentum;
  for (auto& st : model.decoder.stages) {
    if (st.norm) st.norm->momentum = cfg.norm_momentum;
  }

  TrainState state;
  state.adam.init(params);
  if (resume) {
    std::map<std::string, Tensor> values;
    Checkpoint best;
    best.arch = arch;
    for (const auto& nt : resume->tensors) {
      values[nt.name] = nt.value;
      if (nt.name.rfind("best.", 0) == 0) best.tensors.push_back({nt.name.substr(5), nt.value, nt.decay});
    }
    model.load_state(values);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& m = values.at("adam.m." + params[i].name);
      const Tensor& v = values.at("adam.v." + params[i].name);
      state.adam.m[i].assign(m.values().begin(), m.values().end());
      state.adam.v[i].assign(v.values().begin(), v.values().end());
    }
    const Json& meta = resume->metadata;
    state.epochs_done = meta.at("epochs_done").get<std::size_t>();
    state.step = meta.at("step").get<std::size_t>();
    state.adam.t = meta.at("adam_t").get<std::size_t>();
    state.result.best_epoch = meta.at("best_epoch").get<std::size_t>();
    best.metadata = meta.at("best_metadata");
    state.result.best = std::move(best);
    for (const auto& e : meta.at("log")) {
      EpochLog l{e[0].get<std::size_t>(), e[1].get<double>(),
                 e[2].is_null() ? std::numeric_limits<double>::quiet_NaN() : e[2].get<double>(), e[3].get<double>(),
                 e[4].get<std::size_t>()};
      state.result.log.push_back(l);
    }
    if (state.result.best_epoch > 0) state.result.best_score = state.result.log[state.result.best_epoch - 1].val_score;
  }

  const std::size_t batches = (train_months.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = batches * cfg.epochs;
  Json base_meta = {{"train_years", split.train_years},
                    {"validation_years", split.validation_years},
                    {"seed", cfg.seed},
                    {"config", train_config_to_json(cfg)}};

  for (std::size_t epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_months;
    Rng shuffle_rng = make_rng(cfg.seed, {0x5f, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    EpochLog log;
    log.epoch = epoch;
    double bound_sum = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = bi * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      const GridBatch batch = make_batch(data, {order.begin() + static_cast<long>(lo), order.begin() + static_cast<long>(hi)});
      Rng drop_rng = make_rng(cfg.seed, {0xd7, epoch, bi});
      const ForwardMode mode{true, &drop_rng};
      const Tensor eps = draw_noise(batch.ids(), cfg.K, arch.latent, cfg.seed, epoch, bi);
      for (auto& p : params) p.value.zero_grad();
      LossResult lr = cmiwae_loss(model, batch, eps, mode, cfg.estimator);
      backward(lr.loss);
      bound_sum += lr.bound.value;
      const Schedule sch = one_cycle(state.step, total_steps, cfg);
      clip_global_norm(params, cfg.clip_norm);
      if (!adam_step(params, state.adam, sch.lr, sch.beta1, cfg)) ++log.skipped_steps;
      log.lr = sch.lr;
      ++state.step;
    }
    for (auto& p : params) p.value.zero_grad();
    log.bound = bound_sum / static_cast<double>(train_months.size());
    const std::uint64_t val_seed = stream_seed(cfg.seed, {0x7a1, cfg.fixed_validation_seed ? 0 : epoch});
    log.val_score = validation_score(model, data, split, val_seed, cfg.validation_draws);
    state.result.log.push_back(log);
    const bool better = !std::isnan(log.val_score) &&
                        (std::isnan(state.result.best_score) || log.val_score < state.result.best_score);
    // Without any validation cells the latest epoch is kept.
    const bool keep_latest = std::isnan(state.result.best_score) && std::isnan(log.val_score);
    if (better || keep_latest || state.result.best_epoch == 0) {
      Json meta = base_meta;
      meta["epoch"] = epoch;
      meta["validation_score"] = std::isnan(log.val_score) ? Json(nullptr) : Json(log.val_score);
      state.result.best = make_checkpoint(model, meta);
      state.result.best_epoch = epoch;
      state.result.best_score = log.val_score;
    }
    state.epochs_done = epoch;
    if (on_epoch) on_epoch(log);
    if (on_state) on_state(state_to_checkpoint(model, state));
  }
  return state.result;
}

}  // namespace cmiwae
