// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmiwae/dataset.hpp"
#include "cmiwae/model.hpp"
#include "cmiwae/objective.hpp"

namespace cmiwae {

struct GradcheckOptions {
  double step = 1e-5;       // central difference half-width
  double tolerance = 1e-4;  // on the relative error
  double floor = 1e-3;      // denominators never drop below this
};

struct ParamCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_err = 0.0;
  std::size_t worst = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<ParamCheck> params;
  bool pass = true;
  double max_rel_err = 0.0;
};

/// |a - n| / max(|a|, |n|, floor)
inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares backward() of the scalar f() with central finite differences
/// for every entry of every parameter. f must be deterministic.
inline GradcheckReport gradcheck(const std::function<Tensor()>& f, std::vector<NamedTensor> params,
                                 const GradcheckOptions& opt = {}) {
  for (auto& p : params) p.value.zero_grad();
  const Tensor loss = f();
  if (loss.numel() != 1) throw ShapeError("gradcheck: function must return a scalar");
  backward(loss);
  GradcheckReport report;
  for (auto& p : params) {
    ParamCheck pc;
    pc.name = p.name;
    pc.entries = p.value.numel();
    const std::vector<double> analytic(p.value.grad().begin(), p.value.grad().end());
    double* x = p.value.ptr();
    for (std::size_t j = 0; j < pc.entries; ++j) {
      const double orig = x[j];
      double up, down;
      {
        NoGradGuard guard;
        x[j] = orig + opt.step;
        up = f().item();
        x[j] = orig - opt.step;
        down = f().item();
      }
      x[j] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic.empty() ? 0.0 : analytic[j];
      const double err = relative_error(a, numeric, opt.floor);
      if (err >= pc.max_rel_err) {
        pc.max_rel_err = err;
        pc.worst = j;
        pc.analytic = a;
        pc.numeric = numeric;
      }
    }
    pc.pass = pc.max_rel_err < opt.tolerance;
    report.pass = report.pass && pc.pass;
    report.max_rel_err = std::max(report.max_rel_err, pc.max_rel_err);
    report.params.push_back(pc);
    p.value.zero_grad();
  }
  return report;
}

/// A small model with a few months of synthetic data, fixed noise and a
/// fixed dropout stream.
struct Miniature {
  CmiwaeModel model;
  GridBatch batch;
  Tensor eps;
  std::uint64_t dropout_seed = 0;

  /// Negative K-sample bound with the plain estimator in training mode.
  Tensor loss() {
    Rng rng = make_rng(dropout_seed, {0xd0});
    const ForwardMode mode{true, &rng};
    return cmiwae_loss(model, batch, eps, mode, Estimator::plain).loss;
  }
};

inline Architecture miniature_architecture(ObservationKind kind = ObservationKind::zmln) {
  Architecture a;
  a.n_layers = 3;
  a.latent = 3;
  a.kernel = 3;
  a.grid_w = 8;
  a.grid_h = 4;
  a.encoder_widths = {3, 3};
  a.aux_widths = {3, 3};
  a.decoder_widths = {3, 2};
  a.skip_widths = {2, 2};
  a.observation = kind;
  return a;
}

inline SyntheticData miniature_dataset(std::uint64_t seed = 11) {
  SynthConfig sc;
  sc.years = 2;
  sc.W = 8;
  sc.H = 4;
  sc.n_layers = 3;
  sc.seed = seed;
  return synthesize(sc);
}

/// The first `months` months of even years, which carry missing cells.
inline std::vector<std::size_t> miniature_months(const MaskedDataset& ds, std::size_t months) {
  std::vector<std::size_t> ts;
  for (std::size_t t = 0; t < ds.T && ts.size() < months; ++t) {
    if (ds.year[t] % 2 == 0) ts.push_back(t);
  }
  return ts;
}

inline Miniature make_miniature(std::uint64_t seed = 11, std::size_t K = 4, std::size_t months = 3,
                                ObservationKind kind = ObservationKind::zmln) {
  const SyntheticData syn = miniature_dataset(seed);
  const Architecture a = miniature_architecture(kind);
  Miniature m{CmiwaeModel(a, ThresholdSet::synthetic_default(), seed), {}, {}, seed};
  m.batch = make_batch(syn.data, miniature_months(syn.data, months));
  m.eps = draw_noise(m.batch.ids(), K, a.latent, seed, 0x9c, 0);
  return m;
}

}  // namespace cmiwae
