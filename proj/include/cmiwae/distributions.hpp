// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "cmiwae/tensor.hpp"

namespace cmiwae {

inline constexpr std::size_t kThresholdCount = 28;
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // ln(2*pi)/2
/// Log-density reported for impossible (zero, positive) pairs.
inline constexpr double kImpossibleLogProb = -1e30;
inline constexpr double kSigmaFloor = 1e-6;

enum class Variable { cnt = 0, ba = 1 };

inline const char* variable_name(Variable v) { return v == Variable::cnt ? "CNT" : "BA"; }

/// Standard normal CDF via the complementary error function.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// ---------------------------------------------------------------------------
// Thresholds

/// The 28 severity thresholds per variable on which CDFs are evaluated.
struct ThresholdSet {
  std::array<double, kThresholdCount> cnt{};
  std::array<double, kThresholdCount> ba{};

  const std::array<double, kThresholdCount>& of(Variable v) const { return v == Variable::cnt ? cnt : ba; }

  void validate() const {
    for (Variable v : {Variable::cnt, Variable::ba}) {
      const auto& u = of(v);
      for (std::size_t i = 0; i < kThresholdCount; ++i) {
        if (!std::isfinite(u[i]) || u[i] < 0.0) {
          throw DataError(std::string("threshold set ") + variable_name(v) + ": negative or non-finite value");
        }
        if (i > 0 && !(u[i] > u[i - 1])) {
          throw DataError(std::string("threshold set ") + variable_name(v) + ": not strictly increasing at line " +
                          std::to_string(i + 1));
        }
      }
    }
  }

  /// Synthetic stand-ins: counts on a 1-2-10 style grid, burnt areas as
  /// exponentials from 1 to 1e5 rounded to two significant digits.
  static ThresholdSet synthetic_default() {
    ThresholdSet t;
    const double cnt[kThresholdCount] = {0.5, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16,
                                         18, 20, 22, 24, 26, 28, 30, 40, 50, 60, 70, 80, 90, 100};
    std::copy(std::begin(cnt), std::end(cnt), t.cnt.begin());
    for (std::size_t i = 0; i < kThresholdCount; ++i) {
      const double raw = std::pow(10.0, 5.0 * static_cast<double>(i) / 27.0);
      const double mag = std::pow(10.0, std::floor(std::log10(raw)) - 1.0);
      t.ba[i] = std::round(raw / mag) * mag;
    }
    t.validate();
    return t;
  }
};

inline ThresholdSet parse_thresholds(std::istream& in) {
  ThresholdSet t;
  std::vector<double> cnt, ba;
  std::vector<double>* section = nullptr;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    line = line.substr(first, line.find_last_not_of(" \t\r") - first + 1);
    if (line[0] == '#') continue;
    if (line == "[CNT]") { section = &cnt; continue; }
    if (line == "[BA]") { section = &ba; continue; }
    if (!section) throw DataError("threshold file line " + std::to_string(line_no) + ": value outside a section");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(line, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != line.size()) throw DataError("threshold file line " + std::to_string(line_no) + ": not a number");
    section->push_back(v);
  }
  if (cnt.size() != kThresholdCount || ba.size() != kThresholdCount) {
    throw DataError("threshold file needs exactly 28 values in each of [CNT] and [BA]");
  }
  std::copy(cnt.begin(), cnt.end(), t.cnt.begin());
  std::copy(ba.begin(), ba.end(), t.ba.begin());
  t.validate();
  return t;
}

inline ThresholdSet load_thresholds(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open threshold file " + path);
  return parse_thresholds(in);
}

inline void write_thresholds(std::ostream& out, const ThresholdSet& t) {
  out.precision(17);
  out << "[CNT]\n";
  for (double v : t.cnt) out << v << '\n';
  out << "[BA]\n";
  for (double v : t.ba) out << v << '\n';
}

inline void save_thresholds(const std::string& path, const ThresholdSet& t) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write threshold file " + path);
  write_thresholds(out, t);
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian

/// N(mu, diag(sigma^2)). mu and sigma are [d] or batched [B, d].
struct DiagGaussian {
  Tensor mu;
  Tensor sigma;

  /// Log-density of z. z may carry one extra sample axis before the last:
  /// [B, K, d] against batched parameters yields [B, K].
  Tensor log_prob(const Tensor& z) const {
    for (double s : sigma.values()) {
      if (!(s > 0.0)) throw DomainError("gaussian log_prob: nonpositive sigma");
    }
    Tensor m = mu, s = sigma;
    if (z.dim() == mu.dim() + 1) {
      Shape expanded = mu.shape();
      expanded.insert(expanded.end() - 1, 1);
      m = reshape(mu, expanded);
      s = reshape(sigma, expanded);
    } else if (z.shape() != mu.shape()) {
      throw ShapeError("gaussian log_prob: z " + shape_str(z.shape()) + " vs mu " + shape_str(mu.shape()));
    }
    const Tensor u = (z - m) / s;
    const Tensor per_dim = neg(log(s)) - square(u) * 0.5 - kHalfLog2Pi;
    return sum(per_dim, {-1});
  }

  /// mu + sigma * eps; eps is [d], or [B, K, d] for batched parameters.
  Tensor rsample(const Tensor& eps) const {
    if (eps.dim() == mu.dim() + 1) {
      Shape expanded = mu.shape();
      expanded.insert(expanded.end() - 1, 1);
      if (eps.shape().back() != mu.shape().back() || eps.shape()[0] != mu.shape()[0]) {
        throw ShapeError("rsample: eps " + shape_str(eps.shape()) + " vs mu " + shape_str(mu.shape()));
      }
      return reshape(mu, expanded) + reshape(sigma, expanded) * eps;
    }
    if (eps.shape() != mu.shape()) {
      throw ShapeError("rsample: eps " + shape_str(eps.shape()) + " vs mu " + shape_str(mu.shape()));
    }
    return mu + sigma * eps;
  }

  static DiagGaussian standard(Shape shape) {
    return {Tensor::zeros(shape), Tensor::full(shape, 1.0)};
  }
};

/// Σ_j [-ln(2π)/2 - ln σ_j - (z_j - μ_j)² / (2σ_j²)] on plain values.
inline double gaussian_log_prob(std::span<const double> mu, std::span<const double> sigma,
                                std::span<const double> z) {
  if (mu.size() != sigma.size() || mu.size() != z.size()) throw ShapeError("gaussian_log_prob: size mismatch");
  double lp = 0.0;
  for (std::size_t j = 0; j < mu.size(); ++j) {
    if (!(sigma[j] > 0.0)) throw DomainError("gaussian_log_prob: nonpositive sigma");
    const double u = (z[j] - mu[j]) / sigma[j];
    lp += -kHalfLog2Pi - std::log(sigma[j]) - 0.5 * u * u;
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Zero-modified observation models

enum class ObservationKind { zmln, zmb };

inline const char* observation_name(ObservationKind k) { return k == ObservationKind::zmln ? "zmln" : "zmb"; }

inline ObservationKind parse_observation(const std::string& s) {
  if (s == "zmln") return ObservationKind::zmln;
  if (s == "zmb") return ObservationKind::zmb;
  throw Error("unknown observation model '" + s + "' (expected zmln or zmb)");
}

/// Decoder channels per grid cell: p0 logit, then the positive-part
/// parameters (2 means + 2 scales, or 28 + 28 bin logits).
inline std::size_t observation_param_count(ObservationKind k) {
  return k == ObservationKind::zmln ? 1 + 2 + 2 : 1 + kThresholdCount + kThresholdCount;
}

inline void check_nonnegative(double cnt, double ba) {
  if (cnt < 0.0 || ba < 0.0 || std::isnan(cnt) || std::isnan(ba)) {
    throw DomainError("observation values must be nonnegative");
  }
}

/// One cell of the zero-modified log-normal model.
struct ZmlnParams {
  double p0 = 0.5;
  std::array<double, 2> mu{};     // log-scale means (CNT, BA)
  std::array<double, 2> sigma{1.0, 1.0};

  /// From raw decoder channels [logit p0, mu_cnt, mu_ba, s_cnt, s_ba].
  static ZmlnParams from_raw(const double* raw, std::size_t stride) {
    ZmlnParams p;
    p.p0 = detail::sigmoid_value(raw[0]);
    p.mu = {raw[stride], raw[2 * stride]};
    p.sigma = {detail::softplus_value(raw[3 * stride]) + kSigmaFloor,
               detail::softplus_value(raw[4 * stride]) + kSigmaFloor};
    return p;
  }
};

inline double lognormal_log_pdf(double x, double mu, double sigma) {
  const double lx = std::log(x);
  const double u = (lx - mu) / sigma;
  return -lx - std::log(sigma) - kHalfLog2Pi - 0.5 * u * u;
}

inline double zmln_log_prob(const ZmlnParams& p, double cnt, double ba) {
  check_nonnegative(cnt, ba);
  if (cnt == 0.0 && ba == 0.0) return std::log(p.p0);
  if (cnt > 0.0 && ba > 0.0) {
    return std::log1p(-p.p0) + lognormal_log_pdf(cnt, p.mu[0], p.sigma[0]) +
           lognormal_log_pdf(ba, p.mu[1], p.sigma[1]);
  }
  return kImpossibleLogProb;
}

/// P(V <= u) for each threshold u of the chosen variable.
inline std::array<double, kThresholdCount> zmln_cdf_at_thresholds(const ZmlnParams& p, const ThresholdSet& t,
                                                                  Variable v) {
  const auto i = static_cast<std::size_t>(v);
  std::array<double, kThresholdCount> out{};
  const auto& u = t.of(v);
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    const double pos = u[k] > 0.0 ? normal_cdf((std::log(u[k]) - p.mu[i]) / p.sigma[i]) : 0.0;
    out[k] = std::min(1.0, p.p0 + (1.0 - p.p0) * pos);
  }
  return out;
}

/// Bin edges for the binned model: (0,u1], (u1,u2], ..., (u27,u28] and an
/// overflow bin (u28, u28 + cap_factor*u28].
struct BinLayout {
  std::array<double, kThresholdCount> edges{};
  double cap_factor = 10.0;

  static BinLayout from(const std::array<double, kThresholdCount>& u, double cap_factor = 10.0) {
    if (!(u[0] > 0.0)) throw DataError("binned model needs a strictly positive first threshold");
    return BinLayout{u, cap_factor};
  }

  static constexpr std::size_t bins() { return kThresholdCount + 1; }

  std::size_t bin_of(double v) const {
    const auto it = std::lower_bound(edges.begin(), edges.end(), v);
    return static_cast<std::size_t>(it - edges.begin());
  }

  double width(std::size_t b) const {
    if (b == 0) return edges[0];
    if (b < kThresholdCount) return edges[b] - edges[b - 1];
    return cap_factor * edges[kThresholdCount - 1];
  }
};

/// One cell of the zero-modified binned model. Masses include the overflow
/// bin as the last entry and sum to one.
struct ZmbParams {
  double p0 = 0.5;
  std::array<double, BinLayout::bins()> cnt_mass{};
  std::array<double, BinLayout::bins()> ba_mass{};

  const std::array<double, BinLayout::bins()>& mass(Variable v) const {
    return v == Variable::cnt ? cnt_mass : ba_mass;
  }

  /// Softmax over 28 raw logits plus an implicit zero logit for overflow.
  static std::array<double, BinLayout::bins()> softmax_with_overflow(const double* logits, std::size_t stride) {
    std::array<double, BinLayout::bins()> m{};
    double mx = 0.0;
    for (std::size_t b = 0; b < kThresholdCount; ++b) mx = std::max(mx, logits[b * stride]);
    double s = 0.0;
    for (std::size_t b = 0; b < kThresholdCount; ++b) s += (m[b] = std::exp(logits[b * stride] - mx));
    s += (m[kThresholdCount] = std::exp(-mx));
    for (double& e : m) e /= s;
    return m;
  }

  static ZmbParams from_raw(const double* raw, std::size_t stride) {
    ZmbParams p;
    p.p0 = detail::sigmoid_value(raw[0]);
    p.cnt_mass = softmax_with_overflow(raw + stride, stride);
    p.ba_mass = softmax_with_overflow(raw + (1 + kThresholdCount) * stride, stride);
    return p;
  }
};

inline double zmb_log_prob(const ZmbParams& p, double cnt, double ba, const BinLayout& cnt_bins,
                           const BinLayout& ba_bins) {
  check_nonnegative(cnt, ba);
  if (cnt == 0.0 && ba == 0.0) return std::log(p.p0);
  if (cnt > 0.0 && ba > 0.0) {
    const std::size_t bc = cnt_bins.bin_of(cnt), bb = ba_bins.bin_of(ba);
    return std::log1p(-p.p0) + std::log(p.cnt_mass[bc]) - std::log(cnt_bins.width(bc)) +
           std::log(p.ba_mass[bb]) - std::log(ba_bins.width(bb));
  }
  return kImpossibleLogProb;
}

inline std::array<double, kThresholdCount> zmb_cdf_at_thresholds(const ZmbParams& p, Variable v) {
  std::array<double, kThresholdCount> out{};
  const auto& m = p.mass(v);
  double acc = 0.0;
  for (std::size_t k = 0; k < kThresholdCount; ++k) {
    acc += m[k];
    out[k] = std::min(1.0, p.p0 + (1.0 - p.p0) * acc);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid-level likelihood

/// Observed values of one batch laid out per sample and cell. Observation
/// flags already include the geography mask.
struct ObservationTargets {
  std::size_t samples = 0;
  std::size_t cells = 0;  // W * H
  std::vector<double> cnt, ba;
  std::vector<std::uint8_t> obs_cnt, obs_ba;
};

/// Per-item log-likelihood of the observed cells. `decoded` is
/// [B*K, P, W, H] raw decoder output where item n belongs to sample n / K.
/// Returns [B*K].
inline Tensor observation_log_lik(const Tensor& decoded, const ObservationTargets& tgt, std::size_t K,
                                  ObservationKind kind, const ThresholdSet& thresholds,
                                  double overflow_cap = 10.0) {
  const std::size_t P = observation_param_count(kind);
  if (decoded.dim() != 4 || decoded.shape()[1] != P || decoded.shape()[2] * decoded.shape()[3] != tgt.cells ||
      decoded.shape()[0] != tgt.samples * K) {
    throw ShapeError("observation_log_lik: decoded " + shape_str(decoded.shape()) + " does not match " +
                     std::to_string(tgt.samples) + " samples x K=" + std::to_string(K) + " over " +
                     std::to_string(tgt.cells) + " cells with " + std::to_string(P) + " params");
  }
  const std::size_t N = decoded.shape()[0], S = tgt.cells;
  std::vector<std::int32_t> bin_c, bin_b;
  std::array<double, BinLayout::bins()> logw_c{}, logw_b{};
  if (kind == ObservationKind::zmb) {
    const BinLayout lc = BinLayout::from(thresholds.cnt, overflow_cap);
    const BinLayout lb = BinLayout::from(thresholds.ba, overflow_cap);
    for (std::size_t b = 0; b < BinLayout::bins(); ++b) {
      logw_c[b] = std::log(lc.width(b));
      logw_b[b] = std::log(lb.width(b));
    }
    bin_c.resize(tgt.cnt.size());
    bin_b.resize(tgt.ba.size());
    for (std::size_t i = 0; i < tgt.cnt.size(); ++i) {
      bin_c[i] = static_cast<std::int32_t>(lc.bin_of(tgt.cnt[i]));
      bin_b[i] = static_cast<std::int32_t>(lb.bin_of(tgt.ba[i]));
    }
  }
  const bool tracked = detail::tracks({&decoded});
  Tensor out = detail::make_output({N}, tracked);
  // d(out)/d(decoded), filled only when tracked.
  std::vector<double> dlog;
  if (tracked) dlog.assign(decoded.numel(), 0.0);
  const double* raw = decoded.ptr();
  std::array<double, BinLayout::bins()> soft{};

  // Adds log f(v) of the positive part for variable `var` (0 = CNT, 1 = BA)
  // and its gradient with respect to the raw channels.
  auto positive_part = [&](const double* r, double* d, std::size_t var, double v, std::size_t cell_index) {
    if (kind == ObservationKind::zmln) {
      const double m = r[(1 + var) * S];
      const double s_raw = r[(3 + var) * S];
      const double sigma = detail::softplus_value(s_raw) + kSigmaFloor;
      const double lx = std::log(v);
      const double u = (lx - m) / sigma;
      if (d) {
        d[(1 + var) * S] += u / sigma;
        d[(3 + var) * S] += (-1.0 / sigma + u * u / sigma) * detail::sigmoid_value(s_raw);
      }
      return -lx - std::log(sigma) - kHalfLog2Pi - 0.5 * u * u;
    }
    const std::size_t off = 1 + var * kThresholdCount;
    const std::int32_t b = var == 0 ? bin_c[cell_index] : bin_b[cell_index];
    double mx = 0.0;
    for (std::size_t j = 0; j < kThresholdCount; ++j) mx = std::max(mx, r[(off + j) * S]);
    double z = std::exp(-mx);
    for (std::size_t j = 0; j < kThresholdCount; ++j) z += (soft[j] = std::exp(r[(off + j) * S] - mx));
    const double lse = mx + std::log(z);
    const double logit_b = b < static_cast<std::int32_t>(kThresholdCount) ? r[(off + static_cast<std::size_t>(b)) * S] : 0.0;
    if (d) {
      for (std::size_t j = 0; j < kThresholdCount; ++j) {
        d[(off + j) * S] += (static_cast<std::int32_t>(j) == b ? 1.0 : 0.0) - soft[j] / z;
      }
    }
    const double logw = var == 0 ? logw_c[static_cast<std::size_t>(b)] : logw_b[static_cast<std::size_t>(b)];
    return logit_b - lse - logw;
  };

  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t sample = n / K;
    double total = 0.0;
    for (std::size_t cell = 0; cell < S; ++cell) {
      const std::size_t idx = sample * S + cell;
      const bool oc = tgt.obs_cnt[idx] != 0, ob = tgt.obs_ba[idx] != 0;
      if (!oc && !ob) continue;
      const double* r = raw + n * P * S + cell;
      double* d = tracked ? dlog.data() + n * P * S + cell : nullptr;
      const double c = tgt.cnt[idx], b = tgt.ba[idx];
      const bool zero_c = c == 0.0, zero_b = b == 0.0;
      const bool all_zero = (!oc || zero_c) && (!ob || zero_b);
      const bool all_pos = (!oc || !zero_c) && (!ob || !zero_b);
      if (all_zero) {
        total += -detail::softplus_value(-r[0]);  // log p0
        if (d) d[0] += 1.0 - detail::sigmoid_value(r[0]);
      } else if (all_pos) {
        total += -detail::softplus_value(r[0]);  // log(1 - p0)
        if (d) d[0] += -detail::sigmoid_value(r[0]);
        if (oc) total += positive_part(r, d, 0, c, idx);
        if (ob) total += positive_part(r, d, 1, b, idx);
      } else {
        total += kImpossibleLogProb;
      }
    }
    out.ptr()[n] = total;
  }
  if (tracked) {
    Tape::current().record([di = decoded.impl(), oi = out.impl(), dlog = std::move(dlog), N, P, S] {
      if (oi->grad.empty() || !di->requires_grad) return;
      double* g = di->grad_data();
      for (std::size_t n = 0; n < N; ++n) {
        const double go = oi->grad[n];
        for (std::size_t i = 0; i < P * S; ++i) g[n * P * S + i] += go * dlog[n * P * S + i];
      }
    });
  }
  return out;
}

/// CDF of one variable at the thresholds for one cell of a decoded item.
/// `raw` points at channel 0 of the cell; channels are `stride` apart.
inline std::array<double, kThresholdCount> cell_cdf(ObservationKind kind, const double* raw, std::size_t stride,
                                                    const ThresholdSet& t, Variable v) {
  if (kind == ObservationKind::zmln) return zmln_cdf_at_thresholds(ZmlnParams::from_raw(raw, stride), t, v);
  return zmb_cdf_at_thresholds(ZmbParams::from_raw(raw, stride), v);
}

}  // namespace cmiwae
