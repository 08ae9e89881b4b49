// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmiwae/dataset.hpp"
#include "cmiwae/distributions.hpp"
#include "cmiwae/grid_format.hpp"
#include "cmiwae/networks.hpp"
#include "cmiwae/objective.hpp"

namespace cmiwae {

using Json = nlohmann::json;

inline Json architecture_to_json(const Architecture& a) {
  return Json{{"n_layers", a.n_layers},
              {"latent", a.latent},
              {"kernel", a.kernel},
              {"grid_w", a.grid_w},
              {"grid_h", a.grid_h},
              {"x_channels", a.x_channels},
              {"c_channels", a.c_channels},
              {"encoder_widths", a.encoder_widths},
              {"aux_widths", a.aux_widths},
              {"decoder_widths", a.decoder_widths},
              {"skip_widths", a.skip_widths},
              {"observation", observation_name(a.observation)},
              {"fittable_prior", a.fittable_prior},
              {"skips", a.skips},
              {"dropout", a.dropout}};
}

inline Architecture architecture_from_json(const Json& j) {
  Architecture a;
  try {
    a.n_layers = j.at("n_layers").get<std::size_t>();
    a.latent = j.at("latent").get<std::size_t>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.grid_w = j.at("grid_w").get<std::size_t>();
    a.grid_h = j.at("grid_h").get<std::size_t>();
    a.x_channels = j.at("x_channels").get<std::size_t>();
    a.c_channels = j.at("c_channels").get<std::size_t>();
    a.encoder_widths = j.at("encoder_widths").get<std::vector<std::size_t>>();
    a.aux_widths = j.at("aux_widths").get<std::vector<std::size_t>>();
    a.decoder_widths = j.at("decoder_widths").get<std::vector<std::size_t>>();
    a.skip_widths = j.at("skip_widths").get<std::vector<std::size_t>>();
    a.observation = parse_observation(j.at("observation").get<std::string>());
    a.fittable_prior = j.at("fittable_prior").get<bool>();
    a.skips = j.at("skips").get<bool>();
    a.dropout = j.at("dropout").get<double>();
  } catch (const Json::exception& e) {
    throw DataError(std::string("architecture descriptor: ") + e.what());
  }
  a.validate();
  return a;
}

/// Divisors applied to the raw CNT and BA input channels.
struct InputScale {
  double cnt = 1.0;
  double ba = 1.0;
};

/// Encoder, auxiliary encoder, decoder and month embedding, together with
/// the thresholds and input normalization the model was trained with.
class CmiwaeModel {
 public:
  using Batch = GridBatch;

  struct Context {
    DiagGaussian prior;                 // [B, d]
    std::vector<Tensor> intermediates;  // auxiliary encoder outputs
  };

  Architecture arch;
  ThresholdSet thresholds;
  EncoderNet encoder;
  AuxEncoderNet aux_encoder;
  DecoderNet decoder;
  Tensor embedding;  // [7, 3]
  InputScale x_scale;
  ChannelStats c_stats;

  CmiwaeModel(const Architecture& a, const ThresholdSet& U, std::uint64_t seed) : arch(a), thresholds(U) {
    arch.validate();
    if (arch.x_channels != kXChannels || arch.c_channels != kCChannels) {
      throw Error("model: the grid schema has 4 data and 37 auxiliary channels");
    }
    U.validate();
    Rng rng = make_rng(seed, {0x1417});
    encoder = EncoderNet(arch, rng);
    if (arch.uses_aux()) aux_encoder = AuxEncoderNet(arch, rng);
    decoder = DecoderNet(arch, rng);
    embedding = uniform_init({kMonthsPerYear, kEmbedCount}, 1, rng);
  }

  std::size_t latent() const { return arch.latent; }
  std::size_t param_count_per_cell() const { return observation_param_count(arch.observation); }

  /// Auxiliary channels with the month embedding written into its slots.
  Tensor aux_input(const Batch& b) const {
    const std::size_t B = b.size();
    const Tensor rows = reshape(gather_rows(embedding, b.months), {B, kEmbedCount, 1, 1});
    const Tensor grid = rows * Tensor::full({b.W, b.H}, 1.0);
    return concat({slice(b.c, 1, 0, kEmbedFirst), grid, slice(b.c, 1, kEmbedFirst + kEmbedCount, kCChannels)}, 1);
  }

  /// Zero-imputed data channels, raw CNT and BA divided by their scales.
  Tensor data_input(const Batch& b) const {
    Tensor x = impute_zero(b.x, b.mask_cnt, b.mask_ba);
    const std::size_t S = b.W * b.H;
    for (std::size_t i = 0; i < b.size(); ++i) {
      double* p = x.ptr() + i * kXChannels * S;
      for (std::size_t s = 0; s < S; ++s) {
        p[s] /= x_scale.cnt;
        p[S + s] /= x_scale.ba;
      }
    }
    return x;
  }

  DiagGaussian posterior(const Batch& b, const ForwardMode& mode) {
    return encoder.forward(concat({data_input(b), aux_input(b)}, 1), mode);
  }

  Context condition(const Batch& b, const ForwardMode& mode) {
    Context ctx;
    if (arch.uses_aux()) {
      AuxOutput out = aux_encoder.forward(aux_input(b), mode);
      if (arch.skips) ctx.intermediates = std::move(out.intermediates);
      if (out.prior) ctx.prior = *out.prior;
    }
    if (!arch.fittable_prior) ctx.prior = DiagGaussian::standard({b.size(), arch.latent});
    return ctx;
  }

  Tensor decode(const Batch&, const Context& ctx, const Tensor& z, const ForwardMode& mode) {
    return decoder.forward(z, ctx.intermediates, mode);
  }

  Tensor log_lik(const Batch& b, const Tensor& decoded, std::size_t K) const {
    const Tensor ll = observation_log_lik(decoded, b.targets, K, arch.observation, thresholds);
    return reshape(ll, {b.size(), K});
  }

  /// CDF of one variable at the thresholds for one cell of decoded item n.
  std::array<double, kThresholdCount> cdf(const Tensor& decoded, std::size_t n, std::size_t cell, Variable v) const {
    const std::size_t P = param_count_per_cell(), S = arch.grid_w * arch.grid_h;
    return cell_cdf(arch.observation, decoded.ptr() + n * P * S + cell, S, thresholds, v);
  }

  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> p, b;
    collect(p, b);
    return p;
  }

  std::vector<NamedTensor> buffers() const {
    std::vector<NamedTensor> p, b;
    collect(p, b);
    return b;
  }

  /// Parameters, buffers and normalization state under stable names.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> p, b;
    collect(p, b);
    p.insert(p.end(), b.begin(), b.end());
    p.push_back({"input.c_mean", Tensor::from({kCChannels}, c_stats.mean), false});
    p.push_back({"input.c_std", Tensor::from({kCChannels}, c_stats.stdev), false});
    p.push_back({"input.x_scale", Tensor::from({2}, {x_scale.cnt, x_scale.ba}), false});
    p.push_back({"thresholds.cnt", Tensor::from({kThresholdCount}, {thresholds.cnt.begin(), thresholds.cnt.end()}), false});
    p.push_back({"thresholds.ba", Tensor::from({kThresholdCount}, {thresholds.ba.begin(), thresholds.ba.end()}), false});
    return p;
  }

  /// Overwrites the values named in `values`; every state entry must be
  /// present with the right shape.
  void load_state(const std::map<std::string, Tensor>& values) {
    for (auto& nt : state()) {
      const auto it = values.find(nt.name);
      if (it == values.end()) throw DataError("checkpoint lacks tensor '" + nt.name + "'");
      if (it->second.shape() != nt.value.shape()) {
        throw DataError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(nt.value.shape()));
      }
      std::copy(it->second.values().begin(), it->second.values().end(), nt.value.values().begin());
    }
    const auto get = [&](const std::string& n) { return values.at(n).values(); };
    std::copy(get("input.c_mean").begin(), get("input.c_mean").end(), c_stats.mean.begin());
    std::copy(get("input.c_std").begin(), get("input.c_std").end(), c_stats.stdev.begin());
    x_scale = {get("input.x_scale")[0], get("input.x_scale")[1]};
    std::copy(get("thresholds.cnt").begin(), get("thresholds.cnt").end(), thresholds.cnt.begin());
    std::copy(get("thresholds.ba").begin(), get("thresholds.ba").end(), thresholds.ba.begin());
    thresholds.validate();
  }

 private:
  void collect(std::vector<NamedTensor>& p, std::vector<NamedTensor>& b) const {
    encoder.collect("encoder", p, b);
    if (arch.uses_aux()) aux_encoder.collect("aux", p, b);
    decoder.collect("decoder", p, b);
    p.push_back({"month_embedding", embedding, false});
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

/// Little-endian container: "CMK1", u32 version, length-prefixed JSON
/// architecture, u32 tensor count, then per tensor a length-prefixed name,
/// u32 rank, u64 extents and f64 values, and finally length-prefixed JSON
/// metadata.
struct Checkpoint {
  Architecture arch;
  std::vector<NamedTensor> tensors;
  Json metadata = Json::object();
};

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string take_string(std::istream& in, const std::string& what) {
  const auto n = take<std::uint32_t>(in, what);
  if (n > (1u << 28)) throw DataError(what + ": implausible string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw DataError(what + ": truncated file");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write(detail::kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, detail::kCheckpointVersion);
  detail::put_string(out, architecture_to_json(ck.arch).dump());
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& nt : ck.tensors) {
    detail::put_string(out, nt.name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.value.dim()));
    for (std::size_t e : nt.value.shape()) detail::put<std::uint64_t>(out, e);
    out.write(reinterpret_cast<const char*>(nt.value.ptr()), static_cast<std::streamsize>(nt.value.numel() * 8));
  }
  detail::put_string(out, ck.metadata.dump());
  if (!out) throw DataError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in, const std::string& what = "checkpoint") {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, detail::kCheckpointMagic, 4) != 0) {
    throw DataError(what + ": bad magic (not a CMK1 checkpoint)");
  }
  const auto version = detail::take<std::uint32_t>(in, what);
  if (version != detail::kCheckpointVersion) throw DataError(what + ": unsupported version " + std::to_string(version));
  Checkpoint ck;
  try {
    ck.arch = architecture_from_json(Json::parse(detail::take_string(in, what)));
  } catch (const Json::exception& e) {
    throw DataError(what + ": bad architecture JSON: " + e.what());
  }
  const auto count = detail::take<std::uint32_t>(in, what);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = detail::take_string(in, what);
    const auto rank = detail::take<std::uint32_t>(in, what);
    if (rank > 8) throw DataError(what + ": implausible tensor rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::take<std::uint64_t>(in, what));
    const std::size_t n = shape_numel(shape);
    if (n > (std::size_t{1} << 32)) throw DataError(what + ": implausible tensor size");
    std::vector<double> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8))) {
      throw DataError(what + ": truncated tensor '" + nt.name + "'");
    }
    nt.value = Tensor::from(shape, std::move(v));
    ck.tensors.push_back(std::move(nt));
  }
  try {
    ck.metadata = Json::parse(detail::take_string(in, what));
  } catch (const Json::exception& e) {
    throw DataError(what + ": bad metadata JSON: " + e.what());
  }
  return ck;
}

inline Checkpoint make_checkpoint(const CmiwaeModel& m, Json metadata = Json::object()) {
  Checkpoint ck;
  ck.arch = m.arch;
  for (const auto& nt : m.state()) ck.tensors.push_back({nt.name, nt.value.clone(), nt.decay});
  ck.metadata = std::move(metadata);
  return ck;
}

inline CmiwaeModel model_from_checkpoint(const Checkpoint& ck) {
  std::map<std::string, Tensor> values;
  ThresholdSet U;
  for (const auto& nt : ck.tensors) values[nt.name] = nt.value;
  for (const char* n : {"thresholds.cnt", "thresholds.ba"}) {
    if (!values.count(n) || values.at(n).numel() != kThresholdCount) throw DataError(std::string("checkpoint lacks ") + n);
  }
  std::copy(values.at("thresholds.cnt").values().begin(), values.at("thresholds.cnt").values().end(), U.cnt.begin());
  std::copy(values.at("thresholds.ba").values().begin(), values.at("thresholds.ba").values().end(), U.ba.begin());
  CmiwaeModel m(ck.arch, U, 0);
  m.load_state(values);
  return m;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot create " + path);
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return read_checkpoint(in, path);
}

}  // namespace cmiwae
