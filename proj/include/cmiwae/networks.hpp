// Copyright 2026 The cmiwae Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cmiwae/distributions.hpp"
#include "cmiwae/layers.hpp"

namespace cmiwae {

/// Shape of the three networks. Widths have n_layers - 1 entries: one per
/// convolution in the encoders and one per decoder stage.
struct Architecture {
  std::size_t n_layers = 4;
  std::size_t latent = 8;
  std::size_t kernel = 5;
  std::size_t grid_w = 32;
  std::size_t grid_h = 16;
  std::size_t x_channels = 4;
  std::size_t c_channels = 37;
  std::vector<std::size_t> encoder_widths{16, 16, 16};
  std::vector<std::size_t> aux_widths{8, 8, 8};
  std::vector<std::size_t> decoder_widths{8, 8, 4};
  std::vector<std::size_t> skip_widths{8, 8, 4};
  ObservationKind observation = ObservationKind::zmln;
  bool fittable_prior = true;
  bool skips = true;
  double dropout = 0.10;

  std::size_t stages() const { return n_layers - 1; }
  std::size_t downsample() const { return std::size_t{1} << (n_layers - 2); }
  std::size_t coarse_w() const { return grid_w / downsample(); }
  std::size_t coarse_h() const { return grid_h / downsample(); }
  /// The auxiliary encoder runs only if something consumes its output.
  bool uses_aux() const { return fittable_prior || skips; }

  void validate() const {
    if (n_layers < 2) throw Error("architecture: n_layers must be at least 2");
    if (latent == 0) throw Error("architecture: latent dimension must be positive");
    if (kernel % 2 == 0) throw Error("architecture: kernel size must be odd");
    for (const auto* w : {&encoder_widths, &aux_widths, &decoder_widths, &skip_widths}) {
      if (w->size() != stages()) {
        throw Error("architecture: expected " + std::to_string(stages()) + " widths per network, got " +
                    std::to_string(w->size()));
      }
    }
    if (grid_w == 0 || grid_h == 0 || grid_w % downsample() != 0 || grid_h % downsample() != 0) {
      throw Error("architecture: grid " + std::to_string(grid_w) + "x" + std::to_string(grid_h) +
                  " not divisible by " + std::to_string(downsample()));
    }
    for (std::size_t s = 0; s < stages(); ++s) {
      if (skip_widths[s] > aux_widths[stages() - 1 - s]) {
        throw Error("architecture: decoder stage " + std::to_string(s) + " takes " + std::to_string(skip_widths[s]) +
                    " skip channels but the auxiliary layer has " + std::to_string(aux_widths[stages() - 1 - s]));
      }
    }
    if (dropout < 0.0 || dropout >= 1.0) throw Error("architecture: dropout must lie in [0, 1)");
  }
};

/// dropout -> conv -> norm -> softplus, repeated. The first convolution keeps
/// the grid size, every later one halves it.
struct ConvStack {
  std::vector<ConvLayer> convs;
  std::vector<NormLayer> norms;
  DropoutLayer drop;

  ConvStack() = default;
  ConvStack(std::size_t in_channels, const std::vector<std::size_t>& widths, std::size_t kernel, double p, Rng& rng)
      : drop{p} {
    std::size_t in = in_channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      convs.emplace_back(in, widths[i], kernel, i == 0 ? 1 : 2, false, rng);
      norms.emplace_back(widths[i]);
      in = widths[i];
    }
  }

  Tensor forward(Tensor h, const ForwardMode& mode, std::vector<Tensor>* intermediates = nullptr) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      h = softplus(norms[i].forward(convs[i].forward(drop.forward(h, mode)), mode));
      if (intermediates) intermediates->push_back(h);
    }
    return h;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers) const {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      convs[i].collect(prefix + ".conv" + std::to_string(i), params);
      norms[i].collect(prefix + ".norm" + std::to_string(i), params, buffers);
    }
  }
};

inline Tensor flatten_batch(const Tensor& h) { return reshape(h, {h.shape()[0], h.numel() / h.shape()[0]}); }

/// Splits a [B, 2d] head output into mean and softplus scale.
inline DiagGaussian gaussian_head(const Tensor& out, std::size_t d) {
  return {slice(out, 1, 0, d), softplus(slice(out, 1, d, 2 * d))};
}

/// Variational encoder: (imputed x, c) -> q(z | x_o, c).
struct EncoderNet {
  ConvStack stack;
  LinearLayer head;
  std::size_t latent = 0;

  EncoderNet() = default;
  EncoderNet(const Architecture& a, Rng& rng)
      : stack(a.x_channels + a.c_channels, a.encoder_widths, a.kernel, a.dropout, rng),
        head(a.encoder_widths.back() * a.coarse_w() * a.coarse_h(), 2 * a.latent, rng),
        latent(a.latent) {}

  /// input is [B, x_channels + c_channels, W, H]; returns [B, d] parameters.
  DiagGaussian forward(const Tensor& input, const ForwardMode& mode) {
    const Tensor h = stack.forward(input, mode);
    return gaussian_head(head.forward(stack.drop.forward(flatten_batch(h), mode)), latent);
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers) const {
    stack.collect(prefix, params, buffers);
    head.collect(prefix + ".head", params);
  }
};

struct AuxOutput {
  std::optional<DiagGaussian> prior;  // absent when the prior is fixed
  std::vector<Tensor> intermediates;  // after each convolution, finest first
};

/// Auxiliary encoder: c -> conditional prior p(z | c) and skip tensors.
struct AuxEncoderNet {
  ConvStack stack;
  std::optional<LinearLayer> head;
  std::size_t latent = 0;

  AuxEncoderNet() = default;
  AuxEncoderNet(const Architecture& a, Rng& rng)
      : stack(a.c_channels, a.aux_widths, a.kernel, a.dropout, rng), latent(a.latent) {
    if (a.fittable_prior) head.emplace(a.aux_widths.back() * a.coarse_w() * a.coarse_h(), 2 * a.latent, rng);
  }

  AuxOutput forward(const Tensor& c, const ForwardMode& mode) {
    AuxOutput out;
    const Tensor h = stack.forward(c, mode, &out.intermediates);
    if (head) out.prior = gaussian_head(head->forward(stack.drop.forward(flatten_batch(h), mode)), latent);
    return out;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers) const {
    stack.collect(prefix, params, buffers);
    if (head) head->collect(prefix + ".head", params);
  }
};

/// One decoder stage: a transposed convolution over the concatenation of
/// the running tensor and skip channels. The kernel is stored split by
/// input block, so the skip block can be applied once per data sample and
/// shared by all K latent draws.
struct DecoderStage {
  ConvLayer main;
  Tensor skip_kernel;  // [skip_channels, out, k, k]; no bias
  std::size_t skip_channels = 0;
  std::optional<NormLayer> norm;  // absent on the output stage
};

/// Decoder: z [B, K, d] plus auxiliary intermediates -> raw observation
/// parameters [B*K, P, W, H].
struct DecoderNet {
  DropoutLayer drop;
  LinearLayer fc;
  NormLayer fc_norm;
  std::size_t c0 = 0, w0 = 0, h0 = 0;
  std::vector<DecoderStage> stages;

  DecoderNet() = default;
  DecoderNet(const Architecture& a, Rng& rng)
      : drop{a.dropout},
        fc(a.latent, a.decoder_widths[0] * a.coarse_w() * a.coarse_h(), rng),
        fc_norm(a.decoder_widths[0]),
        c0(a.decoder_widths[0]),
        w0(a.coarse_w()),
        h0(a.coarse_h()) {
    const std::size_t n = a.stages();
    for (std::size_t s = 0; s < n; ++s) {
      const bool last = s + 1 == n;
      const std::size_t in = a.decoder_widths[s];
      const std::size_t skip = a.skips ? a.skip_widths[s] : 0;
      const std::size_t out = last ? observation_param_count(a.observation) : a.decoder_widths[s + 1];
      const std::size_t k = a.kernel;
      DecoderStage st;
      st.main = ConvLayer(in, out, k, last ? 1 : 2, true, rng);
      st.skip_channels = skip;
      if (skip > 0) {
        // Same bound as a single kernel over the concatenated input.
        const std::size_t fan_in = (in + skip) * k * k;
        st.main.kernel = uniform_init({in, out, k, k}, fan_in, rng);
        st.skip_kernel = uniform_init({skip, out, k, k}, fan_in, rng);
      }
      if (!last) st.norm.emplace(out);
      stages.push_back(std::move(st));
    }
  }

  Tensor forward(const Tensor& z, const std::vector<Tensor>& intermediates, const ForwardMode& mode) {
    if (z.dim() != 3) throw ShapeError("decoder expects z as [B, K, d], got " + shape_str(z.shape()));
    const std::size_t B = z.shape()[0], K = z.shape()[1], d = z.shape()[2];
    Tensor h = fc.forward(drop.forward(reshape(z, {B * K, d}), mode));
    h = softplus(fc_norm.forward(reshape(h, {B * K, c0, w0, h0}), mode));
    for (std::size_t s = 0; s < stages.size(); ++s) {
      DecoderStage& st = stages[s];
      Tensor out = st.main.forward(drop.forward(h, mode));
      if (st.skip_channels > 0) {
        const std::size_t src = intermediates.size() - 1 - s;
        if (src >= intermediates.size()) throw ShapeError("decoder: missing auxiliary intermediate");
        const Tensor& aux = intermediates[src];
        if (aux.shape()[0] != B || aux.shape()[2] != h.shape()[2] || aux.shape()[3] != h.shape()[3]) {
          throw ShapeError("decoder stage " + std::to_string(s) + ": skip tensor " + shape_str(aux.shape()) +
                           " does not match " + shape_str(h.shape()));
        }
        const Tensor skip_in = drop.forward(slice(aux, 1, 0, st.skip_channels), mode);
        const std::size_t pad = st.main.kernel_size() / 2;
        const Tensor skip_out =
            conv_transpose2d(skip_in, st.skip_kernel, std::nullopt, st.main.stride, pad, st.main.stride - 1);
        Shape per_draw = out.shape();
        per_draw[0] = K;
        per_draw.insert(per_draw.begin(), B);
        Shape shared = per_draw;
        shared[1] = 1;
        out = reshape(reshape(out, per_draw) + reshape(skip_out, shared), out.shape());
      }
      h = st.norm ? softplus(st.norm->forward(out, mode)) : out;
    }
    return h;
  }

  void collect(const std::string& prefix, std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers) const {
    fc.collect(prefix + ".fc", params);
    fc_norm.collect(prefix + ".fc_norm", params, buffers);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const std::string p = prefix + ".stage" + std::to_string(s);
      stages[s].main.collect(p, params);
      if (stages[s].skip_channels > 0) params.push_back({p + ".skip_kernel", stages[s].skip_kernel, true});
      if (stages[s].norm) stages[s].norm->collect(p + ".norm", params, buffers);
    }
  }
};

}  // namespace cmiwae
