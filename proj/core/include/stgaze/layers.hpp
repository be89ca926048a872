#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stgaze/params.hpp"
#include "stgaze/tape.hpp"

namespace stgaze {

// Weight layout is (in x out); forward is y = x W + b on row vectors.
template <typename S>
struct Linear {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  Linear() = default;
  Linear(ParameterStore<S>& store, const std::string& prefix, int in, int out,
         bool with_bias = true) {
    weight = &store.create(prefix + ".weight", {in, out}, Init::kFanIn, in);
    if (with_bias) bias = &store.create(prefix + ".bias", {out}, Init::kFanIn, in);
  }

  Var forward(Tape<S>& tape, Var x) const {
    Var y = tape.matmul(x, tape.param(*weight));
    if (bias != nullptr) y = tape.bias_add(y, tape.param(*bias));
    return y;
  }
};

// One encoder stage: 3x3 conv, stride 2, zero padding 1, bias, swish.
template <typename S>
struct ConvStage {
  Parameter<S>* weight = nullptr;
  Parameter<S>* bias = nullptr;

  ConvStage() = default;
  ConvStage(ParameterStore<S>& store, const std::string& prefix, int c_in, int c_out) {
    weight = &store.create(prefix + ".weight", {c_out, c_in, 3, 3}, Init::kFanIn, c_in * 9);
    bias = &store.create(prefix + ".bias", {c_out}, Init::kFanIn, c_in * 9);
  }

  Var forward(Tape<S>& tape, Var x) const {
    return tape.swish(tape.conv2d(x, tape.param(*weight), tape.param(*bias), 2, 1, 1));
  }
};

// ---- ECA channel attention --------------------------------------------------

struct EcaConfig {
  int channels = 160;
  int kernel_size = 0;  // 0 = derive from the channel count
};

// Kernel size for a given channel count: the odd integer nearest to
// log2(C)/2 + 1/2. A tie (the value landing exactly on an even integer)
// rounds to the larger odd; result is at least 1.
inline int eca_kernel_size(int channels) {
  if (channels < 1) throw std::invalid_argument("eca_kernel_size: channels must be >= 1");
  const double t = std::log2(static_cast<double>(channels)) / 2.0 + 0.5;
  int lower = static_cast<int>(std::floor(t));
  if (lower % 2 == 0) --lower;  // largest odd <= t (may go below 1; clamped below)
  const int upper = lower + 2;
  const double d_low = t - lower;
  const double d_high = upper - t;
  int k = d_high <= d_low ? upper : lower;
  return std::max(1, k);
}

// Channel gate: global average pool, 1-D conv across the channel axis
// (expressed as a 1 x k conv2d, no bias), sigmoid, then per-channel scaling.
// The gate lies in (0, 1), so activations never change sign or grow.
template <typename S>
struct Eca {
  Parameter<S>* kernel = nullptr;
  int kernel_width = 0;

  Eca() = default;
  Eca(ParameterStore<S>& store, const std::string& prefix, const EcaConfig& cfg) {
    kernel_width = cfg.kernel_size > 0 ? cfg.kernel_size : eca_kernel_size(cfg.channels);
    if (kernel_width % 2 == 0) throw std::invalid_argument("eca: kernel size must be odd");
    kernel =
        &store.create(prefix + ".kernel", {1, 1, 1, kernel_width}, Init::kFanIn, kernel_width);
  }

  Var forward(Tape<S>& tape, Var x) const {
    // Copy: growing the tape may reallocate node storage.
    const int channels = tape.value(x).dim(0);
    Var pooled = tape.mean_axis(tape.mean_axis(x, 2), 1);  // (C)
    Var row = tape.reshape(pooled, {1, 1, channels});
    Var conv = tape.conv2d(row, tape.param(*kernel), Var{}, 1, 0, (kernel_width - 1) / 2);
    Var gate = tape.sigmoid(tape.reshape(conv, {channels}));
    return tape.scale_channels(x, gate);
  }
};

// ---- self-attention ----------------------------------------------------------

struct SamConfig {
  int seq_len = 64;
  int dim = 160;
  int num_blocks = 3;
  int num_heads = 8;
  int ffn_hidden = 0;  // 0 = 4 * dim

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * dim; }
};

template <typename S>
struct Mhsa {
  Linear<S> q, k, v, o;
  int heads = 1;
  int dim = 0;

  Mhsa() = default;
  Mhsa(ParameterStore<S>& store, const std::string& prefix, int d, int num_heads)
      : heads(num_heads), dim(d) {
    if (num_heads < 1 || d % num_heads != 0) {
      throw std::invalid_argument("mhsa: dim " + std::to_string(d) +
                                  " not divisible by heads " + std::to_string(num_heads));
    }
    q = Linear<S>(store, prefix + ".q", d, d);
    k = Linear<S>(store, prefix + ".k", d, d);
    v = Linear<S>(store, prefix + ".v", d, d);
    o = Linear<S>(store, prefix + ".o", d, d);
  }

  // y: (S x D). Scaled dot-product attention per head with scale
  // 1/sqrt(D/H); optionally exposes the (S x S) attention matrices.
  Var forward(Tape<S>& tape, Var y, std::vector<Var>* attention = nullptr) const {
    const int head_dim = dim / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Var qm = q.forward(tape, y);
    Var km = k.forward(tape, y);
    Var vm = v.forward(tape, y);
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const int b = h * head_dim, e = (h + 1) * head_dim;
      Var qh = tape.slice_cols(qm, b, e);
      Var kh = tape.slice_cols(km, b, e);
      Var vh = tape.slice_cols(vm, b, e);
      Var weights = tape.softmax(tape.scale(tape.matmul_nt(qh, kh), scale));
      if (attention != nullptr) attention->push_back(weights);
      head_outs.push_back(tape.matmul(weights, vh));
    }
    Var merged = heads == 1 ? head_outs[0] : tape.concat(head_outs, 1);
    return o.forward(tape, merged);
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterStore<S>& store, const std::string& prefix, int d) {
    gamma = &store.create(prefix + ".gamma", {d}, Init::kZero);
    gamma->value.fill(S(1));
    beta = &store.create(prefix + ".beta", {d}, Init::kZero);
  }

  Var forward(Tape<S>& tape, Var x) const {
    return tape.layer_norm(x, tape.param(*gamma), tape.param(*beta), eps);
  }
};

// Pre-norm residual block: y1 = y + MHSA(LN(y)); y2 = y1 + FFN(LN(y1)) with a
// swish FFN. All-zero weights make it the identity map.
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln1, ln2;
  Mhsa<S> attn;
  Linear<S> ffn_in, ffn_out;

  TransformerBlock() = default;
  TransformerBlock(ParameterStore<S>& store, const std::string& prefix, const SamConfig& cfg) {
    ln1 = LayerNorm<S>(store, prefix + ".ln1", cfg.dim);
    ln2 = LayerNorm<S>(store, prefix + ".ln2", cfg.dim);
    attn = Mhsa<S>(store, prefix + ".attn", cfg.dim, cfg.num_heads);
    ffn_in = Linear<S>(store, prefix + ".ffn_in", cfg.dim, cfg.ffn());
    ffn_out = Linear<S>(store, prefix + ".ffn_out", cfg.ffn(), cfg.dim);
  }

  Var forward(Tape<S>& tape, Var y) const {
    Var y1 = tape.add(y, attn.forward(tape, ln1.forward(tape, y)));
    Var h = tape.swish(ffn_in.forward(tape, ln2.forward(tape, y1)));
    return tape.add(y1, ffn_out.forward(tape, h));
  }
};

// ---- GRU ----------------------------------------------------------------------

struct GruStackConfig {
  int input_dim = 160;
  int hidden_dim = 160;
  int num_layers = 2;
};

// Stacked GRU. Gate layout in the fused matrices is [reset | update | new].
// Cell convention (reset applied inside the candidate):
//   r = sigmoid(W_r x + U_r h + b_ir + b_hr)
//   z = sigmoid(W_z x + U_z h + b_iz + b_hz)
//   n = tanh(W_n x + b_in + r . (U_n h + b_hn))
//   h' = (1 - z) . n + z . h
// Layer l+1 consumes layer l's per-position outputs.
template <typename S>
struct GruStack {
  struct LayerParams {
    Parameter<S>* w_ih = nullptr;  // (D_in x 3H)
    Parameter<S>* w_hh = nullptr;  // (H x 3H)
    Parameter<S>* b_ih = nullptr;  // (3H)
    Parameter<S>* b_hh = nullptr;  // (3H)
  };

  std::vector<LayerParams> layers;
  int hidden = 0;

  GruStack() = default;
  GruStack(ParameterStore<S>& store, const std::string& prefix, const GruStackConfig& cfg)
      : hidden(cfg.hidden_dim) {
    layers.reserve(static_cast<std::size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
      const int in = l == 0 ? cfg.input_dim : cfg.hidden_dim;
      const std::string base = prefix + ".layer" + std::to_string(l);
      LayerParams p;
      p.w_ih = &store.create(base + ".w_ih", {in, 3 * hidden}, Init::kFanIn, in);
      p.w_hh = &store.create(base + ".w_hh", {hidden, 3 * hidden}, Init::kFanIn, hidden);
      p.b_ih = &store.create(base + ".b_ih", {3 * hidden}, Init::kFanIn, in);
      p.b_hh = &store.create(base + ".b_hh", {3 * hidden}, Init::kFanIn, hidden);
      layers.push_back(p);
    }
  }

  int num_layers() const { return static_cast<int>(layers.size()); }

  // One cell update for layer `l`: x (1 x D_in), h (1 x H) -> h' (1 x H).
  Var step(Tape<S>& tape, Var x, Var h, int l) const {
    const auto& p = layers[static_cast<std::size_t>(l)];
    const int hd = hidden;
    Var gx = tape.bias_add(tape.matmul(x, tape.param(*p.w_ih)), tape.param(*p.b_ih));
    Var gh = tape.bias_add(tape.matmul(h, tape.param(*p.w_hh)), tape.param(*p.b_hh));
    Var r = tape.sigmoid(tape.add(tape.slice_cols(gx, 0, hd), tape.slice_cols(gh, 0, hd)));
    Var z = tape.sigmoid(
        tape.add(tape.slice_cols(gx, hd, 2 * hd), tape.slice_cols(gh, hd, 2 * hd)));
    Var n = tape.tanh(tape.add(tape.slice_cols(gx, 2 * hd, 3 * hd),
                               tape.mul(r, tape.slice_cols(gh, 2 * hd, 3 * hd))));
    return tape.add(tape.mul(tape.rsub_scalar(z, 1.0), n), tape.mul(z, h));
  }

  // Scans `seq` (N x D_in) from state h0 (L x H). Returns the top layer's
  // outputs (N x H) and the final state (L x H). Feeding the returned state
  // back in resumes the scan exactly where it stopped.
  std::pair<Var, Var> scan(Tape<S>& tape, Var seq, Var h0) const {
    const int n = tape.value(seq).dim(0);
    const int l_count = num_layers();
    if (tape.value(h0).dim(0) != l_count || tape.value(h0).dim(1) != hidden) {
      throw std::invalid_argument("gru: state must be (layers x hidden)");
    }
    Var layer_in = seq;
    std::vector<Var> finals;
    finals.reserve(static_cast<std::size_t>(l_count));
    for (int l = 0; l < l_count; ++l) {
      Var h = tape.slice_rows(h0, l, l + 1);
      std::vector<Var> outs;
      outs.reserve(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        Var x = tape.slice_rows(layer_in, i, i + 1);
        h = step(tape, x, h, l);
        outs.push_back(h);
      }
      layer_in = n == 1 ? outs[0] : tape.concat(outs, 0);
      finals.push_back(h);
    }
    Var state = l_count == 1 ? finals[0] : tape.concat(finals, 0);
    return {layer_in, state};
  }
};

}  // namespace stgaze
