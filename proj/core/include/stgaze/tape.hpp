#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <tuple>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stgaze/errors.hpp"
#include "stgaze/kernels.hpp"
#include "stgaze/params.hpp"
#include "stgaze/tensor.hpp"

namespace stgaze {

// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops evaluate eagerly and append one node each; the node
// creation order is the reverse-traversal order for backward(). A tape is
// single-threaded; distinct tapes may run on distinct threads and share
// read-only parameters.
template <typename S>
class Tape {
  enum class Op : std::uint8_t {
    kLeaf,        // constant / input / parameter
    kAdd,
    kSub,
    kMul,
    kScale,       // x * f0
    kRsubScalar,  // f0 - x
    kMulScalarVar,
    kRecip,
    kSqrt,
    kSin,
    kCos,
    kAcosClamped,  // acos(clamp(x, -1+f0, 1-f0))
    kSigmoid,
    kTanh,
    kSwish,
    kMatmul,
    kMatmulNT,
    kBiasAdd,
    kConv2d,      // i0=stride i1=pad_h i2=pad_w
    kSoftmax,
    kLayerNorm,   // f0=eps
    kMeanAxis,    // i0=axis
    kSumAll,
    kConcat,      // i0=axis, aux holds inputs
    kSliceRows,   // i0=begin i1=end
    kSliceCols,
    kTranspose2d,
    kReshape,
    kHflip,
    kScaleChannels,
  };

  struct Args {
    int i0 = 0, i1 = 0, i2 = 0;
    double f0 = 0.0;
  };

  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // allocated lazily during backward
    Op op = Op::kLeaf;
    int in0 = -1, in1 = -1, in2 = -1;
    int aux = -1;
    Args args;
    Parameter<S>* param = nullptr;
  };

 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ------------------------------------------------------------

  Var constant(Tensor<S> v) { return push(Op::kLeaf, std::move(v)); }

  Var scalar(double v) { return constant(Tensor<S>::scalar(static_cast<S>(v))); }

  // Repeated uses of one parameter share a single node, so gradients from all
  // consumers accumulate before reaching the parameter buffer.
  Var param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{it->second};
    Var v = push(Op::kLeaf, p.value);
    nodes_[static_cast<std::size_t>(v.id)].param = &p;
    param_nodes_[&p] = v.id;
    return v;
  }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    const auto& x = val(a);
    const auto& y = val(b);
    require(x.same_shape(y), "add: shape mismatch " + shape_str(x.shape()) + " vs " +
                                 shape_str(y.shape()));
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
    return push(Op::kAdd, std::move(out), a.id, b.id);
  }

  Var sub(Var a, Var b) {
    const auto& x = val(a);
    const auto& y = val(b);
    require(x.same_shape(y), "sub: shape mismatch");
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
    return push(Op::kSub, std::move(out), a.id, b.id);
  }

  Var mul(Var a, Var b) {
    const auto& x = val(a);
    const auto& y = val(b);
    require(x.same_shape(y), "mul: shape mismatch");
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
    return push(Op::kMul, std::move(out), a.id, b.id);
  }

  Var scale(Var a, double c) {
    const auto& x = val(a);
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = static_cast<S>(x[i] * static_cast<S>(c));
    Args args;
    args.f0 = c;
    return push(Op::kScale, std::move(out), a.id, -1, -1, args);
  }

  Var rsub_scalar(Var a, double c) {
    const auto& x = val(a);
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = static_cast<S>(c) - x[i];
    Args args;
    args.f0 = c;
    return push(Op::kRsubScalar, std::move(out), a.id, -1, -1, args);
  }

  // x * s where s has a single element.
  Var mul_scalar_var(Var a, Var s) {
    const auto& x = val(a);
    const auto& sv = val(s);
    require(sv.numel() == 1, "mul_scalar_var: scale must have one element");
    Tensor<S> out(x.shape());
    const S c = sv[0];
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
    return push(Op::kMulScalarVar, std::move(out), a.id, s.id);
  }

  Var recip(Var a) { return unary(Op::kRecip, a, [](S x) { return S(1) / x; }); }
  Var sqrt(Var a) {
    return unary(Op::kSqrt, a, [](S x) { return std::sqrt(x); });
  }
  Var sin(Var a) {
    return unary(Op::kSin, a, [](S x) { return std::sin(x); });
  }
  Var cos(Var a) {
    return unary(Op::kCos, a, [](S x) { return std::cos(x); });
  }
  Var sigmoid(Var a) {
    return unary(Op::kSigmoid, a, [](S x) { return S(1) / (S(1) + std::exp(-x)); });
  }
  Var tanh(Var a) {
    return unary(Op::kTanh, a, [](S x) { return std::tanh(x); });
  }
  Var swish(Var a) {
    return unary(Op::kSwish, a, [](S x) { return x / (S(1) + std::exp(-x)); });
  }

  // acos of the argument clamped to [-1+eps, 1-eps]; gradient is zero in the
  // clamped region, which bounds it near exact agreement.
  Var acos_clamped(Var a, double eps) {
    require(eps > 0.0, "acos_clamped: eps must be > 0");
    const auto& x = val(a);
    Tensor<S> out(x.shape());
    const S lo = static_cast<S>(-1.0 + eps), hi = static_cast<S>(1.0 - eps);
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      S c = x[i] < lo ? lo : (x[i] > hi ? hi : x[i]);
      out[i] = std::acos(c);
    }
    Args args;
    args.f0 = eps;
    return push(Op::kAcosClamped, std::move(out), a.id, -1, -1, args);
  }

  // ---- linear algebra ----------------------------------------------------

  Var matmul(Var a, Var b) {
    const auto& x = val(a);
    const auto& y = val(b);
    require(x.rank() == 2 && y.rank() == 2, "matmul: operands must be rank-2");
    require(x.dim(1) == y.dim(0), "matmul: inner dimensions differ (" + shape_str(x.shape()) +
                                      " vs " + shape_str(y.shape()) + ")");
    Tensor<S> out({x.dim(0), y.dim(1)});
    detail::gemm_nn(x.dim(0), x.dim(1), y.dim(1), x.data(), y.data(), out.data(), false);
    return push(Op::kMatmul, std::move(out), a.id, b.id);
  }

  // a * b^T with b stored row-major (N x K).
  Var matmul_nt(Var a, Var b) {
    const auto& x = val(a);
    const auto& y = val(b);
    require(x.rank() == 2 && y.rank() == 2, "matmul_nt: operands must be rank-2");
    require(x.dim(1) == y.dim(1), "matmul_nt: inner dimensions differ");
    const int m = x.dim(0), k = x.dim(1), n = y.dim(0);
    std::vector<S> yt(static_cast<std::size_t>(k) * n);
    detail::transpose(n, k, y.data(), yt.data());
    Tensor<S> out({m, n});
    detail::gemm_nn(m, k, n, x.data(), yt.data(), out.data(), false);
    return push(Op::kMatmulNT, std::move(out), a.id, b.id);
  }

  // X (M x N) + b (N), broadcast over rows.
  Var bias_add(Var a, Var b) {
    const auto& x = val(a);
    const auto& bias = val(b);
    require(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
            "bias_add: bias shape must match columns");
    Tensor<S> out(x.shape());
    for (int i = 0; i < x.dim(0); ++i) {
      for (int j = 0; j < x.dim(1); ++j) out.at(i, j) = x.at(i, j) + bias[j];
    }
    return push(Op::kBiasAdd, std::move(out), a.id, b.id);
  }

  // input (C_in x H x W), weight (C_out x C_in x kh x kw), optional bias
  // (C_out). Zero padding; output H' = floor((H + 2*ph - kh)/stride) + 1.
  Var conv2d(Var input, Var weight, Var bias, int stride, int pad_h, int pad_w) {
    const auto& x = val(input);
    const auto& w = val(weight);
    require(x.rank() == 3, "conv2d: input must be C x H x W");
    require(w.rank() == 4, "conv2d: weight must be C_out x C_in x kh x kw");
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(pad_h >= 0 && pad_w >= 0, "conv2d: padding must be >= 0");
    const int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    require(w.dim(1) == c_in, "conv2d: input has " + std::to_string(c_in) +
                                  " channels but weight expects " + std::to_string(w.dim(1)));
    require(h + 2 * pad_h >= kh && wd + 2 * pad_w >= kw,
            "conv2d: kernel larger than padded input");
    if (bias.valid()) {
      const auto& b = val(bias);
      require(b.rank() == 1 && b.dim(0) == c_out, "conv2d: bias shape must be (C_out)");
    }
    const int oh = (h + 2 * pad_h - kh) / stride + 1;
    const int ow = (wd + 2 * pad_w - kw) / stride + 1;
    const int k = c_in * kh * kw;
    const std::int64_t patches = static_cast<std::int64_t>(oh) * ow;
    std::vector<S> col(static_cast<std::size_t>(k) * patches);
    detail::im2col(x.data(), c_in, h, wd, kh, kw, stride, pad_h, pad_w, oh, ow, col.data());
    Tensor<S> out({c_out, oh, ow});
    detail::gemm_nn(c_out, k, static_cast<int>(patches), w.data(), col.data(), out.data(), false);
    if (bias.valid()) {
      const auto& b = val(bias);
      for (int o = 0; o < c_out; ++o) {
        S* plane = out.data() + static_cast<std::size_t>(o) * patches;
        for (std::int64_t p = 0; p < patches; ++p) plane[p] += b[o];
      }
    }
    Args args;
    args.i0 = stride;
    args.i1 = pad_h;
    args.i2 = pad_w;
    return push(Op::kConv2d, std::move(out), input.id, weight.id, bias.id, args);
  }

  // ---- normalization and reductions ---------------------------------------

  // Numerically stable softmax over the last axis.
  Var softmax(Var a) {
    const auto& x = val(a);
    require(x.rank() >= 1, "softmax: rank must be >= 1");
    const int n = x.dim(x.rank() - 1);
    const std::int64_t outer = x.numel() / n;
    Tensor<S> out(x.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
      const S* src = x.data() + o * n;
      S* dst = out.data() + o * n;
      S mx = src[0];
      for (int i = 1; i < n; ++i) mx = std::max(mx, src[i]);
      S sum = S(0);
      for (int i = 0; i < n; ++i) {
        dst[i] = std::exp(src[i] - mx);
        sum += dst[i];
      }
      const S inv = S(1) / sum;
      for (int i = 0; i < n; ++i) dst[i] *= inv;
    }
    return push(Op::kSoftmax, std::move(out), a.id);
  }

  // Per last-axis slice: gamma * (x - mean) / sqrt(var + eps) + beta, with
  // population (1/D) variance.
  Var layer_norm(Var a, Var gamma, Var beta, double eps) {
    const auto& x = val(a);
    const auto& g = val(gamma);
    const auto& b = val(beta);
    require(eps > 0.0, "layer_norm: eps must be > 0");
    const int d = x.dim(x.rank() - 1);
    require(g.rank() == 1 && g.dim(0) == d && b.rank() == 1 && b.dim(0) == d,
            "layer_norm: gamma/beta must have the slice width");
    const std::int64_t outer = x.numel() / d;
    Tensor<S> out(x.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
      const S* src = x.data() + o * d;
      S* dst = out.data() + o * d;
      S mean = S(0);
      for (int i = 0; i < d; ++i) mean += src[i];
      mean /= static_cast<S>(d);
      S var = S(0);
      for (int i = 0; i < d; ++i) {
        const S c = src[i] - mean;
        var += c * c;
      }
      var /= static_cast<S>(d);
      const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
      for (int i = 0; i < d; ++i) dst[i] = g[i] * (src[i] - mean) * inv + b[i];
    }
    Args args;
    args.f0 = eps;
    return push(Op::kLayerNorm, std::move(out), a.id, gamma.id, beta.id, args);
  }

  // Mean over one axis; the axis is removed (a rank-1 input yields shape {1}).
  Var mean_axis(Var a, int axis) {
    const auto& x = val(a);
    require(axis >= 0 && axis < x.rank(), "mean_axis: axis out of range");
    auto [outer, n, inner] = axis_split(x.shape(), axis);
    Shape out_shape(x.shape());
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    Tensor<S> out(out_shape);
    const S inv = S(1) / static_cast<S>(n);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        S sum = S(0);
        for (std::int64_t j = 0; j < n; ++j) sum += x[(o * n + j) * inner + i];
        out[o * inner + i] = sum * inv;
      }
    }
    Args args;
    args.i0 = axis;
    return push(Op::kMeanAxis, std::move(out), a.id, -1, -1, args);
  }

  Var sum_all(Var a) {
    const auto& x = val(a);
    S sum = S(0);
    for (std::int64_t i = 0; i < x.numel(); ++i) sum += x[i];
    return push(Op::kSumAll, Tensor<S>::scalar(sum), a.id);
  }

  // ---- structural ----------------------------------------------------------

  Var concat(std::span<const Var> parts, int axis) {
    require(!parts.empty(), "concat: needs at least one input");
    const auto& first = val(parts[0]);
    require(axis >= 0 && axis < first.rank(), "concat: axis out of range");
    Shape out_shape = first.shape();
    int total = 0;
    for (Var p : parts) {
      const auto& t = val(p);
      require(t.rank() == first.rank(), "concat: rank mismatch");
      for (int d = 0; d < t.rank(); ++d) {
        require(d == axis || t.dim(d) == first.dim(d), "concat: off-axis dimension mismatch");
      }
      total += t.dim(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;
    Tensor<S> out(out_shape);
    auto [outer, n_out, inner] = axis_split(out_shape, axis);
    std::int64_t offset = 0;
    for (Var p : parts) {
      const auto& t = val(p);
      const std::int64_t n = t.dim(axis);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < n; ++j) {
          const S* src = t.data() + (o * n + j) * inner;
          S* dst = out.data() + (o * n_out + offset + j) * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] = src[i];
        }
      }
      offset += n;
    }
    auxes_.emplace_back();
    auto& list = auxes_.back();
    for (Var p : parts) list.push_back(p.id);
    Args args;
    args.i0 = axis;
    return push(Op::kConcat, std::move(out), -1, -1, -1, args,
                static_cast<int>(auxes_.size()) - 1);
  }

  Var concat(std::initializer_list<Var> parts, int axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
  }

  // Rows [begin, end) of a rank-1 or rank-2 tensor.
  Var slice_rows(Var a, int begin, int end) {
    const auto& x = val(a);
    require(x.rank() == 1 || x.rank() == 2, "slice_rows: rank must be 1 or 2");
    require(0 <= begin && begin < end && end <= x.dim(0), "slice_rows: bad range");
    const std::int64_t inner = x.rank() == 2 ? x.dim(1) : 1;
    Shape out_shape = x.rank() == 2 ? Shape{end - begin, x.dim(1)} : Shape{end - begin};
    Tensor<S> out(out_shape);
    const S* src = x.data() + begin * inner;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = src[i];
    Args args;
    args.i0 = begin;
    args.i1 = end;
    return push(Op::kSliceRows, std::move(out), a.id, -1, -1, args);
  }

  // Columns [begin, end) of a rank-2 tensor.
  Var slice_cols(Var a, int begin, int end) {
    const auto& x = val(a);
    require(x.rank() == 2, "slice_cols: rank must be 2");
    require(0 <= begin && begin < end && end <= x.dim(1), "slice_cols: bad range");
    Tensor<S> out({x.dim(0), end - begin});
    for (int i = 0; i < x.dim(0); ++i) {
      for (int j = begin; j < end; ++j) out.at(i, j - begin) = x.at(i, j);
    }
    Args args;
    args.i0 = begin;
    args.i1 = end;
    return push(Op::kSliceCols, std::move(out), a.id, -1, -1, args);
  }

  Var transpose2d(Var a) {
    const auto& x = val(a);
    require(x.rank() == 2, "transpose2d: rank must be 2");
    Tensor<S> out({x.dim(1), x.dim(0)});
    detail::transpose(x.dim(0), x.dim(1), x.data(), out.data());
    return push(Op::kTranspose2d, std::move(out), a.id);
  }

  Var reshape(Var a, Shape shape) {
    const auto& x = val(a);
    require(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
    Tensor<S> out(std::move(shape));
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i];
    return push(Op::kReshape, std::move(out), a.id);
  }

  // Mirrors a C x H x W tensor along its width axis.
  Var hflip(Var a) {
    const auto& x = val(a);
    require(x.rank() == 3, "hflip: rank must be 3");
    const int w = x.dim(2);
    Tensor<S> out(x.shape());
    for (int c = 0; c < x.dim(0); ++c) {
      for (int y = 0; y < x.dim(1); ++y) {
        for (int xx = 0; xx < w; ++xx) out.at(c, y, xx) = x.at(c, y, w - 1 - xx);
      }
    }
    return push(Op::kHflip, std::move(out), a.id);
  }

  // X (C x H x W) scaled per channel by a (C).
  Var scale_channels(Var a, Var s) {
    const auto& x = val(a);
    const auto& c = val(s);
    require(x.rank() == 3 && c.rank() == 1 && c.dim(0) == x.dim(0),
            "scale_channels: scale must have one entry per channel");
    Tensor<S> out(x.shape());
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    for (int ch = 0; ch < x.dim(0); ++ch) {
      const S a_c = c[ch];
      const S* src = x.data() + ch * plane;
      S* dst = out.data() + ch * plane;
      for (std::int64_t i = 0; i < plane; ++i) dst[i] = src[i] * a_c;
    }
    return push(Op::kScaleChannels, std::move(out), a.id, s.id);
  }

  // ---- access and backward -------------------------------------------------

  // The returned reference is invalidated by the next op on this tape; copy
  // the tensor before recording further nodes.
  const Tensor<S>& value(Var v) const { return val(v); }

  // Gradient buffer of a node after backward(); empty tensor if untouched.
  const Tensor<S>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  std::size_t size() const { return nodes_.size(); }

  // Accumulates d(root)/d(parameter) into each parameter's grad buffer.
  // Gradients keep accumulating across calls until the parameters are zeroed.
  void backward(Var root) {
    run_backward(root);
    for (auto& [p, id] : param_nodes_) {
      const auto& g = nodes_[static_cast<std::size_t>(id)].grad;
      if (g.empty()) continue;
      for (std::int64_t i = 0; i < g.numel(); ++i) p->grad[i] += g[i];
    }
  }

  // Same, but into an external sink (used by data-parallel workers).
  void backward(Var root, ParamGrads<S>& sink) {
    run_backward(root);
    for (auto& [p, id] : param_nodes_) {
      const auto& g = nodes_[static_cast<std::size_t>(id)].grad;
      if (!g.empty()) sink.accumulate(*p, g);
    }
  }

  void clear() {
    nodes_.clear();
    auxes_.clear();
    param_nodes_.clear();
  }

 private:
  static void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
  }

  // Splits a shape into (outer, n, inner) around `axis`.
  static std::tuple<std::int64_t, std::int64_t, std::int64_t> axis_split(const Shape& shape,
                                                                         int axis) {
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[static_cast<std::size_t>(d)];
    for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d) {
      inner *= shape[static_cast<std::size_t>(d)];
    }
    return {outer, shape[static_cast<std::size_t>(axis)], inner};
  }

  template <typename F>
  Var unary(Op op, Var a, F f) {
    const auto& x = val(a);
    Tensor<S> out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    return push(op, std::move(out), a.id);
  }

  const Tensor<S>& val(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("tape: use of invalid var");
    }
    return nodes_[static_cast<std::size_t>(v.id)].value;
  }

  Var push(Op op, Tensor<S> value, int in0 = -1, int in1 = -1, int in2 = -1, Args args = {},
           int aux = -1) {
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.in0 = in0;
    n.in1 = in1;
    n.in2 = in2;
    n.args = args;
    n.aux = aux;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<S>& gbuf(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<S>(n.value.shape());
    return n.grad;
  }

  void run_backward(Var root) {
    if (!root.valid() || root.id >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("backward: invalid root");
    }
    if (nodes_[static_cast<std::size_t>(root.id)].value.numel() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  shape_str(nodes_[static_cast<std::size_t>(root.id)].value.shape()));
    }
    gbuf(root.id)[0] += S(1);
    for (int i = root.id; i >= 0; --i) {
      if (nodes_[static_cast<std::size_t>(i)].grad.empty()) continue;
      backward_node(i);
    }
  }

  void backward_node(int idx) {
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    const Tensor<S>& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] += g[i];
          gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& y = nodes_[static_cast<std::size_t>(n.in1)].value;
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] += g[i] * y[i];
          gb[i] += g[i] * x[i];
        }
        break;
      }
      case Op::kScale: {
        auto& ga = gbuf(n.in0);
        const S c = static_cast<S>(n.args.f0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
        break;
      }
      case Op::kRsubScalar: {
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] -= g[i];
        break;
      }
      case Op::kMulScalarVar: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        const S c = nodes_[static_cast<std::size_t>(n.in1)].value[0];
        auto& ga = gbuf(n.in0);
        auto& gs = gbuf(n.in1);
        S acc = S(0);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          ga[i] += g[i] * c;
          acc += g[i] * x[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::kRecip: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] -= g[i] / (x[i] * x[i]);
        break;
      }
      case Op::kSqrt: {
        const auto& y = n.value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / (S(2) * y[i]);
        break;
      }
      case Op::kSin: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * std::cos(x[i]);
        break;
      }
      case Op::kCos: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] -= g[i] * std::sin(x[i]);
        break;
      }
      case Op::kAcosClamped: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        const S lo = static_cast<S>(-1.0 + n.args.f0), hi = static_cast<S>(1.0 - n.args.f0);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          if (x[i] <= lo || x[i] >= hi) continue;
          ga[i] -= g[i] / std::sqrt(S(1) - x[i] * x[i]);
        }
        break;
      }
      case Op::kSigmoid: {
        const auto& y = n.value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (S(1) - y[i]);
        break;
      }
      case Op::kTanh: {
        const auto& y = n.value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (S(1) - y[i] * y[i]);
        break;
      }
      case Op::kSwish: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) {
          const S s = S(1) / (S(1) + std::exp(-x[i]));
          ga[i] += g[i] * s * (S(1) + x[i] * (S(1) - s));
        }
        break;
      }
      case Op::kMatmul: {
        const auto& a = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& b = nodes_[static_cast<std::size_t>(n.in1)].value;
        const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        std::vector<S> bt(static_cast<std::size_t>(k) * nn);
        detail::transpose(k, nn, b.data(), bt.data());
        detail::gemm_nn(m, nn, k, g.data(), bt.data(), ga.data(), true);
        detail::gemm_at_b(m, k, nn, a.data(), g.data(), gb.data());
        break;
      }
      case Op::kMatmulNT: {
        // out = A (m x k) * B^T with B (n x k)
        const auto& a = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& b = nodes_[static_cast<std::size_t>(n.in1)].value;
        const int m = a.dim(0), k = a.dim(1), nn = b.dim(0);
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        detail::gemm_nn(m, nn, k, g.data(), b.data(), ga.data(), true);
        detail::gemm_at_b(m, nn, k, g.data(), a.data(), gb.data());
        break;
      }
      case Op::kBiasAdd: {
        auto& ga = gbuf(n.in0);
        auto& gb = gbuf(n.in1);
        const int rows = g.dim(0), cols = g.dim(1);
        for (int i = 0; i < rows; ++i) {
          for (int j = 0; j < cols; ++j) {
            ga.at(i, j) += g.at(i, j);
            gb[j] += g.at(i, j);
          }
        }
        break;
      }
      case Op::kConv2d:
        backward_conv2d(n, g);
        break;
      case Op::kSoftmax: {
        const auto& y = n.value;
        auto& ga = gbuf(n.in0);
        const int d = y.dim(y.rank() - 1);
        const std::int64_t outer = y.numel() / d;
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* yo = y.data() + o * d;
          const S* go = g.data() + o * d;
          S dot = S(0);
          for (int i = 0; i < d; ++i) dot += go[i] * yo[i];
          S* dst = ga.data() + o * d;
          for (int i = 0; i < d; ++i) dst[i] += yo[i] * (go[i] - dot);
        }
        break;
      }
      case Op::kLayerNorm:
        backward_layer_norm(n, g);
        break;
      case Op::kMeanAxis: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        auto [outer, cnt, inner] = axis_split(x.shape(), n.args.i0);
        const S inv = S(1) / static_cast<S>(cnt);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t j = 0; j < cnt; ++j) {
            S* dst = ga.data() + (o * cnt + j) * inner;
            const S* src = g.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] * inv;
          }
        }
        break;
      }
      case Op::kSumAll: {
        auto& ga = gbuf(n.in0);
        const S gv = g[0];
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += gv;
        break;
      }
      case Op::kConcat: {
        const auto& list = auxes_[static_cast<std::size_t>(n.aux)];
        auto [outer, n_out, inner] = axis_split(n.value.shape(), n.args.i0);
        std::int64_t offset = 0;
        for (int src_id : list) {
          const auto& part = nodes_[static_cast<std::size_t>(src_id)].value;
          auto& gp = gbuf(src_id);
          const std::int64_t cnt = part.dim(n.args.i0);
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t j = 0; j < cnt; ++j) {
              const S* src = g.data() + (o * n_out + offset + j) * inner;
              S* dst = gp.data() + (o * cnt + j) * inner;
              for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
          }
          offset += cnt;
        }
        break;
      }
      case Op::kSliceRows: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        auto& ga = gbuf(n.in0);
        const std::int64_t inner = x.rank() == 2 ? x.dim(1) : 1;
        S* dst = ga.data() + n.args.i0 * inner;
        for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
        break;
      }
      case Op::kSliceCols: {
        auto& ga = gbuf(n.in0);
        const int rows = g.dim(0), cols = g.dim(1);
        for (int i = 0; i < rows; ++i) {
          for (int j = 0; j < cols; ++j) ga.at(i, n.args.i0 + j) += g.at(i, j);
        }
        break;
      }
      case Op::kTranspose2d: {
        auto& ga = gbuf(n.in0);
        const int rows = g.dim(0), cols = g.dim(1);
        for (int i = 0; i < rows; ++i) {
          for (int j = 0; j < cols; ++j) ga.at(j, i) += g.at(i, j);
        }
        break;
      }
      case Op::kReshape: {
        auto& ga = gbuf(n.in0);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        break;
      }
      case Op::kHflip: {
        auto& ga = gbuf(n.in0);
        const int w = g.dim(2);
        for (int c = 0; c < g.dim(0); ++c) {
          for (int y = 0; y < g.dim(1); ++y) {
            for (int x = 0; x < w; ++x) ga.at(c, y, w - 1 - x) += g.at(c, y, x);
          }
        }
        break;
      }
      case Op::kScaleChannels: {
        const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
        const auto& c = nodes_[static_cast<std::size_t>(n.in1)].value;
        auto& ga = gbuf(n.in0);
        auto& gc = gbuf(n.in1);
        const std::int64_t plane = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
        for (int ch = 0; ch < x.dim(0); ++ch) {
          const S a_c = c[ch];
          const S* gp = g.data() + ch * plane;
          const S* xp = x.data() + ch * plane;
          S* dst = ga.data() + ch * plane;
          S acc = S(0);
          for (std::int64_t i = 0; i < plane; ++i) {
            dst[i] += gp[i] * a_c;
            acc += gp[i] * xp[i];
          }
          gc[ch] += acc;
        }
        break;
      }
    }
  }

  void backward_conv2d(Node& n, const Tensor<S>& g) {
    const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
    const auto& w = nodes_[static_cast<std::size_t>(n.in1)].value;
    const int stride = n.args.i0, ph = n.args.i1, pw = n.args.i2;
    const int c_in = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int oh = g.dim(1), ow = g.dim(2);
    const int k = c_in * kh * kw;
    const std::int64_t patches = static_cast<std::int64_t>(oh) * ow;

    // Recompute the unfolded input rather than saving it from the forward.
    std::vector<S> col(static_cast<std::size_t>(k) * patches);
    detail::im2col(x.data(), c_in, h, wd, kh, kw, stride, ph, pw, oh, ow, col.data());

    auto& gw = gbuf(n.in1);
    std::vector<S> col_t(static_cast<std::size_t>(patches) * k);
    detail::transpose(k, static_cast<int>(patches), col.data(), col_t.data());
    detail::gemm_nn(c_out, static_cast<int>(patches), k, g.data(), col_t.data(), gw.data(), true);

    if (n.in2 >= 0) {
      auto& gb = gbuf(n.in2);
      for (int o = 0; o < c_out; ++o) {
        const S* gp = g.data() + static_cast<std::size_t>(o) * patches;
        S acc = S(0);
        for (std::int64_t p = 0; p < patches; ++p) acc += gp[p];
        gb[o] += acc;
      }
    }

    auto& gx = gbuf(n.in0);
    std::vector<S> gcol(static_cast<std::size_t>(k) * patches, S(0));
    detail::gemm_at_b(c_out, k, static_cast<int>(patches), w.data(), g.data(), gcol.data());
    detail::col2im(gcol.data(), c_in, h, wd, kh, kw, stride, ph, pw, oh, ow, gx.data());
  }

  void backward_layer_norm(Node& n, const Tensor<S>& g) {
    const auto& x = nodes_[static_cast<std::size_t>(n.in0)].value;
    const auto& gamma = nodes_[static_cast<std::size_t>(n.in1)].value;
    auto& gx = gbuf(n.in0);
    auto& ggamma = gbuf(n.in1);
    auto& gbeta = gbuf(n.in2);
    const int d = x.dim(x.rank() - 1);
    const std::int64_t outer = x.numel() / d;
    const S eps = static_cast<S>(n.args.f0);
    std::vector<S> xhat(static_cast<std::size_t>(d));
    for (std::int64_t o = 0; o < outer; ++o) {
      const S* src = x.data() + o * d;
      const S* go = g.data() + o * d;
      S mean = S(0);
      for (int i = 0; i < d; ++i) mean += src[i];
      mean /= static_cast<S>(d);
      S var = S(0);
      for (int i = 0; i < d; ++i) {
        const S c = src[i] - mean;
        var += c * c;
      }
      var /= static_cast<S>(d);
      const S inv = S(1) / std::sqrt(var + eps);
      S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
      for (int i = 0; i < d; ++i) {
        xhat[static_cast<std::size_t>(i)] = (src[i] - mean) * inv;
        const S dxhat = go[i] * gamma[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat[static_cast<std::size_t>(i)];
        ggamma[i] += go[i] * xhat[static_cast<std::size_t>(i)];
        gbeta[i] += go[i];
      }
      mean_dxhat /= static_cast<S>(d);
      mean_dxhat_xhat /= static_cast<S>(d);
      S* dst = gx.data() + o * d;
      for (int i = 0; i < d; ++i) {
        const S dxhat = go[i] * gamma[i];
        dst[i] += inv * (dxhat - mean_dxhat - xhat[static_cast<std::size_t>(i)] * mean_dxhat_xhat);
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<int>> auxes_;
  std::unordered_map<Parameter<S>*, int> param_nodes_;
};

}  // namespace stgaze
