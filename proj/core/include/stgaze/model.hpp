#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stgaze/errors.hpp"
#include "stgaze/geometry.hpp"
#include "stgaze/layers.hpp"
#include "stgaze/params.hpp"
#include "stgaze/tape.hpp"

namespace stgaze {

// Stride-2 conv stages; the spatial grid halves per stage, so the output grid
// is input_size / 2^stages. The last width is the output channel count.
struct EncoderConfig {
  int input_size = 128;
  std::vector<int> widths = {16, 32, 64, 128};

  int out_channels() const { return widths.back(); }
  int grid() const { return input_size >> widths.size(); }
};

struct ModelConfig {
  EncoderConfig eye;
  EncoderConfig face{128, {8, 16, 24, 32}};
  EcaConfig eca;
  SamConfig sam;
  GruStackConfig gru;
  int head_hidden = 64;
  // Subtracted from input pixels before the first conv stage. Inputs arrive
  // in [0, 1]; centring them makes early features respond to contrast rather
  // than the background level, which matters a lot for small-scale training.
  // Zero disables the shift (zero images then propagate to zero features).
  double input_center = 0.5;
  bool use_eca = true;
  bool use_sam = true;
  bool use_gru = true;
  bool pool_before_gru = false;
  bool share_stream_params = true;
  std::uint64_t init_seed = 42;

  int fused_channels() const { return eye.out_channels() + face.out_channels(); }

  // Resolves derived fields and checks the internal contracts.
  void finalize() {
    if (eye.input_size != face.input_size) {
      throw std::invalid_argument("model: eye and face input sizes must match");
    }
    if (eye.grid() < 1 || eye.grid() != face.grid()) {
      throw std::invalid_argument("model: eye and face encoder grids must match");
    }
    if (!use_gru && pool_before_gru) {
      throw std::invalid_argument("model: pool_before_gru needs the recurrence enabled");
    }
    eca.channels = fused_channels();
    sam.dim = fused_channels();
    sam.seq_len = eye.grid() * eye.grid();
    gru.input_dim = fused_channels();
    if (gru.hidden_dim <= 0) gru.hidden_dim = fused_channels();
  }

  // The full-size architecture: 128- and 32-channel eye/face features on an
  // 8x8 grid, 160-channel fusion, 3 blocks x 8 heads, 2x160 recurrence.
  static ModelConfig full_size() { return ModelConfig{}; }

  // Small configuration for the synthetic end-to-end task.
  static ModelConfig tiny() {
    ModelConfig c;
    c.eye.widths = {8, 16, 24, 32};
    c.face.widths = {4, 6, 8, 8};
    c.sam.num_blocks = 2;
    c.sam.num_heads = 4;
    c.gru.hidden_dim = 40;
    c.head_hidden = 32;
    return c;
  }

  // Miniature configuration for end-to-end gradient checking (2x2 grid).
  static ModelConfig mini() {
    ModelConfig c;
    c.eye.input_size = 8;
    c.eye.widths = {4, 8};
    c.face.input_size = 8;
    c.face.widths = {3, 4};
    c.sam.num_blocks = 1;
    c.sam.num_heads = 2;
    c.gru.hidden_dim = 12;
    c.head_hidden = 8;
    return c;
  }
};

// Hidden state carried across frames of one stream, (layers x hidden).
// Zero-initialized at every sequence start.
template <typename S>
struct StreamState {
  Tensor<S> hidden;

  static StreamState zero(const ModelConfig& cfg) {
    return StreamState{Tensor<S>({cfg.gru.num_layers, cfg.gru.hidden_dim})};
  }
};

struct GazePrediction {
  double pitch = 0.0;  // radians, in [-pi/2, pi/2]
  double yaw = 0.0;

  GazeAngles angles() const { return GazeAngles{pitch, yaw}; }
};

template <typename S>
struct FrameInput {
  Tensor<S> eye_left;   // 3 x N x N
  Tensor<S> eye_right;  // 3 x N x N
  Tensor<S> face;       // 3 x N x N
};

template <typename S>
struct StreamForward {
  std::vector<Var> angles;  // per frame, (1 x 2) pitch/yaw in radians
  StreamState<S> state;     // value of the hidden state after the last frame
};

template <typename S>
struct ModelForward {
  struct Frame {
    Var left_angles;       // (1 x 2)
    Var right_angles;      // (1 x 2), yaw already un-flipped
    Var final_vector;      // {3} unit gaze vector of the averaged prediction
    GazePrediction left;
    GazePrediction right;
    GazePrediction final_prediction;
  };
  std::vector<Frame> frames;
  StreamState<S> state_left;
  StreamState<S> state_right;
};

namespace detail {

// One eye-face stream worth of parameters.
template <typename S>
struct StreamNet {
  std::vector<ConvStage<S>> eye_stages;
  std::vector<ConvStage<S>> face_stages;
  Eca<S> eca;
  Parameter<S>* pos_encoding = nullptr;
  std::vector<TransformerBlock<S>> blocks;
  GruStack<S> gru;
  Linear<S> head_in, head_out;

  StreamNet() = default;
  StreamNet(const ModelConfig& cfg, ParameterStore<S>& store, const std::string& prefix) {
    int c = 3;
    for (std::size_t i = 0; i < cfg.eye.widths.size(); ++i) {
      eye_stages.emplace_back(store, prefix + "eye_encoder.stage" + std::to_string(i), c,
                              cfg.eye.widths[i]);
      c = cfg.eye.widths[i];
    }
    c = 3;
    for (std::size_t i = 0; i < cfg.face.widths.size(); ++i) {
      face_stages.emplace_back(store, prefix + "face_encoder.stage" + std::to_string(i), c,
                               cfg.face.widths[i]);
      c = cfg.face.widths[i];
    }
    if (cfg.use_eca) eca = Eca<S>(store, prefix + "eca", cfg.eca);
    if (cfg.use_sam) {
      pos_encoding = &store.create(prefix + "sam.pos_encoding", {cfg.sam.seq_len, cfg.sam.dim},
                                   Init::kNormal02);
      for (int b = 0; b < cfg.sam.num_blocks; ++b) {
        blocks.emplace_back(store, prefix + "sam.block" + std::to_string(b), cfg.sam);
      }
    }
    if (cfg.use_gru) gru = GruStack<S>(store, prefix + "gru", cfg.gru);
    const int head_base = cfg.use_gru ? cfg.gru.hidden_dim : cfg.sam.dim;
    head_in = Linear<S>(store, prefix + "head.fc1", head_base, cfg.head_hidden);
    head_out = Linear<S>(store, prefix + "head.fc2", cfg.head_hidden, 2);
  }
};

}  // namespace detail

// The full network: per-stream encode -> fuse -> self-attention -> the
// spatio-temporal recurrence -> regression, with left/right streams sharing
// parameters (unless configured otherwise) and vector-space averaging.
template <typename S>
class StGazeModel {
 public:
  StGazeModel(ModelConfig cfg, ParameterStore<S>& store) : cfg_(std::move(cfg)) {
    cfg_.finalize();
    net_ = detail::StreamNet<S>(cfg_, store, "");
    if (!cfg_.share_stream_params) {
      right_net_ = detail::StreamNet<S>(cfg_, store, "right_stream.");
    }
  }

  const ModelConfig& config() const { return cfg_; }

  StreamState<S> zero_state() const { return StreamState<S>::zero(cfg_); }

  // image (3 x N x N) -> feature map (C_out x g x g).
  Var encode(Tape<S>& tape, Var image, const std::vector<ConvStage<S>>& stages,
             const EncoderConfig& ecfg) const {
    check_shape(tape.value(image).shape(), {3, ecfg.input_size, ecfg.input_size}, "encoder input");
    Var x = image;
    if (cfg_.input_center != 0.0) x = tape.scale(tape.rsub_scalar(x, cfg_.input_center), -1.0);
    for (const auto& stage : stages) x = stage.forward(tape, x);
    check_shape(tape.value(x).shape(), {ecfg.out_channels(), ecfg.grid(), ecfg.grid()},
                "encoder output");
    return x;
  }

  // Channel concatenation (eye first), then the optional ECA gate.
  Var fuse(Tape<S>& tape, Var eye_features, Var face_features,
           const detail::StreamNet<S>& net) const {
    const Shape e = tape.value(eye_features).shape();
    const Shape f = tape.value(face_features).shape();
    if (e[1] != f[1] || e[2] != f[2]) {
      throw std::invalid_argument("fuse: eye and face grids differ");
    }
    Var x = tape.concat({eye_features, face_features}, 0);
    check_shape(tape.value(x).shape(), {cfg_.fused_channels(), cfg_.eye.grid(), cfg_.eye.grid()},
                "fused features");
    if (cfg_.use_eca) x = net.eca.forward(tape, x);
    return x;
  }

  // (C x g x g) -> (g*g x C) in raster order: sequence index = row * g + col.
  Var patchify(Tape<S>& tape, Var x) const {
    const Shape shape = tape.value(x).shape();
    return tape.transpose2d(tape.reshape(x, {shape[0], shape[1] * shape[2]}));
  }

  // Positional encoding plus transformer blocks; pass-through when disabled.
  Var sam_forward(Tape<S>& tape, Var fused, const detail::StreamNet<S>& net) const {
    Var seq = patchify(tape, fused);
    check_shape(tape.value(seq).shape(), {cfg_.sam.seq_len, cfg_.sam.dim}, "patch sequence");
    if (!cfg_.use_sam) return seq;
    Var y = tape.add(seq, tape.param(*net.pos_encoding));
    for (const auto& block : net.blocks) y = block.forward(tape, y);
    check_shape(tape.value(y).shape(), {cfg_.sam.seq_len, cfg_.sam.dim}, "sam output");
    return y;
  }

  // The spatial scan of one frame: the stacked GRU walks the patch sequence
  // from state_in; the final hidden state is what the next frame resumes
  // from, which makes the framewise recurrence a resumed contiguous scan.
  std::pair<Var, Var> st_recurrence(Tape<S>& tape, Var patches, Var state_in) const {
    return net_.gru.scan(tape, patches, state_in);
  }

  // (N x H) -> (1 x 2): spatial average pool, two-layer MLP, tanh, pi/2.
  Var regress_head(Tape<S>& tape, Var features, const detail::StreamNet<S>& net) const {
    const int width = tape.value(features).dim(1);
    Var pooled = tape.reshape(tape.mean_axis(features, 0), {1, width});
    Var h = tape.swish(net.head_in.forward(tape, pooled));
    Var out = tape.scale(tape.tanh(net.head_out.forward(tape, h)), 1.5707963267948966);
    check_shape(tape.value(out).shape(), {1, 2}, "regression output");
    return out;
  }

  // One stream over T frames. `frames` are (eye, face) pairs; the eye patch
  // must already be flipped for the right stream.
  StreamForward<S> forward_stream(Tape<S>& tape,
                                  std::span<const std::pair<Var, Var>> frames,
                                  const StreamState<S>& state,
                                  const detail::StreamNet<S>& net) const {
    if (frames.empty()) throw std::invalid_argument("forward_stream: needs at least one frame");
    StreamForward<S> result;
    Var h = tape.constant(state.hidden);
    for (const auto& [eye_img, face_img] : frames) {
      Var eye_f = encode(tape, eye_img, net.eye_stages, cfg_.eye);
      Var face_f = encode(tape, face_img, net.face_stages, cfg_.face);
      Var fused = fuse(tape, eye_f, face_f, net);
      Var y = sam_forward(tape, fused, net);
      Var z = y;
      if (cfg_.use_gru) {
        Var gru_in = y;
        if (cfg_.pool_before_gru) {
          // The conventional design: collapse space first, recur over a
          // length-1 sequence per frame.
          gru_in = tape.reshape(tape.mean_axis(y, 0), {1, cfg_.sam.dim});
        }
        auto [scan_out, h_next] = net.gru.scan(tape, gru_in, h);
        z = scan_out;
        h = h_next;
      }
      result.angles.push_back(regress_head(tape, z, net));
    }
    result.state = StreamState<S>{tape.value(h)};
    return result;
  }

  StreamForward<S> forward_stream(Tape<S>& tape,
                                  std::span<const std::pair<Var, Var>> frames,
                                  const StreamState<S>& state) const {
    return forward_stream(tape, frames, state, net_);
  }

  // Single-stream entry points over the (shared) primary parameter set.
  Var encode_eye(Tape<S>& tape, Var image) const {
    return encode(tape, image, net_.eye_stages, cfg_.eye);
  }
  Var encode_face(Tape<S>& tape, Var image) const {
    return encode(tape, image, net_.face_stages, cfg_.face);
  }
  Var fuse(Tape<S>& tape, Var eye_features, Var face_features) const {
    return fuse(tape, eye_features, face_features, net_);
  }
  Var sam_forward(Tape<S>& tape, Var fused) const { return sam_forward(tape, fused, net_); }
  Var regress_head(Tape<S>& tape, Var features) const {
    return regress_head(tape, features, net_);
  }

  // Full model over T frames: left stream sees (eye_L, face); the right
  // stream sees (hflip(eye_R), face) through the shared parameters and its
  // yaw is negated back. Final prediction per frame averages the two unit
  // gaze vectors and renormalizes.
  ModelForward<S> forward_model(Tape<S>& tape, std::span<const FrameInput<S>> frames,
                                const StreamState<S>& left_state,
                                const StreamState<S>& right_state) const {
    if (frames.empty()) throw std::invalid_argument("forward_model: needs at least one frame");
    std::vector<std::pair<Var, Var>> left_frames, right_frames;
    left_frames.reserve(frames.size());
    right_frames.reserve(frames.size());
    for (const auto& f : frames) {
      Var face_img = tape.constant(f.face);
      left_frames.emplace_back(tape.constant(f.eye_left), face_img);
      right_frames.emplace_back(tape.hflip(tape.constant(f.eye_right)), face_img);
    }
    StreamForward<S> left = forward_stream(tape, left_frames, left_state, net_);
    StreamForward<S> right = forward_stream(tape, right_frames, right_state,
                                            cfg_.share_stream_params ? net_ : right_net_);

    ModelForward<S> out;
    out.state_left = left.state;
    out.state_right = right.state;
    Var unflip = tape.constant(Tensor<S>({1, 2}, {S(1), S(-1)}));
    for (std::size_t t = 0; t < frames.size(); ++t) {
      typename ModelForward<S>::Frame frame;
      frame.left_angles = left.angles[t];
      frame.right_angles = tape.mul(right.angles[t], unflip);
      Var vl = angles_to_vector_var(tape, frame.left_angles);
      Var vr = angles_to_vector_var(tape, frame.right_angles);
      Var avg = tape.scale(tape.add(vl, vr), 0.5);
      const auto& avg_v = tape.value(avg);
      const double n = std::sqrt(static_cast<double>(avg_v[0]) * avg_v[0] +
                                 static_cast<double>(avg_v[1]) * avg_v[1] +
                                 static_cast<double>(avg_v[2]) * avg_v[2]);
      if (n < 1e-9) {
        throw NumericError(
            "forward_model: left/right gaze vectors are antipodal, average has no direction "
            "(frame " +
            std::to_string(t) + ")");
      }
      Var norm = tape.sqrt(tape.sum_all(tape.mul(avg, avg)));
      frame.final_vector = tape.mul_scalar_var(avg, tape.recip(norm));

      frame.left = prediction_from(tape.value(frame.left_angles));
      frame.right = prediction_from(tape.value(frame.right_angles));
      const auto& fv = tape.value(frame.final_vector);
      GazeAngles fa = vector_to_angles(GazeVector{fv[0], fv[1], fv[2]});
      frame.final_prediction = GazePrediction{fa.pitch, fa.yaw};
      out.frames.push_back(std::move(frame));
    }
    return out;
  }

  // (1 x 2) angles -> {3} unit gaze vector, differentiable.
  static Var angles_to_vector_var(Tape<S>& tape, Var angles) {
    Var flat = tape.reshape(angles, {2});
    Var pitch = tape.slice_rows(flat, 0, 1);
    Var yaw = tape.slice_rows(flat, 1, 2);
    Var cp = tape.cos(pitch);
    Var x = tape.mul(cp, tape.sin(yaw));
    Var y = tape.scale(tape.sin(pitch), -1.0);
    Var z = tape.scale(tape.mul(cp, tape.cos(yaw)), -1.0);
    return tape.concat({x, y, z}, 0);
  }

 private:
  static GazePrediction prediction_from(const Tensor<S>& angles) {
    return GazePrediction{static_cast<double>(angles[0]), static_cast<double>(angles[1])};
  }

  static void check_shape(const Shape& got, const Shape& want, const char* what) {
    if (got != want) {
      throw std::invalid_argument(std::string("shape ledger: ") + what + " is " +
                                  shape_str(got) + ", expected " + shape_str(want));
    }
  }

  ModelConfig cfg_;
  detail::StreamNet<S> net_;
  detail::StreamNet<S> right_net_;
};

}  // namespace stgaze
