#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "stgaze/grad_check.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"
#include "test_support.hpp"

using namespace stgaze;
using stgaze::test::max_abs_diff;
using stgaze::test::random_tensor;

namespace {

void zero_all(ParameterStore<double>& store) {
  for (auto& p : store) p->value.zero();
}

std::vector<FrameInput<double>> random_frames(int count, int size, Rng& rng) {
  std::vector<FrameInput<double>> frames;
  for (int t = 0; t < count; ++t) {
    frames.push_back(FrameInput<double>{random_tensor({3, size, size}, rng, 0.0, 1.0),
                                        random_tensor({3, size, size}, rng, 0.0, 1.0),
                                        random_tensor({3, size, size}, rng, 0.0, 1.0)});
  }
  return frames;
}

Tensor<double> hflip_copy(const Tensor<double>& img) {
  Tensor<double> out(img.shape());
  const int w = img.dim(2);
  for (int c = 0; c < img.dim(0); ++c) {
    for (int y = 0; y < img.dim(1); ++y) {
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y, w - 1 - x);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg = ModelConfig::full_size();
  cfg.finalize();
  CHECK(cfg.fused_channels() == 160);
  CHECK(cfg.sam.seq_len == 64);
  CHECK(cfg.sam.dim == 160);
  CHECK(cfg.gru.hidden_dim == 160);
  CHECK(cfg.eye.grid() == 8);

  ModelConfig bad = ModelConfig::full_size();
  bad.use_gru = false;
  bad.pool_before_gru = true;
  CHECK_THROWS_AS(bad.finalize(), std::invalid_argument);
}

TEST_CASE("shape ledger through the full-size pipeline") {
  ModelConfig cfg = ModelConfig::full_size();
  ParameterStore<double> store(cfg.init_seed);
  StGazeModel<double> model(cfg, store);

  Rng rng(1);
  Tape<double> tape;
  auto frames = random_frames(1, 128, rng);
  auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
  // encode: 3x128x128 -> 128x8x8 / 32x8x8, fuse -> 160x8x8, patchify -> 64x160,
  // recurrence -> 64x160, head -> (pitch, yaw). Stage shapes are asserted
  // inside the pipeline; reaching here means the ledger held.
  CHECK(fwd.frames.size() == 1);
  CHECK(tape.value(fwd.frames[0].final_vector).shape() == Shape{3});
  CHECK(std::fabs(norm(GazeVector{tape.value(fwd.frames[0].final_vector)[0],
                                  tape.value(fwd.frames[0].final_vector)[1],
                                  tape.value(fwd.frames[0].final_vector)[2]}) -
                  1.0) < 1e-9);
  CHECK(std::fabs(fwd.frames[0].final_prediction.pitch) <= 1.5707963267948966);
  CHECK(std::fabs(fwd.frames[0].final_prediction.yaw) <= 1.5707963267948966);

  SUBCASE("wrong input shape is rejected") {
    Tape<double> t2;
    std::vector<FrameInput<double>> bad;
    bad.push_back(FrameInput<double>{random_tensor({3, 64, 64}, rng), random_tensor({3, 128, 128}, rng),
                                     random_tensor({3, 128, 128}, rng)});
    CHECK_THROWS_AS(model.forward_model(t2, bad, model.zero_state(), model.zero_state()),
                    std::invalid_argument);
  }
}

TEST_CASE("encoder output shapes and zero propagation") {
  ModelConfig cfg = ModelConfig::full_size();
  cfg.input_center = 0.0;  // linearity check: zeros in, zeros out
  ParameterStore<double> store(7);
  StGazeModel<double> model(cfg, store);
  // zero image with zero biases stays zero through conv + swish stages
  zero_all(store);
  Rng rng(3);
  Tape<double> tape;
  std::vector<FrameInput<double>> frames;
  frames.push_back(FrameInput<double>{Tensor<double>({3, 128, 128}), Tensor<double>({3, 128, 128}),
                                      Tensor<double>({3, 128, 128})});
  auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
  CHECK(fwd.frames[0].final_prediction.pitch == doctest::Approx(0.0));
  CHECK(fwd.frames[0].final_prediction.yaw == doctest::Approx(0.0));
}

TEST_CASE("patchify raster order and bit-exact inverse") {
  ModelConfig cfg = ModelConfig::full_size();
  ParameterStore<double> store(2);
  StGazeModel<double> model(cfg, store);
  Rng rng(9);
  Tensor<double> x = random_tensor({160, 8, 8}, rng);
  Tape<double> tape;
  Var seq = model.patchify(tape, tape.constant(x));
  const auto& s = tape.value(seq);
  REQUIRE(s.shape() == Shape{64, 160});
  // grid (0,0) -> index 0; (1,2) -> 10; (7,7) -> 63
  for (int c = 0; c < 160; ++c) {
    CHECK(s.at(0, c) == x.at(c, 0, 0));
    CHECK(s.at(10, c) == x.at(c, 1, 2));
    CHECK(s.at(63, c) == x.at(c, 7, 7));
  }
  // inverse: transpose back and reshape to the grid
  Var back = tape.reshape(tape.transpose2d(seq), {160, 8, 8});
  CHECK(max_abs_diff(tape.value(back), x) == 0.0);
}

TEST_CASE("fuse concatenates eye channels first and applies the gate") {
  ModelConfig cfg = ModelConfig::full_size();
  SUBCASE("channel order without the gate") {
    cfg.use_eca = false;
    ParameterStore<double> store(4);
    StGazeModel<double> model(cfg, store);
    Tape<double> tape;
    Var e = tape.constant(Tensor<double>::full({128, 8, 8}, 1.0));
    Var f = tape.constant(Tensor<double>({32, 8, 8}));
    Var x = model.fuse(tape, e, f);
    CHECK(tape.value(x).shape() == Shape{160, 8, 8});
    CHECK(tape.value(x).at(0, 3, 3) == 1.0);
    CHECK(tape.value(x).at(127, 0, 0) == 1.0);
    CHECK(tape.value(x).at(128, 0, 0) == 0.0);
    CHECK(tape.value(x).at(159, 7, 7) == 0.0);
  }
  SUBCASE("zero ECA weights halve the concatenation") {
    ParameterStore<double> store(4);
    StGazeModel<double> model(cfg, store);
    zero_all(store);
    Rng rng(5);
    Tensor<double> ev = random_tensor({128, 8, 8}, rng);
    Tensor<double> fv = random_tensor({32, 8, 8}, rng);
    Tape<double> tape;
    Var x = model.fuse(tape, tape.constant(ev), tape.constant(fv));
    CHECK(tape.value(x).at(0, 0, 0) == doctest::Approx(0.5 * ev.at(0, 0, 0)).epsilon(1e-12));
    CHECK(tape.value(x).at(140, 2, 5) == doctest::Approx(0.5 * fv.at(12, 2, 5)).epsilon(1e-12));
  }
}

TEST_CASE("sam ablation passthrough and residual identity") {
  ModelConfig cfg = ModelConfig::mini();
  SUBCASE("without SAM the patch sequence passes through") {
    cfg.use_sam = false;
    ParameterStore<double> store(6);
    StGazeModel<double> model(cfg, store);
    Rng rng(6);
    Tensor<double> x = random_tensor({12, 2, 2}, rng);
    Tape<double> tape;
    Var y = model.sam_forward(tape, tape.constant(x));
    Var seq = model.patchify(tape, tape.constant(x));
    CHECK(max_abs_diff(tape.value(y), tape.value(seq)) == 0.0);
  }
  SUBCASE("zero block weights leave sequence plus positional encoding") {
    ParameterStore<double> store(6);
    StGazeModel<double> model(cfg, store);
    Tensor<double> pos = store.find("sam.pos_encoding")->value;  // keep the init
    for (auto& p : store) {
      if (p->name != "sam.pos_encoding") p->value.zero();
    }
    Rng rng(7);
    Tensor<double> x = random_tensor({12, 2, 2}, rng);
    Tape<double> tape;
    Var y = model.sam_forward(tape, tape.constant(x));
    Var want = tape.add(model.patchify(tape, tape.constant(x)), tape.constant(pos));
    CHECK(max_abs_diff(tape.value(y), tape.value(want)) == 0.0);
  }
}

TEST_CASE("recurrence oracle: framewise scan equals one contiguous scan") {
  // The core recurrence contract at full scale, in 64-bit: threading the
  // final state of frame t into frame t+1 is the same computation as one
  // contiguous scan over the concatenated patch sequences.
  ModelConfig cfg = ModelConfig::full_size();
  cfg.finalize();
  ParameterStore<double> store(11);
  GruStack<double> gru(store, "gru", cfg.gru);

  Rng rng(21);
  for (int frames : {1, 2, 5}) {
    std::vector<Tensor<double>> ys;
    for (int t = 0; t < frames; ++t) ys.push_back(random_tensor({64, 160}, rng));

    Tape<double> tape;
    // framewise with state threading
    Var state = tape.constant(Tensor<double>({2, 160}));
    std::vector<Var> z_frames;
    for (int t = 0; t < frames; ++t) {
      auto [z, next] = gru.scan(tape, tape.constant(ys[static_cast<std::size_t>(t)]), state);
      z_frames.push_back(z);
      state = next;
    }
    Var framewise = frames == 1 ? z_frames[0] : tape.concat(z_frames, 0);

    // one contiguous scan over the concatenation
    Tensor<double> all({64 * frames, 160});
    for (int t = 0; t < frames; ++t) {
      for (std::int64_t i = 0; i < 64 * 160; ++i) {
        all[static_cast<std::int64_t>(t) * 64 * 160 + i] = ys[static_cast<std::size_t>(t)][i];
      }
    }
    auto [contiguous, final_state] =
        gru.scan(tape, tape.constant(all), tape.constant(Tensor<double>({2, 160})));

    CHECK(max_abs_diff(tape.value(framewise), tape.value(contiguous)) < 1e-6);
    CHECK(max_abs_diff(tape.value(state), tape.value(final_state)) < 1e-6);
  }
}

TEST_CASE("stream state isolation across sequences") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(13);
  StGazeModel<double> model(cfg, store);
  Rng rng(31);
  auto seq_a = random_frames(2, 8, rng);
  auto seq_b = random_frames(2, 8, rng);

  Tape<double> tape;
  auto run_a = model.forward_model(tape, seq_a, model.zero_state(), model.zero_state());
  // carried state is nonzero for random weights
  double carried = 0.0;
  for (std::int64_t i = 0; i < run_a.state_left.hidden.numel(); ++i) {
    carried = std::max(carried, std::fabs(run_a.state_left.hidden[i]));
  }
  CHECK(carried > 0.0);

  Tape<double> t_carry, t_zero;
  auto carried_run = model.forward_model(t_carry, seq_b, run_a.state_left, run_a.state_right);
  auto zero_run = model.forward_model(t_zero, seq_b, model.zero_state(), model.zero_state());
  const double diff =
      std::fabs(carried_run.frames[0].final_prediction.pitch -
                zero_run.frames[0].final_prediction.pitch) +
      std::fabs(carried_run.frames[0].final_prediction.yaw - zero_run.frames[0].final_prediction.yaw);
  CHECK(diff > 0.0);

  SUBCASE("zero carried state reproduces the zero-state run") {
    Tape<double> t0, t1;
    auto a = model.forward_model(t0, seq_b, model.zero_state(), model.zero_state());
    auto b = model.forward_model(t1, seq_b, model.zero_state(), model.zero_state());
    CHECK(a.frames[0].final_prediction.pitch == b.frames[0].final_prediction.pitch);
    CHECK(a.frames[0].final_prediction.yaw == b.frames[0].final_prediction.yaw);
  }
}

TEST_CASE("regress head bounds") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(17);
  StGazeModel<double> model(cfg, store);

  SUBCASE("zero weights give (0, 0)") {
    zero_all(store);
    Rng rng(3);
    Tape<double> tape;
    Var z = tape.constant(random_tensor({4, 12}, rng));
    const auto& out = tape.value(model.regress_head(tape, z));
    CHECK(out.at(0, 0) == 0.0);
    CHECK(out.at(0, 1) == 0.0);
  }
  SUBCASE("huge logits saturate to +-pi/2") {
    zero_all(store);
    store.find("head.fc2.bias")->value = Tensor<double>({2}, {1e6, -1e6});
    Tape<double> tape;
    Var z = tape.constant(Tensor<double>({4, 12}));
    const auto& out = tape.value(model.regress_head(tape, z));
    CHECK(out.at(0, 0) == doctest::Approx(1.5707963267948966).epsilon(1e-12));
    CHECK(out.at(0, 1) == doctest::Approx(-1.5707963267948966).epsilon(1e-12));
  }
  SUBCASE("bounded for any input") {
    Rng rng(23);
    for (int i = 0; i < 20; ++i) {
      Tape<double> tape;
      Var z = tape.constant(random_tensor({4, 12}, rng, -50, 50));
      const auto& out = tape.value(model.regress_head(tape, z));
      CHECK(std::fabs(out.at(0, 0)) <= 1.5707963267948966);
      CHECK(std::fabs(out.at(0, 1)) <= 1.5707963267948966);
    }
  }
}

TEST_CASE("right-eye flip wiring holds for any parameters") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(29);  // arbitrary random init
  StGazeModel<double> model(cfg, store);
  Rng rng(37);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> eye = random_tensor({3, 8, 8}, rng, 0, 1);
    Tensor<double> face = random_tensor({3, 8, 8}, rng, 0, 1);
    std::vector<FrameInput<double>> frames;
    frames.push_back(FrameInput<double>{eye, hflip_copy(eye), face});
    Tape<double> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    // hflip(eye_R) == eye_L, so the shared stream sees identical tensors and
    // the reported right prediction is (pitch_L, -yaw_L) exactly.
    CHECK(fwd.frames[0].right.pitch == fwd.frames[0].left.pitch);
    CHECK(fwd.frames[0].right.yaw == -fwd.frames[0].left.yaw);
  }
}

TEST_CASE("stream averaging") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(5);
  StGazeModel<double> model(cfg, store);
  zero_all(store);
  Rng rng(41);
  auto frames = random_frames(1, 8, rng);

  SUBCASE("identical stream predictions average to themselves") {
    store.find("head.fc2.bias")->value = Tensor<double>({2}, {0.3, 0.0});  // yaw 0
    Tape<double> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    const double want = std::tanh(0.3) * 1.5707963267948966;
    CHECK(fwd.frames[0].left.pitch == doctest::Approx(want).epsilon(1e-12));
    CHECK(fwd.frames[0].final_prediction.pitch == doctest::Approx(want).epsilon(1e-12));
    CHECK(fwd.frames[0].final_prediction.yaw == doctest::Approx(0.0));
  }
  SUBCASE("opposite yaws cancel to zero") {
    store.find("head.fc2.bias")->value = Tensor<double>({2}, {0.0, 0.4});
    Tape<double> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    // streams predict (0, y) and (0, -y); the vector average points straight
    CHECK(std::fabs(fwd.frames[0].final_prediction.pitch) < 1e-12);
    CHECK(std::fabs(fwd.frames[0].final_prediction.yaw) < 1e-12);
  }
  SUBCASE("exactly antipodal streams raise a numeric failure") {
    // saturated yaw head: streams predict (0, +pi/2) and (0, -pi/2), whose
    // unit vectors are (1,0,0) and (-1,0,0); the average has no direction
    store.find("head.fc2.bias")->value = Tensor<double>({2}, {0.0, 1e9});
    Tape<double> tape;
    CHECK_THROWS_AS(model.forward_model(tape, frames, model.zero_state(), model.zero_state()),
                    NumericError);
  }
}

TEST_CASE("stream parameter sharing keeps one copy in the store") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> shared_store(1);
  StGazeModel<double> shared(cfg, shared_store);

  ModelConfig split_cfg = ModelConfig::mini();
  split_cfg.share_stream_params = false;
  ParameterStore<double> split_store(1);
  StGazeModel<double> split(split_cfg, split_store);

  CHECK(split_store.size() == 2 * shared_store.size());
  CHECK(shared_store.find("right_stream.eye_encoder.stage0.weight") == nullptr);
  CHECK(split_store.find("right_stream.eye_encoder.stage0.weight") != nullptr);

  // gradients from both streams reach the single shared copy
  Rng rng(43);
  auto frames = random_frames(1, 8, rng);
  Tape<double> tape;
  auto fwd = shared.forward_model(tape, frames, shared.zero_state(), shared.zero_state());
  Var loss = angular_error_deg_var(tape, fwd.frames[0].final_vector, GazeVector{0.2, 0.1, -1});
  tape.backward(loss);
  double g = 0.0;
  for (auto& p : shared_store) {
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) g += std::fabs(p->grad[i]);
  }
  CHECK(g > 0.0);
}

TEST_CASE("ablation variants run and have distinct parameter counts") {
  auto count_params = [](ModelConfig cfg) {
    ParameterStore<double> store(1);
    StGazeModel<double> model(cfg, store);
    return store.total_elements();
  };
  ModelConfig full = ModelConfig::mini();
  ModelConfig no_eca = ModelConfig::mini();
  no_eca.use_eca = false;
  ModelConfig no_sam = ModelConfig::mini();
  no_sam.use_sam = false;
  ModelConfig no_gru = ModelConfig::mini();
  no_gru.use_gru = false;
  ModelConfig pool_pre = ModelConfig::mini();
  pool_pre.pool_before_gru = true;

  const auto n_full = count_params(full);
  const auto n_no_eca = count_params(no_eca);
  const auto n_no_sam = count_params(no_sam);
  const auto n_no_gru = count_params(no_gru);
  const auto n_pool = count_params(pool_pre);

  CHECK(n_no_eca < n_full);
  CHECK(n_no_sam < n_no_eca);
  CHECK(n_no_gru < n_full);
  CHECK(n_pool == n_full);  // pooling changes wiring, not parameters
  // the four ablation rows are pairwise distinct
  CHECK(n_no_eca != n_no_sam);
  CHECK(n_no_eca != n_no_gru);
  CHECK(n_no_eca != n_pool);
  CHECK(n_no_sam != n_no_gru);
  CHECK(n_no_sam != n_pool);
  CHECK(n_no_gru != n_pool);

  SUBCASE("static model treats frames independently") {
    ParameterStore<double> store(3);
    StGazeModel<double> model(no_gru, store);
    Rng rng(47);
    auto frames = random_frames(3, 8, rng);
    std::vector<FrameInput<double>> permuted = {frames[2], frames[0], frames[1]};
    Tape<double> t1, t2;
    auto a = model.forward_model(t1, frames, model.zero_state(), model.zero_state());
    auto b = model.forward_model(t2, permuted, model.zero_state(), model.zero_state());
    CHECK(a.frames[2].final_prediction.pitch == b.frames[0].final_prediction.pitch);
    CHECK(a.frames[0].final_prediction.yaw == b.frames[1].final_prediction.yaw);
    CHECK(a.frames[1].final_prediction.pitch == b.frames[2].final_prediction.pitch);
  }
  SUBCASE("pool-before-GRU recurrence sees a length-1 sequence") {
    ParameterStore<double> store(3);
    StGazeModel<double> model(pool_pre, store);
    Rng rng(53);
    auto frames = random_frames(2, 8, rng);
    Tape<double> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    CHECK(fwd.frames.size() == 2);
    CHECK(std::fabs(fwd.frames[1].final_prediction.yaw) <= 1.5707963267948966);
  }
}

TEST_CASE("temporal path: frame-0 input reaches frame-2 loss") {
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(59);
  StGazeModel<double> model(cfg, store);
  Rng rng(61);
  auto frames = random_frames(3, 8, rng);
  const GazeVector truth = angles_to_vector(GazeAngles{0.1, -0.2});

  auto loss_at = [&]() {
    Tape<double> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    Var loss = angular_error_deg_var(tape, fwd.frames[2].final_vector, truth);
    return tape.value(loss)[0];
  };

  // central difference on a handful of frame-0 eye pixels
  const double h = 1e-4;
  double max_grad = 0.0;
  for (std::int64_t idx : {std::int64_t(0), std::int64_t(20), std::int64_t(100)}) {
    const double saved = frames[0].eye_left[idx];
    frames[0].eye_left[idx] = saved + h;
    const double up = loss_at();
    frames[0].eye_left[idx] = saved - h;
    const double down = loss_at();
    frames[0].eye_left[idx] = saved;
    max_grad = std::max(max_grad, std::fabs((up - down) / (2 * h)));
  }
  CHECK(max_grad > 1e-10);
}

TEST_CASE("end-to-end gradient check on the miniature configuration") {
  // eye C=8, face C=4, 2x2 grid, D=12, H=2, L=1, hidden=12, T=2
  ModelConfig cfg = ModelConfig::mini();
  ParameterStore<double> store(67);
  StGazeModel<double> model(cfg, store);
  ScreenGeometry geom;
  const Vec3Cm origin{0, 5, 55};
  Rng rng(71);
  auto frames = random_frames(2, 8, rng);
  const GazeAngles truth0{0.15, -0.1};
  const GazeAngles truth1{-0.05, 0.2};
  const LossWeights weights{1.0, 0.01, 0.0};

  auto f = [&](Tape<double>& tape) {
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    Var l0 = build_frame_loss(tape, fwd.frames[0].final_vector, truth0, origin, geom, weights).total;
    Var l1 = build_frame_loss(tape, fwd.frames[1].final_vector, truth1, origin, geom, weights).total;
    return tape.scale(tape.add(l0, l1), 0.5);
  };
  auto res = grad_check(f, store);
  INFO("worst ", res.worst_param, " entries ", res.entries_checked);
  CHECK(res.max_rel_err < 1e-4);
}
