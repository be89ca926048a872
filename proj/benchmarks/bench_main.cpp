#include <benchmark/benchmark.h>

#include "stgaze/layers.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"
#include "stgaze/synth.hpp"

using namespace stgaze;

namespace {

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  Tensor<float> x = Tensor<float>::uniform({3, 128, 128}, rng, 0, 1);
  Tensor<float> w = Tensor<float>::uniform({16, 3, 3, 3}, rng, -0.2, 0.2);
  Tensor<float> b = Tensor<float>::uniform({16}, rng, -0.1, 0.1);
  for (auto _ : state) {
    Tape<float> tape;
    Var y = tape.conv2d(tape.constant(x), tape.constant(w), tape.constant(b), 2, 1, 1);
    benchmark::DoNotOptimize(tape.value(y).data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_GruScanFullWidth(benchmark::State& state) {
  ParameterStore<float> store(2);
  GruStack<float> gru(store, "gru", GruStackConfig{160, 160, 2});
  Rng rng(3);
  Tensor<float> seq = Tensor<float>::uniform({64, 160}, rng, -1, 1);
  for (auto _ : state) {
    Tape<float> tape;
    auto [out, h] = gru.scan(tape, tape.constant(seq), tape.constant(Tensor<float>({2, 160})));
    benchmark::DoNotOptimize(tape.value(h).data());
  }
}
BENCHMARK(BM_GruScanFullWidth);

void BM_TransformerBlockFullWidth(benchmark::State& state) {
  SamConfig cfg;  // 64 x 160, 8 heads
  ParameterStore<float> store(4);
  TransformerBlock<float> block(store, "block", cfg);
  Rng rng(5);
  Tensor<float> y = Tensor<float>::uniform({64, 160}, rng, -1, 1);
  for (auto _ : state) {
    Tape<float> tape;
    Var out = block.forward(tape, tape.constant(y));
    benchmark::DoNotOptimize(tape.value(out).data());
  }
}
BENCHMARK(BM_TransformerBlockFullWidth);

void BM_TinyModelFrameForward(benchmark::State& state) {
  ModelConfig cfg = ModelConfig::tiny();
  ParameterStore<float> store(cfg.init_seed);
  StGazeModel<float> model(cfg, store);
  SceneParams scene;
  const SequenceSample sample = SyntheticSource(scene, 1, 1, 1).sequence(0);
  std::vector<FrameInput<float>> frames{
      FrameInput<float>{sample.eye_left[0], sample.eye_right[0], sample.face[0]}};
  for (auto _ : state) {
    Tape<float> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    benchmark::DoNotOptimize(fwd.frames[0].final_prediction.pitch);
  }
}
BENCHMARK(BM_TinyModelFrameForward);

void BM_TinyModelFrameTrainStep(benchmark::State& state) {
  ModelConfig cfg = ModelConfig::tiny();
  ParameterStore<float> store(cfg.init_seed);
  StGazeModel<float> model(cfg, store);
  SceneParams scene;
  const SequenceSample sample = SyntheticSource(scene, 1, 1, 1).sequence(0);
  std::vector<FrameInput<float>> frames{
      FrameInput<float>{sample.eye_left[0], sample.eye_right[0], sample.face[0]}};
  const ScreenGeometry geom;
  for (auto _ : state) {
    Tape<float> tape;
    auto fwd = model.forward_model(tape, frames, model.zero_state(), model.zero_state());
    Var loss = build_frame_loss(tape, fwd.frames[0].final_vector, sample.labels[0],
                                sample.origin_cm, geom, LossWeights{})
                   .total;
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.value(loss).data());
    store.zero_grads();
  }
}
BENCHMARK(BM_TinyModelFrameTrainStep);

void BM_RenderSequenceFrame(benchmark::State& state) {
  SceneParams scene;
  for (auto _ : state) {
    Tensor<float> eye = render_eye(GazeAngles{0.1, -0.2}, EyeSide::kLeft, scene, 7);
    benchmark::DoNotOptimize(eye.data());
  }
}
BENCHMARK(BM_RenderSequenceFrame);

}  // namespace

BENCHMARK_MAIN();
