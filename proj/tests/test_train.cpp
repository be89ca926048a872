#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "stgaze/train.hpp"

using namespace stgaze;

namespace {

// Zero-gaze scene: range collapses to zero so every label is exactly (0, 0).
SceneParams zero_gaze_scene() {
  SceneParams p;
  p.gaze_range_deg = 1e-12;
  p.step_std_deg = 0.0;
  p.noise_std = 0.0;
  return p;
}

ModelConfig fast_tiny() {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.init_seed = 21;
  return cfg;
}

bool bits_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(lr_at(0, 100, 1e-3) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(100, 100, 1e-3) == doctest::Approx(0.0));
  CHECK(lr_at(50, 100, 1e-3) == doctest::Approx(0.5e-3).epsilon(1e-12));
  CHECK_THROWS_AS(lr_at(0, 0, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(-1, 10, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(11, 10, 1e-3), std::invalid_argument);

  SUBCASE("monotonically non-increasing") {
    double prev = lr_at(0, 977, 2e-4);
    for (int s = 1; s <= 977; ++s) {
      const double cur = lr_at(s, 977, 2e-4);
      CHECK(cur <= prev + 1e-18);
      prev = cur;
    }
  }
}

TEST_CASE("adam hand-evaluated first step") {
  ParameterStore<double> store;
  auto& w = store.create("w", {1}, Init::kZero);
  w.value[0] = 1.0;
  Adam<double> adam(store);
  w.grad[0] = 1.0;
  adam.step(1e-4);
  // m_hat = v_hat = 1 after bias correction; delta = -lr / (1 + eps)
  CHECK(w.value[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-10));
}

TEST_CASE("adam leaves parameters unchanged on zero gradient") {
  ParameterStore<double> store;
  auto& w = store.create("w", {3}, Init::kZero);
  w.value = Tensor<double>({3}, {1, 2, 3});
  Adam<double> adam(store);
  adam.step(0.1);
  CHECK(w.value[0] == 1.0);
  CHECK(w.value[1] == 2.0);
  CHECK(w.value[2] == 3.0);
}

TEST_CASE("adam: equal gradients keep parameters identical") {
  ParameterStore<double> store;
  auto& a = store.create("a", {1}, Init::kZero);
  auto& b = store.create("b", {1}, Init::kZero);
  a.value[0] = b.value[0] = 2.5;
  Adam<double> adam(store);
  Rng rng(5);
  for (int s = 0; s < 50; ++s) {
    const double g = rng.uniform(-1, 1);
    a.grad[0] = b.grad[0] = g;
    adam.step(0.01);
    CHECK(bits_equal(a.value[0], b.value[0]));
    a.grad[0] = b.grad[0] = 0.0;
  }
}

TEST_CASE("adam converges on the quadratic") {
  ParameterStore<double> store;
  auto& w = store.create("w", {2}, Init::kZero);
  w.value = Tensor<double>({2}, {5, 5});
  Adam<double> adam(store);
  for (int s = 0; s < 2000; ++s) {
    store.zero_grads();
    Tape<double> tape;
    Var wv = tape.param(w);
    tape.backward(tape.sum_all(tape.mul(wv, wv)));
    adam.step(0.05);
  }
  CHECK(std::sqrt(w.value[0] * w.value[0] + w.value[1] * w.value[1]) < 1e-2);
}

TEST_CASE("adam rejects non-finite gradients naming the parameter") {
  ParameterStore<double> store;
  auto& w = store.create("mlp.weight", {1}, Init::kZero);
  Adam<double> adam(store);
  w.grad[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam.step(1e-3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mlp.weight") != std::string::npos);
  }
}

TEST_CASE("gradient clipping") {
  ParameterStore<double> store;
  auto& w = store.create("w", {2}, Init::kZero);
  w.grad = Tensor<double>({2}, {30.0, 40.0});  // norm 50
  const double norm = clip_global_norm(store, 10.0);
  CHECK(norm == doctest::Approx(50.0));
  CHECK(w.grad[0] == doctest::Approx(6.0));
  CHECK(w.grad[1] == doctest::Approx(8.0));
  // disabled clip leaves gradients alone
  w.grad = Tensor<double>({2}, {30.0, 40.0});
  clip_global_norm(store, 0.0);
  CHECK(w.grad[1] == 40.0);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(TrainConfig{}.effective_base_lr() == doctest::Approx(1e-4));
  TrainConfig scaled;
  scaled.batch_size = 12;
  CHECK(scaled.effective_base_lr() == doctest::Approx(2e-4));
}

TEST_CASE("evaluate: perfect predictions and no label perturbation") {
  // Zero-weight model predicts exactly (0, 0); the zero-gaze scene labels are
  // exactly (0, 0). Any augmentation in evaluate would show as error.
  ModelConfig cfg = fast_tiny();
  ParameterStore<float> store(cfg.init_seed);
  StGazeModel<float> model(cfg, store);
  for (auto& p : store) p->value.zero();

  SyntheticSource data(zero_gaze_scene(), 3, 2, 2);
  ScreenGeometry geom;
  const BatchMetrics m = evaluate<float>(model, data, geom);
  CHECK(m.count == 4);
  CHECK(m.mean_angular_deg == doctest::Approx(0.0));
  CHECK(m.mean_pog_cm == doctest::Approx(0.0));

  SUBCASE("evaluate twice gives bit-identical metrics") {
    ParameterStore<float> store2(99);
    StGazeModel<float> model2(fast_tiny(), store2);
    SceneParams scene;
    scene.sequence_length = 2;
    SyntheticSource set(scene, 5, 3, 2);
    const BatchMetrics a = evaluate<float>(model2, set, geom);
    const BatchMetrics b = evaluate<float>(model2, set, geom);
    CHECK(bits_equal(a.mean_angular_deg, b.mean_angular_deg));
    CHECK(bits_equal(a.std_angular_deg, b.std_angular_deg));
    CHECK(bits_equal(a.mean_pog_cm, b.mean_pog_cm));
    CHECK(a.count == b.count);
  }
  SUBCASE("thread count does not change evaluate results") {
    ParameterStore<float> store2(17);
    StGazeModel<float> model2(fast_tiny(), store2);
    SceneParams scene;
    scene.sequence_length = 2;
    SyntheticSource set(scene, 5, 4, 2);
    const BatchMetrics a = evaluate<float>(model2, set, geom, 1);
    const BatchMetrics b = evaluate<float>(model2, set, geom, 2);
    CHECK(bits_equal(a.mean_angular_deg, b.mean_angular_deg));
    CHECK(bits_equal(a.mean_pog_cm, b.mean_pog_cm));
  }
}

TEST_CASE("offset augmentation is active only in training") {
  // On the zero-gaze scene a zero model is exact, so any training-time label
  // offset shows up in the train metric while the val metric stays at zero.
  ModelConfig mcfg = fast_tiny();
  ParameterStore<float> store(mcfg.init_seed);
  StGazeModel<float> model(mcfg, store);
  for (auto& p : store) p->value.zero();

  SyntheticSource train_set(zero_gaze_scene(), 31, 4, 2);
  SyntheticSource val_set(zero_gaze_scene(), 32, 2, 2);
  ScreenGeometry geom;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.base_lr = 1e-9;  // keep the model effectively frozen
  cfg.offset_std_deg = 10.0;
  cfg.grad_clip = 1e-6;
  auto result = train(model, store, train_set, val_set, geom, cfg);
  REQUIRE(result.epochs.size() == 1);
  CHECK(result.epochs[0].train_ang_deg > 2.0);   // sees offset labels
  CHECK(result.epochs[0].val_ang_deg < 0.5);     // evaluate never perturbs
}

TEST_CASE("seeded training is deterministic to the last bit") {
  auto run = [](int threads) {
    ModelConfig mcfg = fast_tiny();
    ParameterStore<float> store(mcfg.init_seed);
    StGazeModel<float> model(mcfg, store);
    SceneParams scene;
    scene.sequence_length = 2;
    SyntheticSource train_set(scene, 7, 4, 2);
    SyntheticSource val_set(scene, 8, 2, 2);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 2;
    cfg.base_lr = 1e-3;
    cfg.seed = 77;
    cfg.threads = threads;
    return train(model, store, train_set, val_set, ScreenGeometry{}, cfg);
  };
  const TrainResult a = run(1);
  const TrainResult b = run(1);
  CHECK(bits_equal(a.first_batch_loss, b.first_batch_loss));
  REQUIRE(a.epochs.size() == b.epochs.size());
  CHECK(bits_equal(a.epochs[0].train_loss, b.epochs[0].train_loss));
  CHECK(bits_equal(a.epochs[0].val_ang_deg, b.epochs[0].val_ang_deg));

  SUBCASE("two worker threads reduce in item order, bit-identical") {
    const TrainResult c = run(2);
    CHECK(bits_equal(a.first_batch_loss, c.first_batch_loss));
    CHECK(bits_equal(a.epochs[0].train_loss, c.epochs[0].train_loss));
    CHECK(bits_equal(a.epochs[0].val_ang_deg, c.epochs[0].val_ang_deg));
  }
}

TEST_CASE("loss decreases on a fixed batch for most seeds") {
  // 10 Adam steps of full-batch descent on two sequences; strict decrease in
  // at least 9 of 10 seeds. Adam's bias-corrected early steps act like sign
  // updates, so strict monotonicity needs a conservative rate; 2e-5 measured
  // 10/10 and is pinned here.
  SceneParams scene;
  scene.sequence_length = 2;
  scene.noise_std = 0.0;
  ScreenGeometry geom;
  const LossWeights weights;
  int monotone = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    ModelConfig mcfg = ModelConfig::tiny();
    mcfg.init_seed = seed * 3 + 1;
    ParameterStore<float> store(mcfg.init_seed);
    StGazeModel<float> model(mcfg, store);
    SyntheticSource batch(scene, seed, 2, 2);
    Adam<float> adam(store);

    auto batch_loss = [&](bool with_grad) {
      double total = 0.0;
      for (int i = 0; i < batch.size(); ++i) {
        Tape<float> tape;
        const SequenceSample sample = batch.sequence(i);
        Var loss = detail::sequence_loss(tape, model, sample, geom, weights, false, nullptr);
        total += tape.value(loss)[0];
        if (with_grad) tape.backward(loss);
      }
      return total / batch.size();
    };

    bool strict = true;
    double prev = batch_loss(false);
    for (int s = 0; s < 10; ++s) {
      store.zero_grads();
      batch_loss(true);
      for (auto& p : store) {
        for (std::int64_t i = 0; i < p->grad.numel(); ++i) {
          p->grad[i] /= static_cast<float>(batch.size());
        }
      }
      clip_global_norm(store, 10.0);
      adam.step(2e-5);
      const double cur = batch_loss(false);
      if (!(cur < prev)) strict = false;
      prev = cur;
    }
    monotone += strict ? 1 : 0;
  }
  INFO("monotone seeds: ", monotone);
  CHECK(monotone >= 9);
}

TEST_CASE("nan loss halts training and keeps the checkpoint") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "stgaze_train_halt";
  fs::remove_all(dir);

  ModelConfig mcfg = fast_tiny();
  ParameterStore<float> store(mcfg.init_seed);
  StGazeModel<float> model(mcfg, store);
  // poison one weight so the first forward produces NaN
  store.find("head.fc2.bias")->value[0] = std::numeric_limits<float>::quiet_NaN();

  SceneParams scene;
  scene.sequence_length = 2;
  SyntheticSource train_set(scene, 7, 2, 2);
  SyntheticSource val_set(scene, 8, 1, 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.out_dir = dir.string();
  auto result = train(model, store, train_set, val_set, ScreenGeometry{}, cfg);
  CHECK(result.halted_non_finite);
  CHECK(fs::exists(dir / "last.stgp"));
  fs::remove_all(dir);
}

TEST_CASE("empty training set is rejected") {
  ModelConfig mcfg = fast_tiny();
  ParameterStore<float> store(1);
  StGazeModel<float> model(mcfg, store);
  SceneParams scene;
  SyntheticSource empty(scene, 1, 0, 2);
  SyntheticSource val(scene, 2, 1, 2);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(model, store, empty, val, ScreenGeometry{}, cfg),
                  std::invalid_argument);
}
