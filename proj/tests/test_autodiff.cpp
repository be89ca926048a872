#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "stgaze/checkpoint.hpp"
#include "stgaze/grad_check.hpp"
#include "stgaze/tape.hpp"
#include "test_support.hpp"

using namespace stgaze;
using stgaze::test::conv2d_oracle;
using stgaze::test::max_abs_diff;
using stgaze::test::random_tensor;

TEST_CASE("tensor invariants") {
  Tensor<double> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1.0, 2.0}), std::invalid_argument);
  // row-major layout: flat index of (i, j) is i * cols + j
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  CHECK(m.at(0, 1) == 2);
  CHECK(m.at(1, 0) == 3);
}

TEST_CASE("conv2d identity kernel") {
  Tape<double> tape;
  Var x = tape.constant(Tensor<double>::full({1, 3, 3}, 1.0));
  Var w = tape.constant(Tensor<double>({1, 1, 1, 1}, {1.0}));
  Var b = tape.constant(Tensor<double>({1}, {0.0}));
  Var y = tape.conv2d(x, w, b, 1, 0, 0);
  CHECK(tape.value(y).shape() == Shape{1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) CHECK(tape.value(y)[i] == doctest::Approx(1.0));
}

TEST_CASE("conv2d sum kernel") {
  Tape<double> tape;
  Var x = tape.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  Var w = tape.constant(Tensor<double>::full({1, 1, 2, 2}, 1.0));
  Var b = tape.constant(Tensor<double>({1}, {0.0}));
  Var y = tape.conv2d(x, w, b, 1, 0, 0);
  CHECK(tape.value(y).shape() == Shape{1, 1, 1});
  CHECK(tape.value(y)[0] == doctest::Approx(10.0));
}

TEST_CASE("conv2d strided vs nested-loop oracle") {
  Rng rng(11);
  Tensor<double> in = random_tensor({1, 4, 4}, rng);
  Tensor<double> w = random_tensor({1, 1, 3, 3}, rng);
  Tape<double> tape;
  Var y = tape.conv2d(tape.constant(in), tape.constant(w),
                      tape.constant(Tensor<double>({1}, {0.25})), 2, 1, 1);
  CHECK(tape.value(y).shape() == Shape{1, 2, 2});
  Tensor<double> want = conv2d_oracle(in, w, {0.25}, 2, 1, 1);
  CHECK(max_abs_diff(tape.value(y), want) < 1e-12);
}

TEST_CASE("conv2d randomized shapes vs oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int c_in = 1 + static_cast<int>(rng.uniform_index(3));
    const int c_out = 1 + static_cast<int>(rng.uniform_index(3));
    const int kh = 1 + static_cast<int>(rng.uniform_index(3));
    const int kw = 1 + static_cast<int>(rng.uniform_index(3));
    const int h = kh + static_cast<int>(rng.uniform_index(4));
    const int w = kw + static_cast<int>(rng.uniform_index(4));
    const int stride = 1 + static_cast<int>(rng.uniform_index(2));
    const int ph = static_cast<int>(rng.uniform_index(2));
    const int pw = static_cast<int>(rng.uniform_index(2));
    Tensor<double> in = random_tensor({c_in, h, w}, rng);
    Tensor<double> kernel = random_tensor({c_out, c_in, kh, kw}, rng);
    std::vector<double> bias;
    for (int i = 0; i < c_out; ++i) bias.push_back(rng.uniform(-1, 1));
    Tape<double> tape;
    Var y = tape.conv2d(tape.constant(in), tape.constant(kernel),
                        tape.constant(Tensor<double>({c_out}, bias)), stride, ph, pw);
    CHECK(max_abs_diff(tape.value(y), conv2d_oracle(in, kernel, bias, stride, ph, pw)) < 1e-12);
  }
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tape<double> tape;
  Var x = tape.constant(Tensor<double>::full({2, 3, 3}, 1.0));
  Var w = tape.constant(Tensor<double>::full({1, 3, 2, 2}, 1.0));
  CHECK_THROWS_AS(tape.conv2d(x, w, Var{}, 1, 0, 0), std::invalid_argument);
}

TEST_CASE("softmax values") {
  Tape<double> tape;

  SUBCASE("uniform") {
    Var y = tape.softmax(tape.constant(Tensor<double>({3}, {0, 0, 0})));
    for (int i = 0; i < 3; ++i) CHECK(tape.value(y)[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }
  SUBCASE("large inputs stay finite via max subtraction") {
    Var y = tape.softmax(tape.constant(Tensor<double>({3}, {1000, 0, 0})));
    CHECK(std::isfinite(tape.value(y)[0]));
    CHECK(tape.value(y)[0] == doctest::Approx(1.0));
    CHECK(tape.value(y)[1] == doctest::Approx(0.0));
  }
  SUBCASE("hand-evaluated") {
    Var y = tape.softmax(tape.constant(Tensor<double>({3}, {1, 2, 3})));
    CHECK(tape.value(y)[0] == doctest::Approx(0.09003057).epsilon(1e-7));
    CHECK(tape.value(y)[1] == doctest::Approx(0.24472847).epsilon(1e-7));
    CHECK(tape.value(y)[2] == doctest::Approx(0.66524096).epsilon(1e-7));
  }
}

TEST_CASE("softmax slices sum to one and lie in (0, 1]") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 1 + static_cast<int>(rng.uniform_index(4));
    const int cols = 1 + static_cast<int>(rng.uniform_index(4));
    Tape<double> tape;
    Var y = tape.softmax(tape.constant(random_tensor({rows, cols}, rng, -30, 30)));
    for (int i = 0; i < rows; ++i) {
      double sum = 0.0;
      for (int j = 0; j < cols; ++j) {
        const double v = tape.value(y).at(i, j);
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
        sum += v;
      }
      CHECK(std::fabs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm values") {
  Tape<double> tape;
  Var gamma1 = tape.constant(Tensor<double>::full({4}, 1.0));
  Var beta0 = tape.constant(Tensor<double>({4}));

  SUBCASE("constant slice maps to zero") {
    Var y = tape.layer_norm(tape.constant(Tensor<double>({4}, {5, 5, 5, 5})), gamma1, beta0, 1e-5);
    for (int i = 0; i < 4; ++i) CHECK(std::fabs(tape.value(y)[i]) < 1e-9);
  }
  SUBCASE("already normalized slice is preserved as eps -> 0") {
    Var g = tape.constant(Tensor<double>::full({2}, 1.0));
    Var b = tape.constant(Tensor<double>({2}));
    Var y = tape.layer_norm(tape.constant(Tensor<double>({2}, {-1, 1})), g, b, 1e-12);
    CHECK(tape.value(y)[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(tape.value(y)[1] == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("hand-evaluated with gamma=2, beta=1") {
    Var g = tape.constant(Tensor<double>::full({4}, 2.0));
    Var b = tape.constant(Tensor<double>::full({4}, 1.0));
    Var y = tape.layer_norm(tape.constant(Tensor<double>({4}, {1, 2, 3, 4})), g, b, 1e-5);
    CHECK(tape.value(y)[0] == doctest::Approx(-1.6833).epsilon(1e-4));
    CHECK(tape.value(y)[1] == doctest::Approx(0.1056).epsilon(1e-3));
    CHECK(tape.value(y)[2] == doctest::Approx(1.8944).epsilon(1e-4));
    CHECK(tape.value(y)[3] == doctest::Approx(3.6833).epsilon(1e-4));
  }
}

TEST_CASE("layer_norm normalizes mean and variance") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 8;
    Tape<double> tape;
    Var g = tape.constant(Tensor<double>::full({d}, 1.0));
    Var b = tape.constant(Tensor<double>({d}));
    Var y = tape.layer_norm(tape.constant(random_tensor({d}, rng, -10, 10)), g, b, 1e-9);
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < d; ++i) mean += tape.value(y)[i];
    mean /= d;
    for (int i = 0; i < d; ++i) {
      var += (tape.value(y)[i] - mean) * (tape.value(y)[i] - mean);
    }
    var /= d;
    CHECK(std::fabs(mean) < 1e-6);
    CHECK(std::fabs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("root = sum(w) gives all-ones gradient") {
    ParameterStore<double> store;
    auto& w = store.create("w", {3}, Init::kZero);
    w.value = Tensor<double>({3}, {1, -2, 5});
    Tape<double> tape;
    tape.backward(tape.sum_all(tape.param(w)));
    for (int i = 0; i < 3; ++i) CHECK(w.grad[i] == doctest::Approx(1.0));
  }
  SUBCASE("root = sum(w * w) gives 2w") {
    ParameterStore<double> store;
    auto& w = store.create("w", {3}, Init::kZero);
    w.value = Tensor<double>({3}, {1, -2, 5});
    Tape<double> tape;
    Var wv = tape.param(w);
    tape.backward(tape.sum_all(tape.mul(wv, wv)));
    for (int i = 0; i < 3; ++i) CHECK(w.grad[i] == doctest::Approx(2.0 * w.value[i]));
  }
  SUBCASE("gradients accumulate until zeroed") {
    ParameterStore<double> store;
    auto& w = store.create("w", {2}, Init::kZero);
    w.value = Tensor<double>({2}, {3, 4});
    for (int pass = 0; pass < 2; ++pass) {
      Tape<double> tape;
      tape.backward(tape.sum_all(tape.param(w)));
    }
    CHECK(w.grad[0] == doctest::Approx(2.0));
    store.zero_grads();
    CHECK(w.grad[0] == 0.0);
  }
  SUBCASE("non-scalar root is rejected") {
    Tape<double> tape;
    Var x = tape.constant(Tensor<double>({2}, {1, 2}));
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
}

TEST_CASE("grad_check validates its own inputs") {
  ParameterStore<double> store;
  auto& w = store.create("w", {2}, Init::kZero);
  w.value = Tensor<double>({2}, {1, 2});
  auto f = [&](Tape<double>& tape) {
    Var wv = tape.param(w);
    return tape.sum_all(tape.mul(wv, wv));
  };
  SUBCASE("polynomial is exact to O(h^2)") {
    auto res = grad_check(f, store);
    CHECK(res.max_rel_err < 1e-8);
  }
  SUBCASE("h = 0 is rejected") { CHECK_THROWS_AS(grad_check(f, store, 0.0), std::invalid_argument); }
}

TEST_CASE("grad_check detects a wrong gradient") {
  // Simulates a broken backward rule: the graph routes half of the product
  // through a constant snapshot, so the analytic gradient misses one term of
  // the product rule while finite differences see the true function.
  ParameterStore<double> store;
  auto& w = store.create("w", {3}, Init::kZero);
  w.value = Tensor<double>({3}, {0.7, -1.2, 2.0});
  auto broken = [&](Tape<double>& tape) {
    Var wv = tape.param(w);
    Var frozen = tape.constant(w.value);  // snapshots the perturbed value
    return tape.sum_all(tape.mul(wv, frozen));
  };
  auto res = grad_check(broken, store);
  CHECK(res.max_rel_err > 1e-2);
}

namespace {

// Randomized gradient property for one primitive; 20 seeds, shapes <= 4 per
// dimension, 64-bit, h = 1e-5, rel_err < 1e-4.
template <typename BuildFn>
void check_primitive_gradients(const char* name, int param_count,
                               const std::vector<Shape>& shapes, BuildFn build) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed * 7919);
    ParameterStore<double> store;
    std::vector<Parameter<double>*> params;
    for (int i = 0; i < param_count; ++i) {
      auto& p = store.create(std::string(name) + "_p" + std::to_string(i),
                             shapes[static_cast<std::size_t>(i)], Init::kZero);
      p.value = random_tensor(shapes[static_cast<std::size_t>(i)], rng, -0.9, 0.9);
      params.push_back(&p);
    }
    auto f = [&](Tape<double>& tape) { return build(tape, params); };
    auto res = grad_check(f, store);
    INFO(name, " seed ", seed, " worst ", res.worst_param, " rel_err ", res.max_rel_err);
    CHECK(res.max_rel_err < 1e-4);
  }
}

}  // namespace

TEST_CASE("primitive gradients match finite differences") {
  using P = std::vector<Parameter<double>*>;

  check_primitive_gradients("add_mul_sub", 2, {{3, 4}, {3, 4}},
                            [](Tape<double>& t, const P& p) {
                              Var a = t.param(*p[0]);
                              Var b = t.param(*p[1]);
                              Var y = t.add(t.mul(a, b), t.sub(a, t.scale(b, 0.3)));
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("activations", 1, {{2, 3}},
                            [](Tape<double>& t, const P& p) {
                              Var x = t.param(*p[0]);
                              Var y = t.add(t.sigmoid(x), t.add(t.tanh(x), t.swish(x)));
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("trig_and_rsub", 1, {{4}},
                            [](Tape<double>& t, const P& p) {
                              Var x = t.param(*p[0]);
                              Var y = t.add(t.sin(x), t.mul(t.cos(x), t.rsub_scalar(x, 2.0)));
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("matmul", 2, {{3, 4}, {4, 2}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.matmul(t.param(*p[0]), t.param(*p[1]));
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("matmul_nt_bias", 3, {{3, 4}, {2, 4}, {2}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.matmul_nt(t.param(*p[0]), t.param(*p[1]));
                              return t.sum_all(t.bias_add(y, t.param(*p[2])));
                            });

  check_primitive_gradients("conv2d", 3, {{2, 4, 4}, {3, 2, 3, 3}, {3}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.conv2d(t.param(*p[0]), t.param(*p[1]), t.param(*p[2]), 2,
                                               1, 1);
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("softmax", 1, {{3, 4}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.softmax(t.param(*p[0]));
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("layer_norm", 3, {{3, 4}, {4}, {4}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.layer_norm(t.param(*p[0]), t.param(*p[1]), t.param(*p[2]),
                                                   1e-5);
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("mean_axis_all_ranks", 1, {{2, 3, 4}},
                            [](Tape<double>& t, const P& p) {
                              Var x = t.param(*p[0]);
                              Var m2 = t.mean_axis(x, 2);  // (2,3)
                              Var m1 = t.mean_axis(m2, 0); // (3)
                              Var m0 = t.mean_axis(m1, 0); // (1)
                              Var flat = t.mean_axis(t.mean_axis(x, 1), 1);  // (2)
                              return t.add(t.sum_all(t.mul(flat, flat)), t.mul(m0, m0));
                            });

  check_primitive_gradients("concat_slice", 2, {{2, 3}, {2, 3}},
                            [](Tape<double>& t, const P& p) {
                              Var a = t.param(*p[0]);
                              Var b = t.param(*p[1]);
                              Var cat0 = t.concat({a, b}, 0);            // (4,3)
                              Var cat1 = t.concat({a, b}, 1);            // (2,6)
                              Var s = t.slice_rows(cat0, 1, 3);          // (2,3)
                              Var c = t.slice_cols(cat1, 2, 5);          // (2,3)
                              Var y = t.mul(s, c);
                              return t.sum_all(t.mul(y, y));
                            });

  check_primitive_gradients("transpose_reshape_hflip", 1, {{2, 3, 4}},
                            [](Tape<double>& t, const P& p) {
                              Var x = t.param(*p[0]);
                              Var f = t.hflip(x);
                              Var r = t.reshape(f, {2, 12});
                              Var tr = t.transpose2d(r);  // (12,2)
                              return t.sum_all(t.mul(tr, tr));
                            });

  check_primitive_gradients("scale_channels_scalar_ops", 2, {{3, 2, 2}, {3}},
                            [](Tape<double>& t, const P& p) {
                              Var y = t.scale_channels(t.param(*p[0]), t.sigmoid(t.param(*p[1])));
                              Var total = t.sum_all(t.mul(y, y));
                              Var s = t.sqrt(t.add(total, t.scalar(1.0)));
                              return t.mul_scalar_var(s, t.recip(s));  // exercises both ops
                            });

  check_primitive_gradients("acos_clamped", 1, {{3}},
                            [](Tape<double>& t, const P& p) {
                              Var x = t.scale(t.tanh(t.param(*p[0])), 0.9);
                              return t.sum_all(t.acos_clamped(x, 1e-7));
                            });
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(99);
  Tensor<double> in = random_tensor({2, 4, 4}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  auto run = [&]() {
    Tape<double> tape;
    Var y = tape.conv2d(tape.constant(in), tape.constant(w), Var{}, 1, 1, 1);
    Var z = tape.softmax(tape.reshape(y, {3, 16}));
    return tape.value(tape.sum_all(tape.mul(z, z)))[0];
  };
  const double a = run();
  const double b = run();
  CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto build_store = [](ParameterStore<float>& store) -> void {
    Rng rng(4242);
    store.create("enc.w", {4, 3, 3, 3}, Init::kFanIn, 27);
    store.create("enc.b", {4}, Init::kFanIn, 27);
    store.create("head.weight", {8, 2}, Init::kFanIn, 8);
  };
  ParameterStore<float> a(123);
  build_store(a);

  std::ostringstream out1;
  save_checkpoint(a, out1);

  ParameterStore<float> b(999);  // different init, overwritten by load
  build_store(b);
  std::istringstream in1(out1.str());
  load_checkpoint(b, in1);
  std::ostringstream out2;
  save_checkpoint(b, out2);
  CHECK(out1.str() == out2.str());

  SUBCASE("bad magic names offset 0") {
    std::string corrupt = out1.str();
    corrupt[0] = 'X';
    std::istringstream bad(corrupt);
    ParameterStore<float> c(1);
    build_store(c);
    try {
      load_checkpoint(c, bad);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("shape mismatch names the parameter") {
    ParameterStore<float> c(1);
    Rng rng(1);
    c.create("enc.w", {4, 3, 3, 3}, Init::kFanIn, 27);
    c.create("enc.b", {5}, Init::kFanIn, 27);  // wrong shape
    c.create("head.weight", {8, 2}, Init::kFanIn, 8);
    std::istringstream in2(out1.str());
    try {
      load_checkpoint(c, in2);
      FAIL("expected CheckpointMismatch");
    } catch (const CheckpointMismatch& e) {
      CHECK(e.parameter() == "enc.b");
    }
  }
  SUBCASE("truncation reports an offset") {
    std::string cut = out1.str().substr(0, 40);
    std::istringstream bad(cut);
    ParameterStore<float> c(1);
    build_store(c);
    CHECK_THROWS_AS(load_checkpoint(c, bad), FormatError);
  }
}

TEST_CASE("duplicate parameter names are rejected") {
  ParameterStore<double> store;
  store.create("w", {2}, Init::kZero);
  CHECK_THROWS_AS(store.create("w", {2}, Init::kZero), std::invalid_argument);
}
