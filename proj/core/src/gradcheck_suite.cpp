#include "stgaze/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <memory>

#include "stgaze/grad_check.hpp"
#include "stgaze/layers.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"

namespace stgaze {
namespace {

using Program = std::function<Var(Tape<double>&)>;
using Builder = std::function<Program(ParameterStore<double>&, Rng&)>;

Tensor<double> rand_t(Shape shape, Rng& rng, double lo = -0.9, double hi = 0.9) {
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

Parameter<double>& rand_param(ParameterStore<double>& store, const std::string& name, Shape shape,
                              Rng& rng, double lo = -0.9, double hi = 0.9) {
  auto& p = store.create(name, shape, Init::kZero);
  p.value = rand_t(std::move(shape), rng, lo, hi);
  return p;
}

void randomize(ParameterStore<double>& store, Rng& rng, double scale = 0.5) {
  for (auto& p : store) p->value = rand_t(p->value.shape(), rng, -scale, scale);
}

FamilyReport run_family(const std::string& name, int seeds, const Builder& build) {
  FamilyReport report;
  report.family = name;
  report.seeds = seeds;
  const auto start = std::chrono::steady_clock::now();
  for (int seed = 1; seed <= seeds; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) * 1299709 + 17);
    ParameterStore<double> store;
    Program f = build(store, rng);
    GradCheckResult res = grad_check(f, store);
    report.entries += res.entries_checked;
    if (res.max_rel_err > report.worst_rel_err) {
      report.worst_rel_err = res.max_rel_err;
      report.worst_param = res.worst_param;
    }
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// Micro end-to-end configuration: full wiring at the smallest shapes that
// still exercise every path (two conv stages, attention, two GRU layers, two
// frames of temporal threading).
ModelConfig micro_config() {
  ModelConfig c;
  c.eye.input_size = 8;
  c.eye.widths = {2, 4};
  c.face.input_size = 8;
  c.face.widths = {2, 2};
  c.sam.num_blocks = 1;
  c.sam.num_heads = 2;
  c.sam.ffn_hidden = 12;
  c.gru.hidden_dim = 6;
  c.head_hidden = 4;
  return c;
}

Builder full_model_builder(const ModelConfig& base) {
  return [base](ParameterStore<double>& store, Rng& rng) -> Program {
    ModelConfig cfg = base;
    auto model = std::make_shared<StGazeModel<double>>(cfg, store);
    randomize(store, rng);
    const int n = cfg.eye.input_size;
    auto frames = std::make_shared<std::vector<FrameInput<double>>>();
    for (int t = 0; t < 2; ++t) {
      frames->push_back(FrameInput<double>{rand_t({3, n, n}, rng, 0.0, 1.0),
                                           rand_t({3, n, n}, rng, 0.0, 1.0),
                                           rand_t({3, n, n}, rng, 0.0, 1.0)});
    }
    const GazeAngles truth0{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    const GazeAngles truth1{rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)};
    return [model, frames, truth0, truth1](Tape<double>& tape) {
      const ScreenGeometry geom;
      const Vec3Cm origin{0.0, 5.0, 55.0};
      const LossWeights weights{1.0, 0.01, 0.0};
      auto fwd = model->forward_model(tape, *frames, model->zero_state(), model->zero_state());
      Var l0 =
          build_frame_loss(tape, fwd.frames[0].final_vector, truth0, origin, geom, weights).total;
      Var l1 =
          build_frame_loss(tape, fwd.frames[1].final_vector, truth1, origin, geom, weights).total;
      return tape.scale(tape.add(l0, l1), 0.5);
    };
  };
}

}  // namespace

SuiteReport run_gradcheck_suite(GradcheckScale scale) {
  const auto start = std::chrono::steady_clock::now();
  SuiteReport report;
  const int seeds = 20;

  report.families.push_back(run_family("linear", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {3, 4}, rng);
    auto& w = rand_param(s, "w", {4, 2}, rng);
    auto& b = rand_param(s, "b", {2}, rng);
    return [&](Tape<double>& t) {
      Var y = t.bias_add(t.matmul(t.param(x), t.param(w)), t.param(b));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("conv2d", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {2, 4, 4}, rng);
    auto& w = rand_param(s, "w", {3, 2, 3, 3}, rng);
    auto& b = rand_param(s, "b", {3}, rng);
    return [&](Tape<double>& t) {
      Var y = t.conv2d(t.param(x), t.param(w), t.param(b), 2, 1, 1);
      Var y2 = t.conv2d(t.param(x), t.param(w), Var{}, 1, 0, 0);
      return t.add(t.sum_all(t.mul(y, y)), t.sum_all(t.mul(y2, y2)));
    };
  }));

  report.families.push_back(run_family("elementwise", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& a = rand_param(s, "a", {3, 3}, rng);
    auto& b = rand_param(s, "b", {3, 3}, rng);
    return [&](Tape<double>& t) {
      Var y = t.add(t.mul(t.param(a), t.param(b)), t.sub(t.param(a), t.scale(t.param(b), 0.7)));
      return t.sum_all(t.mul(y, t.rsub_scalar(y, 1.5)));
    };
  }));

  report.families.push_back(run_family("activations", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {2, 4}, rng);
    return [&](Tape<double>& t) {
      Var v = t.param(x);
      Var y = t.add(t.sigmoid(v), t.add(t.tanh(v), t.swish(v)));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("softmax", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {3, 4}, rng);
    return [&](Tape<double>& t) {
      Var y = t.softmax(t.param(x));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("layer_norm", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {3, 4}, rng);
    auto& g = rand_param(s, "gamma", {4}, rng);
    auto& b = rand_param(s, "beta", {4}, rng);
    return [&](Tape<double>& t) {
      Var y = t.layer_norm(t.param(x), t.param(g), t.param(b), 1e-5);
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("reductions", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& x = rand_param(s, "x", {2, 3, 4}, rng);
    return [&](Tape<double>& t) {
      Var v = t.param(x);
      Var m = t.mean_axis(t.mean_axis(v, 2), 1);
      Var norm = t.sqrt(t.add(t.sum_all(t.mul(m, m)), t.scalar(0.5)));
      return t.sum_all(t.mul_scalar_var(m, t.recip(norm)));
    };
  }));

  report.families.push_back(run_family("structural", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& a = rand_param(s, "a", {2, 3}, rng);
    auto& b = rand_param(s, "b", {2, 3}, rng);
    auto& c = rand_param(s, "c", {2, 3, 4}, rng);
    return [&](Tape<double>& t) {
      Var cat = t.concat({t.param(a), t.param(b)}, 0);
      Var sl = t.slice_rows(cat, 1, 3);
      Var sc = t.slice_cols(t.transpose2d(sl), 0, 2);
      Var flip = t.hflip(t.param(c));
      Var r = t.reshape(flip, {6, 4});
      return t.add(t.sum_all(t.mul(sc, sc)), t.sum_all(t.mul(r, r)));
    };
  }));

  report.families.push_back(run_family("eca", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto eca = std::make_shared<Eca<double>>(s, "eca", EcaConfig{4, 3});
    randomize(s, rng);
    auto& x = rand_param(s, "x", {4, 2, 2}, rng);
    return [eca, &x](Tape<double>& t) {
      Var y = eca->forward(t, t.param(x));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("mhsa", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto attn = std::make_shared<Mhsa<double>>(s, "attn", 4, 2);
    randomize(s, rng);
    auto& x = rand_param(s, "x", {3, 4}, rng);
    return [attn, &x](Tape<double>& t) {
      Var y = attn->forward(t, t.param(x));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("transformer_block", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    SamConfig cfg;
    cfg.seq_len = 3;
    cfg.dim = 4;
    cfg.num_heads = 2;
    cfg.ffn_hidden = 8;
    auto block = std::make_shared<TransformerBlock<double>>(s, "block", cfg);
    randomize(s, rng);
    auto& x = rand_param(s, "x", {3, 4}, rng);
    return [block, &x](Tape<double>& t) {
      Var y = block->forward(t, t.param(x));
      return t.sum_all(t.mul(y, y));
    };
  }));

  report.families.push_back(run_family("gru_cell", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    GruStackConfig cfg{3, 3, 1};
    auto gru = std::make_shared<GruStack<double>>(s, "gru", cfg);
    randomize(s, rng);
    auto& x = rand_param(s, "x", {1, 3}, rng);
    auto& h = rand_param(s, "h", {1, 3}, rng);
    return [gru, &x, &h](Tape<double>& t) {
      Var out = gru->step(t, t.param(x), t.param(h), 0);
      return t.sum_all(t.mul(out, out));
    };
  }));

  report.families.push_back(run_family("gru_stack", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    GruStackConfig cfg{2, 2, 2};
    auto gru = std::make_shared<GruStack<double>>(s, "gru", cfg);
    randomize(s, rng);
    auto& seq = rand_param(s, "seq", {4, 2}, rng);
    return [gru, &seq](Tape<double>& t) {
      auto [out, state] = gru->scan(t, t.param(seq), t.constant(Tensor<double>({2, 2})));
      return t.add(t.sum_all(t.mul(out, out)), t.sum_all(t.mul(state, state)));
    };
  }));

  report.families.push_back(run_family("regress_head", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto cfg = micro_config();
    auto model = std::make_shared<StGazeModel<double>>(cfg, s);
    randomize(s, rng);
    auto& z = rand_param(s, "z", {4, 6}, rng);
    return [model, &z](Tape<double>& t) {
      Var out = model->regress_head(t, t.param(z));
      return t.sum_all(t.mul(out, out));
    };
  }));

  report.families.push_back(run_family("angular_loss", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& pred = rand_param(s, "pred", {1, 2}, rng);
    const GazeVector truth = angles_to_vector({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)});
    return [&pred, truth](Tape<double>& t) {
      Var vec = StGazeModel<double>::angles_to_vector_var(t, t.param(pred));
      return angular_error_deg_var(t, vec, truth);
    };
  }));

  report.families.push_back(run_family("pog_loss", seeds, [](ParameterStore<double>& s, Rng& rng) -> Program {
    auto& pred = rand_param(s, "pred", {1, 2}, rng, /*lo=*/-0.4, /*hi=*/0.4);
    const GazeAngles truth{rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    return [&pred, truth](Tape<double>& t) {
      const ScreenGeometry geom;
      const Vec3Cm origin{0.0, 5.0, 55.0};
      Var vec = StGazeModel<double>::angles_to_vector_var(t, t.param(pred));
      auto loss = build_frame_loss(t, vec, truth, origin, geom, LossWeights{1.0, 0.01, 0.001});
      return loss.total;
    };
  }));

  report.families.push_back(run_family("full_model", seeds, full_model_builder(micro_config())));

  if (scale == GradcheckScale::kSmall) {
    report.families.push_back(run_family("full_model_mini", 5, full_model_builder(ModelConfig::mini())));
  }

  report.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace stgaze
