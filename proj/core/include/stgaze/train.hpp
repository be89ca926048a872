#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "stgaze/checkpoint.hpp"
#include "stgaze/errors.hpp"
#include "stgaze/losses.hpp"
#include "stgaze/model.hpp"
#include "stgaze/synth.hpp"
#include "stgaze/tape.hpp"

namespace stgaze {

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename S>
class Adam {
 public:
  explicit Adam(ParameterStore<S>& store, AdamConfig cfg = {}) : store_(&store), cfg_(cfg) {
    m_.reserve(static_cast<std::size_t>(store.size()));
    v_.reserve(static_cast<std::size_t>(store.size()));
    for (auto& p : store) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  std::int64_t steps() const { return t_; }

  // Applies one update from the parameters' accumulated gradients. A
  // non-finite gradient aborts the step before any parameter changes.
  void step(double lr) {
    for (auto& p : *store_) {
      if (!p->trainable) continue;
      for (std::int64_t i = 0; i < p->grad.numel(); ++i) {
        if (!std::isfinite(static_cast<double>(p->grad[i]))) {
          throw NumericError("adam: non-finite gradient in parameter '" + p->name + "'");
        }
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& p : *store_) {
      if (!p->trainable) continue;
      auto& m = m_[static_cast<std::size_t>(p->id)];
      auto& v = v_[static_cast<std::size_t>(p->id)];
      const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
      for (std::int64_t i = 0; i < p->value.numel(); ++i) {
        const S g = p->grad[i];
        m[i] = b1 * m[i] + (S(1) - b1) * g;
        v[i] = b2 * v[i] + (S(1) - b2) * g * g;
        const double m_hat = static_cast<double>(m[i]) / bc1;
        const double v_hat = static_cast<double>(v[i]) / bc2;
        p->value[i] -= static_cast<S>(lr * m_hat / (std::sqrt(v_hat) + cfg_.eps));
      }
    }
  }

 private:
  ParameterStore<S>* store_;
  AdamConfig cfg_;
  std::vector<Tensor<S>> m_, v_;
  std::int64_t t_ = 0;
};

// Cosine annealing to zero: lr = 0.5 * base * (1 + cos(pi * step / total)).
inline double lr_at(std::int64_t step, std::int64_t total_steps, double base) {
  if (total_steps <= 0) throw std::invalid_argument("lr_at: total_steps must be >= 1");
  if (step < 0 || step > total_steps) throw std::invalid_argument("lr_at: step out of range");
  return 0.5 * base *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

// Rescales all gradients so the global norm is at most `max_norm`;
// returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename S>
double clip_global_norm(ParameterStore<S>& store, double max_norm) {
  double sq = 0.0;
  for (auto& p : store) {
    for (std::int64_t i = 0; i < p->grad.numel(); ++i) {
      sq += static_cast<double>(p->grad[i]) * static_cast<double>(p->grad[i]);
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const S s = static_cast<S>(max_norm / norm);
    for (auto& p : store) {
      for (std::int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= s;
    }
  }
  return norm;
}

// ---- training configuration ----------------------------------------------------

struct TrainConfig {
  int epochs = 4;
  int batch_size = 6;
  double base_lr = 1e-4;
  bool scale_lr_with_batch = true;  // effective base = base_lr * batch_size / 6
  double grad_clip = 10.0;          // global-norm clip; <= 0 disables
  double offset_std_deg = 3.0;      // training-only label offset augmentation
  bool per_stream_loss = false;     // also supervise the two stream predictions
  LossWeights weights;
  std::uint64_t seed = 7;
  int threads = 1;
  std::string out_dir;              // when set: metrics.jsonl, last.stgp, best.stgp

  double effective_base_lr() const {
    return scale_lr_with_batch ? base_lr * (static_cast<double>(batch_size) / 6.0) : base_lr;
  }

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
    if (base_lr <= 0.0) throw std::invalid_argument("train: base_lr must be > 0");
    weights.validate();
  }
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_ang_deg = 0.0;
  double val_ang_deg = 0.0;
  double val_pog_cm = 0.0;
  double wall_s = 0.0;

  std::string to_json() const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "{\"epoch\":%d,\"lr\":%.17g,\"train_loss\":%.17g,\"train_ang_deg\":%.17g,"
                  "\"val_ang_deg\":%.17g,\"val_pog_cm\":%.17g,\"wall_s\":%.3f}",
                  epoch, lr, train_loss, train_ang_deg, val_ang_deg, val_pog_cm, wall_s);
    return std::string(buf);
  }
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  bool halted_non_finite = false;
  int best_epoch = -1;
  double best_val_angular_deg = 0.0;
  double first_batch_loss = 0.0;  // loss of epoch 0, batch 0 (determinism probe)
};

namespace detail {

template <typename S>
std::vector<FrameInput<S>> to_inputs(const SequenceSample& sample) {
  std::vector<FrameInput<S>> frames;
  frames.reserve(static_cast<std::size_t>(sample.frames()));
  for (int t = 0; t < sample.frames(); ++t) {
    if constexpr (std::is_same_v<S, float>) {
      frames.push_back(FrameInput<S>{sample.eye_left[static_cast<std::size_t>(t)],
                                     sample.eye_right[static_cast<std::size_t>(t)],
                                     sample.face[static_cast<std::size_t>(t)]});
    } else {
      frames.push_back(
          FrameInput<S>{sample.eye_left[static_cast<std::size_t>(t)].template cast<S>(),
                        sample.eye_right[static_cast<std::size_t>(t)].template cast<S>(),
                        sample.face[static_cast<std::size_t>(t)].template cast<S>()});
    }
  }
  return frames;
}

// Forward + loss for one sequence on a fresh tape. Returns the scalar loss
// var; fills per-frame angular errors for metrics.
template <typename S>
Var sequence_loss(Tape<S>& tape, const StGazeModel<S>& model, const SequenceSample& sample,
                  const ScreenGeometry& geom, const LossWeights& weights, bool per_stream,
                  std::vector<double>* frame_ang_deg) {
  auto inputs = to_inputs<S>(sample);
  auto fwd = model.forward_model(tape, inputs, model.zero_state(), model.zero_state());
  std::vector<Var> frame_losses;
  frame_losses.reserve(fwd.frames.size());
  for (std::size_t t = 0; t < fwd.frames.size(); ++t) {
    const GazeAngles truth = sample.labels[t];
    auto loss = build_frame_loss(tape, fwd.frames[t].final_vector, truth, sample.origin_cm, geom,
                                 weights);
    Var frame_total = loss.total;
    if (per_stream) {
      const GazeVector tv = angles_to_vector(truth);
      Var left_vec = StGazeModel<S>::angles_to_vector_var(tape, fwd.frames[t].left_angles);
      Var right_vec = StGazeModel<S>::angles_to_vector_var(tape, fwd.frames[t].right_angles);
      Var stream_ang = tape.add(angular_error_deg_var(tape, left_vec, tv),
                                angular_error_deg_var(tape, right_vec, tv));
      frame_total = tape.add(frame_total,
                             tape.scale(stream_ang, 0.5 * weights.lambda_ang));
    }
    frame_losses.push_back(frame_total);
    if (frame_ang_deg != nullptr) {
      frame_ang_deg->push_back(static_cast<double>(tape.value(loss.angular_deg)[0]));
    }
  }
  return mean_of(tape, frame_losses);
}

// Runs fn(item) for item in [0, count) on `threads` workers; results must be
// written to per-item slots so reduction order never depends on scheduling.
inline void parallel_for_items(int count, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  const int workers = std::min(threads, count);
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// Deterministic evaluation: no augmentation, state zeroed per sequence.
// Item-indexed merge keeps the result identical for any thread count.
template <typename S>
BatchMetrics evaluate(const StGazeModel<S>& model, const SequenceSource& data,
                      const ScreenGeometry& geom, int threads = 1) {
  const int n = data.size();
  std::vector<MetricsAccumulator> slots(static_cast<std::size_t>(n));
  detail::parallel_for_items(n, threads, [&](int i) {
    const SequenceSample sample = data.sequence(i);
    Tape<S> tape;
    auto inputs = detail::to_inputs<S>(sample);
    auto fwd = model.forward_model(tape, inputs, model.zero_state(), model.zero_state());
    for (std::size_t t = 0; t < fwd.frames.size(); ++t) {
      const GazeAngles truth = sample.labels[t];
      const GazeAngles pred = fwd.frames[t].final_prediction.angles();
      const double ang = angular_error_deg(pred, truth);
      PointCm pred_pog, truth_pog;
      const bool hit =
          pog_cm(angles_to_vector(pred), sample.origin_cm, geom, &pred_pog) &&
          pog_cm(angles_to_vector(truth), sample.origin_cm, geom, &truth_pog);
      double err_cm = 0.0, err_px = 0.0;
      if (hit) {
        const double dx = pred_pog.x - truth_pog.x;
        const double dy = pred_pog.y - truth_pog.y;
        err_cm = std::sqrt(dx * dx + dy * dy);
        const double dxp = dx * geom.px_per_cm_x();
        const double dyp = dy * geom.px_per_cm_y();
        err_px = std::sqrt(dxp * dxp + dyp * dyp);
      }
      slots[static_cast<std::size_t>(i)].add_frame(ang, hit, err_cm, err_px);
    }
  });
  MetricsAccumulator acc;
  for (const auto& s : slots) acc.merge(s);
  return acc.finish();
}

// End-to-end training: seeded shuffle per epoch, per-sequence offset
// augmentation (training only), BPTT over each sequence from the zero state,
// Adam on cosine-annealed learning rate, best-by-validation checkpointing.
// Batch gradients reduce in item order, so any thread count is bit-identical
// to the single-threaded run.
template <typename S>
TrainResult train(StGazeModel<S>& model, ParameterStore<S>& store,
                  const SequenceSource& train_set, const SequenceSource& val_set,
                  const ScreenGeometry& geom, const TrainConfig& cfg,
                  const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() < 1) throw std::invalid_argument("train: empty training set");

  const int n = train_set.size();
  const int batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps =
      static_cast<std::int64_t>(batches_per_epoch) * cfg.epochs;
  const double eff_base = cfg.effective_base_lr();

  Adam<S> adam(store);
  TrainResult result;

  const bool to_disk = !cfg.out_dir.empty();
  std::ofstream metrics_log;
  if (to_disk) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_log.open((std::filesystem::path(cfg.out_dir) / "metrics.jsonl").string(),
                     std::ios::app);
    // A halt before the first epoch completes must still leave a checkpoint.
    save_checkpoint(store, (std::filesystem::path(cfg.out_dir) / "last.stgp").string());
  }

  std::int64_t global_step = 0;
  bool first_batch_recorded = false;
  for (int epoch = 0; epoch < cfg.epochs && !result.halted_non_finite; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch));

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(epoch_seed, 0));
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<int>(shuffle_rng.uniform_index(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    MetricsAccumulator train_metrics;

    for (int b = 0; b < batches_per_epoch && !result.halted_non_finite; ++b) {
      const int begin = b * cfg.batch_size;
      const int end = std::min(n, begin + cfg.batch_size);
      const int items = end - begin;

      std::vector<ParamGrads<S>> item_grads(static_cast<std::size_t>(items));
      std::vector<double> item_loss(static_cast<std::size_t>(items), 0.0);
      std::vector<std::vector<double>> item_ang(static_cast<std::size_t>(items));

      detail::parallel_for_items(items, cfg.threads, [&](int k) {
        const int idx = order[static_cast<std::size_t>(begin + k)];
        SequenceSample sample = train_set.sequence(idx);
        // One offset per sequence occurrence; the stream is keyed by the
        // epoch and the slot, so threading cannot reorder draws.
        if (cfg.offset_std_deg > 0.0) {
          Rng aug_rng(derive_seed(epoch_seed, 1000 + static_cast<std::uint64_t>(begin + k)));
          offset_augment(sample, cfg.offset_std_deg, aug_rng);
        }
        Tape<S> tape;
        Var loss = detail::sequence_loss(tape, model, sample, geom, cfg.weights,
                                         cfg.per_stream_loss,
                                         &item_ang[static_cast<std::size_t>(k)]);
        item_loss[static_cast<std::size_t>(k)] = static_cast<double>(tape.value(loss)[0]);
        tape.backward(loss, item_grads[static_cast<std::size_t>(k)]);
      });

      double batch_loss = 0.0;
      for (int k = 0; k < items; ++k) {
        batch_loss += item_loss[static_cast<std::size_t>(k)];
        for (double a : item_ang[static_cast<std::size_t>(k)]) {
          train_metrics.add_frame(a, true, 0.0, 0.0);
        }
      }
      batch_loss /= static_cast<double>(items);
      if (!first_batch_recorded) {
        result.first_batch_loss = batch_loss;
        first_batch_recorded = true;
      }
      if (!std::isfinite(batch_loss)) {
        result.halted_non_finite = true;
        break;
      }
      loss_sum += batch_loss;
      ++loss_count;

      store.zero_grads();
      for (int k = 0; k < items; ++k) {
        item_grads[static_cast<std::size_t>(k)].reduce_into(store,
                                                            S(1) / static_cast<S>(items));
      }
      clip_global_norm(store, cfg.grad_clip);
      try {
        adam.step(lr_at(global_step, total_steps, eff_base));
      } catch (const NumericError&) {
        result.halted_non_finite = true;
        break;
      }
      ++global_step;
    }

    if (result.halted_non_finite) break;

    const BatchMetrics val =
        val_set.size() > 0 ? evaluate<S>(model, val_set, geom, cfg.threads) : BatchMetrics{};
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at(std::min(global_step, total_steps), total_steps, eff_base);
    rec.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.train_ang_deg = train_metrics.finish().mean_angular_deg;
    rec.val_ang_deg = val.mean_angular_deg;
    rec.val_pog_cm = val.mean_pog_cm;
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                     .count();
    result.epochs.push_back(rec);

    if (to_disk) {
      metrics_log << rec.to_json() << "\n";
      metrics_log.flush();
      save_checkpoint(store, (std::filesystem::path(cfg.out_dir) / "last.stgp").string());
    }
    if (result.best_epoch < 0 || rec.val_ang_deg < result.best_val_angular_deg) {
      result.best_epoch = epoch;
      result.best_val_angular_deg = rec.val_ang_deg;
      if (to_disk) {
        save_checkpoint(store, (std::filesystem::path(cfg.out_dir) / "best.stgp").string());
      }
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace stgaze
