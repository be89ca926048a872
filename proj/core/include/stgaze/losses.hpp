#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "stgaze/geometry.hpp"
#include "stgaze/model.hpp"
#include "stgaze/tape.hpp"

namespace stgaze {

// Angular term in degrees, PoG terms in cm and px. lambda_px defaults to 0;
// the cm term keeps PoG a mild regularizer next to multi-degree errors.
struct LossWeights {
  double lambda_ang = 1.0;
  double lambda_cm = 0.01;
  double lambda_px = 0.0;

  void validate() const {
    if (lambda_ang < 0.0 || lambda_cm < 0.0 || lambda_px < 0.0) {
      throw std::invalid_argument("loss weights must be >= 0");
    }
    if (lambda_ang == 0.0 && lambda_cm == 0.0 && lambda_px == 0.0) {
      throw std::invalid_argument("loss weights must not all be zero");
    }
  }
};

inline double loss_total_from_components(double ang_deg, double pog_cm, double pog_px,
                                         const LossWeights& w) {
  return w.lambda_ang * ang_deg + w.lambda_cm * pog_cm + w.lambda_px * pog_px;
}

// The arccos argument is clamped to 1 - kAcosEps before evaluation, which
// bounds the gradient at convergence; within ~1e-6 rad of exact agreement the
// gradient is zero (the documented smoothing region).
inline constexpr double kAcosEps = 1e-7;

// Differentiable angular error in degrees between a unit gaze-vector var {3}
// and a fixed truth vector.
template <typename S>
Var angular_error_deg_var(Tape<S>& tape, Var unit_vec, const GazeVector& truth) {
  const double n = norm(truth);
  if (n == 0.0) throw std::invalid_argument("angular_error_deg_var: zero-norm truth");
  Var t = tape.constant(Tensor<S>({3}, {static_cast<S>(truth.x / n), static_cast<S>(truth.y / n),
                                        static_cast<S>(truth.z / n)}));
  Var dot = tape.sum_all(tape.mul(unit_vec, t));
  return tape.scale(tape.acos_clamped(dot, kAcosEps), 57.29577951308232);
}

template <typename S>
struct FrameLoss {
  Var total;              // weighted sum for this frame
  Var angular_deg;
  Var pog_cm;             // invalid when the predicted ray missed the plane
  Var pog_px;
  bool pog_hit = true;
};

// Builds the per-frame loss graph from the averaged prediction. When the
// predicted ray misses the screen plane the PoG terms are masked to zero and
// the miss is reported through `pog_hit`.
template <typename S>
FrameLoss<S> build_frame_loss(Tape<S>& tape, Var pred_unit_vec, const GazeAngles& truth,
                              const Vec3Cm& origin_cm, const ScreenGeometry& geom,
                              const LossWeights& weights) {
  FrameLoss<S> out;
  const GazeVector truth_vec = angles_to_vector(truth);
  out.angular_deg = angular_error_deg_var(tape, pred_unit_vec, truth_vec);
  Var total = tape.scale(out.angular_deg, weights.lambda_ang);

  const auto& pv = tape.value(pred_unit_vec);
  const bool hit = pv[2] * static_cast<S>(origin_cm.z) < S(0);
  PointCm truth_pog;
  const bool truth_hit = pog_cm(truth_vec, origin_cm, geom, &truth_pog);
  out.pog_hit = hit && truth_hit;
  if (out.pog_hit && (weights.lambda_cm > 0.0 || weights.lambda_px > 0.0)) {
    Var gx = tape.slice_rows(pred_unit_vec, 0, 1);
    Var gy = tape.slice_rows(pred_unit_vec, 1, 2);
    Var gz = tape.slice_rows(pred_unit_vec, 2, 3);
    Var s = tape.scale(tape.recip(gz), -origin_cm.z);
    Var hit_x = tape.add(tape.mul(s, gx), tape.scalar(origin_cm.x));
    Var hit_y = tape.add(tape.mul(s, gy), tape.scalar(origin_cm.y));
    // Screen x measures from the left edge; truth is already in screen space.
    Var dx_cm = tape.rsub_scalar(tape.add(hit_x, tape.scalar(geom.width_cm / 2.0)), truth_pog.x);
    Var dy_cm = tape.rsub_scalar(hit_y, truth_pog.y);
    Var dist2 = tape.add(tape.mul(dx_cm, dx_cm), tape.mul(dy_cm, dy_cm));
    out.pog_cm = tape.sqrt(dist2);
    Var dx_px = tape.scale(dx_cm, geom.px_per_cm_x());
    Var dy_px = tape.scale(dy_cm, geom.px_per_cm_y());
    out.pog_px = tape.sqrt(tape.add(tape.mul(dx_px, dx_px), tape.mul(dy_px, dy_px)));
    if (weights.lambda_cm > 0.0) total = tape.add(total, tape.scale(out.pog_cm, weights.lambda_cm));
    if (weights.lambda_px > 0.0) total = tape.add(total, tape.scale(out.pog_px, weights.lambda_px));
  }
  out.total = total;
  return out;
}

// Mean of per-frame scalars (the frame axis of "averaged over frames and
// batch items"; the item axis is averaged by the caller).
template <typename S>
Var mean_of(Tape<S>& tape, const std::vector<Var>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("mean_of: empty");
  Var acc = scalars[0];
  for (std::size_t i = 1; i < scalars.size(); ++i) acc = tape.add(acc, scalars[i]);
  return tape.scale(acc, 1.0 / static_cast<double>(scalars.size()));
}

// ---- evaluation metrics -------------------------------------------------------

// Aggregated over all frames of a batch; means are arithmetic, the angular
// std is the population standard deviation.
struct BatchMetrics {
  double mean_angular_deg = 0.0;
  double std_angular_deg = 0.0;
  double mean_pog_cm = 0.0;
  double mean_pog_px = 0.0;
  std::int64_t count = 0;
  std::int64_t pog_misses = 0;
};

// Streaming accumulator so two batches combine exactly like one.
class MetricsAccumulator {
 public:
  void add_frame(double angular_deg, bool pog_hit, double pog_cm_err, double pog_px_err) {
    ++count_;
    sum_ang_ += angular_deg;
    sum_ang2_ += angular_deg * angular_deg;
    if (pog_hit) {
      sum_cm_ += pog_cm_err;
      sum_px_ += pog_px_err;
    } else {
      ++misses_;
    }
  }

  void merge(const MetricsAccumulator& other) {
    count_ += other.count_;
    misses_ += other.misses_;
    sum_ang_ += other.sum_ang_;
    sum_ang2_ += other.sum_ang2_;
    sum_cm_ += other.sum_cm_;
    sum_px_ += other.sum_px_;
  }

  BatchMetrics finish() const {
    if (count_ == 0) throw std::invalid_argument("metrics: empty batch");
    BatchMetrics m;
    m.count = count_;
    m.pog_misses = misses_;
    m.mean_angular_deg = sum_ang_ / static_cast<double>(count_);
    const double var = sum_ang2_ / static_cast<double>(count_) -
                       m.mean_angular_deg * m.mean_angular_deg;
    m.std_angular_deg = std::sqrt(var > 0.0 ? var : 0.0);
    const std::int64_t hits = count_ - misses_;
    m.mean_pog_cm = hits > 0 ? sum_cm_ / static_cast<double>(hits) : 0.0;
    m.mean_pog_px = hits > 0 ? sum_px_ / static_cast<double>(hits) : 0.0;
    return m;
  }

 private:
  std::int64_t count_ = 0;
  std::int64_t misses_ = 0;
  double sum_ang_ = 0.0;
  double sum_ang2_ = 0.0;
  double sum_cm_ = 0.0;
  double sum_px_ = 0.0;
};

// Count-weighted combination of two aggregated results; equals aggregating
// the concatenated batches.
inline BatchMetrics combine(const BatchMetrics& a, const BatchMetrics& b) {
  const double n = static_cast<double>(a.count + b.count);
  if (n == 0.0) throw std::invalid_argument("metrics: empty combination");
  BatchMetrics m;
  m.count = a.count + b.count;
  m.pog_misses = a.pog_misses + b.pog_misses;
  const double sum_ang = a.mean_angular_deg * static_cast<double>(a.count) +
                         b.mean_angular_deg * static_cast<double>(b.count);
  const double sum_ang2 =
      (a.std_angular_deg * a.std_angular_deg + a.mean_angular_deg * a.mean_angular_deg) *
          static_cast<double>(a.count) +
      (b.std_angular_deg * b.std_angular_deg + b.mean_angular_deg * b.mean_angular_deg) *
          static_cast<double>(b.count);
  m.mean_angular_deg = sum_ang / n;
  const double var = sum_ang2 / n - m.mean_angular_deg * m.mean_angular_deg;
  m.std_angular_deg = std::sqrt(var > 0.0 ? var : 0.0);
  const std::int64_t hits_a = a.count - a.pog_misses;
  const std::int64_t hits_b = b.count - b.pog_misses;
  const std::int64_t hits = hits_a + hits_b;
  m.mean_pog_cm = hits > 0
                      ? (a.mean_pog_cm * static_cast<double>(hits_a) +
                         b.mean_pog_cm * static_cast<double>(hits_b)) / static_cast<double>(hits)
                      : 0.0;
  m.mean_pog_px = hits > 0
                      ? (a.mean_pog_px * static_cast<double>(hits_a) +
                         b.mean_pog_px * static_cast<double>(hits_b)) / static_cast<double>(hits)
                      : 0.0;
  return m;
}

}  // namespace stgaze
