#include "stgaze/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace stgaze {

GazeVector angles_to_vector(const GazeAngles& g) {
  const double cp = std::cos(g.pitch);
  return GazeVector{cp * std::sin(g.yaw), -std::sin(g.pitch), -cp * std::cos(g.yaw)};
}

GazeAngles vector_to_angles(const GazeVector& v) {
  const double y = std::clamp(v.y, -1.0, 1.0);
  return GazeAngles{-std::asin(y), std::atan2(v.x, -v.z)};
}

double norm(const GazeVector& v) { return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z); }

double angular_error_deg(const GazeVector& a, const GazeVector& b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) {
    throw std::invalid_argument("angular_error_deg: zero-norm gaze vector");
  }
  // Floating-point dot products of unit vectors can exceed 1 by ulps.
  const double d = std::clamp((a.x * b.x + a.y * b.y + a.z * b.z) / (na * nb), -1.0, 1.0);
  return rad_to_deg(std::acos(d));
}

double angular_error_deg(const GazeAngles& a, const GazeAngles& b) {
  return angular_error_deg(angles_to_vector(a), angles_to_vector(b));
}

bool pog_cm(const GazeVector& gaze, const Vec3Cm& origin_cm, const ScreenGeometry& geom,
            PointCm* out) {
  // Hit at positive ray parameter requires g_z and origin_z on opposite sides.
  if (gaze.z * origin_cm.z >= 0.0) return false;
  const double s = -origin_cm.z / gaze.z;
  const double hit_x = origin_cm.x + s * gaze.x;
  const double hit_y = origin_cm.y + s * gaze.y;
  if (out != nullptr) {
    out->x = hit_x + geom.width_cm / 2.0;
    out->y = hit_y;
  }
  return true;
}

PointPx pog_px(const PointCm& p, const ScreenGeometry& geom) {
  return PointPx{p.x * geom.px_per_cm_x(), p.y * geom.px_per_cm_y()};
}

}  // namespace stgaze
