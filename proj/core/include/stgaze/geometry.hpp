#pragma once

#include <utility>

namespace stgaze {

// Camera frame convention used throughout: x right, y down, z forward away
// from the camera. Screen-directed gaze has negative z. Positive pitch looks
// up, positive yaw looks toward the subject's left (camera-frame +x).
struct GazeAngles {
  double pitch = 0.0;  // radians
  double yaw = 0.0;    // radians
};

struct GazeVector {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// Screen plane is z = 0 with the camera at the top-centre of the screen.
// x_cm runs from the screen's left edge, y_cm downward from the top edge.
struct ScreenGeometry {
  double width_cm = 60.0;
  double height_cm = 33.75;
  int width_px = 1920;
  int height_px = 1080;

  double px_per_cm_x() const { return width_px / width_cm; }
  double px_per_cm_y() const { return height_px / height_cm; }
};

struct PointCm {
  double x = 0.0;
  double y = 0.0;
};

struct PointPx {
  double x = 0.0;
  double y = 0.0;
};

struct Vec3Cm {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

// v = (cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw)); unit by
// construction.
GazeVector angles_to_vector(const GazeAngles& g);

// pitch = -asin(y), yaw = atan2(x, -z); exact inverse of angles_to_vector on
// its range. Near cos(pitch) = 0 the yaw falls back to atan2's convention.
GazeAngles vector_to_angles(const GazeVector& v);

double norm(const GazeVector& v);

// arccos of the clamped normalized dot product, in degrees. Throws
// std::invalid_argument on zero-norm input.
double angular_error_deg(const GazeVector& a, const GazeVector& b);
double angular_error_deg(const GazeAngles& a, const GazeAngles& b);

// Intersects the ray (origin, direction) with the screen plane. Returns false
// when the ray is parallel to the plane or points away from it.
bool pog_cm(const GazeVector& gaze, const Vec3Cm& origin_cm, const ScreenGeometry& geom,
            PointCm* out);

PointPx pog_px(const PointCm& p, const ScreenGeometry& geom);

inline double deg_to_rad(double d) { return d * 0.017453292519943295; }
inline double rad_to_deg(double r) { return r * 57.29577951308232; }

}  // namespace stgaze
