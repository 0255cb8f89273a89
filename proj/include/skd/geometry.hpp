#pragma once

#include <array>
#include <vector>

namespace skd {

struct CameraIntrinsics {
  double fx = 100.0;
  double fy = 100.0;
  double cx = 32.0;
  double cy = 32.0;
};

// Oriented box in camera coordinates (+x right, +y down, +z forward).
// (x, y, z) is the geometric center; theta is yaw about +y.
struct Box3D {
  double x = 0, y = 0, z = 0;
  double h = 0, w = 0, l = 0;
  double theta = 0;
};

// Axis-aligned image box, pixels.
struct Box2D {
  double u_min = 0, v_min = 0, u_max = 0, v_max = 0;

  double width() const { return u_max - u_min; }
  double height() const { return v_max - v_min; }
  double center_u() const { return 0.5 * (u_min + u_max); }
  double center_v() const { return 0.5 * (v_min + v_max); }
  double area() const { return width() * height(); }
};

struct Vec2 {
  double x = 0, y = 0;
};
using Vec3 = std::array<double, 3>;

// Wraps to (-pi, pi].
double normalize_angle(double a);

// The 8 corners. Index bits: 4 -> +l/2 along heading, 2 -> +w/2 across, 1 -> +h/2.
std::array<Vec3, 8> box_corners(const Box3D& b);

// Axis-aligned hull of the projected corners. Throws ContractViolation if any
// corner has z <= 0. Not clipped to any image.
Box2D project_box3d_to_box2d(const Box3D& box, const CameraIntrinsics& cam);

// Ground-plane footprint as a counter-clockwise quad in (x, z).
std::array<Vec2, 4> bev_footprint(const Box3D& b);

double polygon_area(const std::vector<Vec2>& poly);
// Sutherland-Hodgman clip of `subject` by convex `clip` (both CCW).
std::vector<Vec2> clip_convex(const std::vector<Vec2>& subject, const std::vector<Vec2>& clip);

double bev_intersection_area(const Box3D& a, const Box3D& b);
double bev_iou(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

double iou_2d(const Box2D& a, const Box2D& b);

}  // namespace skd
