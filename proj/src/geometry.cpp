#include "skd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <tuple>

#include "skd/errors.hpp"

namespace skd {

double normalize_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::fmod(a, 2.0 * pi);
  if (a <= -pi) a += 2.0 * pi;
  if (a > pi) a -= 2.0 * pi;
  return a;
}

std::array<Vec3, 8> box_corners(const Box3D& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  std::array<Vec3, 8> out{};
  for (int k = 0; k < 8; ++k) {
    const double dl = (k & 4 ? 0.5 : -0.5) * b.l;
    const double dw = (k & 2 ? 0.5 : -0.5) * b.w;
    const double dh = (k & 1 ? 0.5 : -0.5) * b.h;
    out[k] = {b.x + dl * c + dw * s, b.y + dh, b.z - dl * s + dw * c};
  }
  return out;
}

Box2D project_box3d_to_box2d(const Box3D& box, const CameraIntrinsics& cam) {
  Box2D r{1e300, 1e300, -1e300, -1e300};
  for (const Vec3& p : box_corners(box)) {
    if (!(p[2] > 0.0)) throw ContractViolation("box corner behind the camera");
    const double u = cam.fx * p[0] / p[2] + cam.cx;
    const double v = cam.fy * p[1] / p[2] + cam.cy;
    r.u_min = std::min(r.u_min, u);
    r.u_max = std::max(r.u_max, u);
    r.v_min = std::min(r.v_min, v);
    r.v_max = std::max(r.v_max, v);
  }
  return r;
}

std::array<Vec2, 4> bev_footprint(const Box3D& b) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  // (x, z) with the corner ordering chosen so the quad is CCW in that plane.
  const std::array<std::pair<double, double>, 4> local{
      {{-hl, -hw}, {hl, -hw}, {hl, hw}, {-hl, hw}}};
  std::array<Vec2, 4> out{};
  for (int i = 0; i < 4; ++i) {
    const auto [dl, dw] = local[i];
    out[i] = {b.x + dl * c + dw * s, b.z - dl * s + dw * c};
  }
  // The yaw convention mirrors the plane, so fix orientation explicitly.
  double a2 = 0.0;
  for (int i = 0; i < 4; ++i) {
    const Vec2& p = out[i];
    const Vec2& q = out[(i + 1) % 4];
    a2 += p.x * q.y - q.x * p.y;
  }
  if (a2 < 0.0) std::reverse(out.begin(), out.end());
  return out;
}

double polygon_area(const std::vector<Vec2>& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return 0.0;
  double a2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % n];
    a2 += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::fabs(a2);
}

namespace {

double cross(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
}

Vec2 line_intersect(const Vec2& p, const Vec2& q, const Vec2& a, const Vec2& b) {
  const double cp = cross(a, b, p), cq = cross(a, b, q);
  const double t = cp / (cp - cq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

}  // namespace

std::vector<Vec2> clip_convex(const std::vector<Vec2>& subject, const std::vector<Vec2>& clip) {
  std::vector<Vec2> out = subject;
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !out.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % m];
    std::vector<Vec2> in;
    in.swap(out);
    for (std::size_t i = 0; i < in.size(); ++i) {
      const Vec2& p = in[i];
      const Vec2& q = in[(i + 1) % in.size()];
      const double cp = cross(a, b, p), cq = cross(a, b, q);
      const bool p_in = cp >= 0.0, q_in = cq >= 0.0;
      if (p_in) out.push_back(p);
      if (p_in != q_in) out.push_back(line_intersect(p, q, a, b));
    }
  }
  return out;
}

namespace {
bool box_key_less(const Box3D& a, const Box3D& b) {
  return std::tie(a.x, a.y, a.z, a.h, a.w, a.l, a.theta) <
         std::tie(b.x, b.y, b.z, b.h, b.w, b.l, b.theta);
}
}  // namespace

double bev_intersection_area(const Box3D& a_in, const Box3D& b_in) {
  // Clip in a canonical order so the result is exactly symmetric.
  const bool swap = box_key_less(b_in, a_in);
  const Box3D& a = swap ? b_in : a_in;
  const Box3D& b = swap ? a_in : b_in;
  const auto fa = bev_footprint(a);
  const auto fb = bev_footprint(b);
  // Cheap reject on circumscribed circles.
  const double ra = 0.5 * std::hypot(a.l, a.w), rb = 0.5 * std::hypot(b.l, b.w);
  if (std::hypot(a.x - b.x, a.z - b.z) > ra + rb) return 0.0;
  const std::vector<Vec2> pa(fa.begin(), fa.end()), pb(fb.begin(), fb.end());
  return polygon_area(clip_convex(pa, pb));
}

double bev_iou(const Box3D& a, const Box3D& b) {
  const double area_a = a.l * a.w, area_b = b.l * b.w;
  if (!(area_a > 0.0) || !(area_b > 0.0)) return 0.0;
  const double inter = bev_intersection_area(a, b);
  const double iou = inter / (area_a + area_b - inter);
  return std::clamp(iou, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  const double vol_a = a.l * a.w * a.h, vol_b = b.l * b.w * b.h;
  if (!(vol_a > 0.0) || !(vol_b > 0.0)) return 0.0;
  const double top = std::max(a.y - 0.5 * a.h, b.y - 0.5 * b.h);
  const double bottom = std::min(a.y + 0.5 * a.h, b.y + 0.5 * b.h);
  const double dy = bottom - top;
  if (dy <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dy;
  return std::clamp(inter / (vol_a + vol_b - inter), 0.0, 1.0);
}

double iou_2d(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.u_max, b.u_max) - std::max(a.u_min, b.u_min);
  const double ih = std::min(a.v_max, b.v_max) - std::max(a.v_min, b.v_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace skd
