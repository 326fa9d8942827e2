#pragma once

#include "matchkit/common.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace matchkit {

struct DegenerateWarp : Error {
  using Error::Error;
};
struct InvalidDepth : Error {
  using Error::Error;
};
struct BehindCamera : Error {
  using Error::Error;
};
struct ZeroTranslation : Error {
  using Error::Error;
};
struct EmptyInput : Error {
  using Error::Error;
};

constexpr double kDegPerRad = 180.0 / 3.14159265358979323846;

struct Homography {
  Mat3 h = Mat3::Identity();

  // Scale so h(2,2) = 1 whenever that entry is usable; keeps serialized
  // matrices comparable across estimators.
  Homography normalized() const {
    Homography out{h};
    if (std::abs(h(2, 2)) > 1e-12) out.h /= h(2, 2);
    return out;
  }

  Homography inverse() const {
    if (std::abs(h.determinant()) <= 1e-12) throw DegenerateWarp("homography not invertible");
    return Homography{h.inverse().eval()}.normalized();
  }
};

inline Homography compose(const Homography& a, const Homography& b) {
  return Homography{(a.h * b.h).eval()}.normalized();
}

inline Vec2 warp_point(const Homography& h, const Vec2& p) {
  Vec3 q = h.h * Vec3(p.x(), p.y(), 1.0);
  if (std::abs(q.z()) <= 1e-12) throw DegenerateWarp("warp sends point to infinity");
  return Vec2(q.x() / q.z(), q.y() / q.z());
}

struct CameraPose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();  // x_b = R * x_a + t

  CameraPose inverse() const { return CameraPose{R.transpose(), (-(R.transpose() * t)).eval()}; }
};

struct Intrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;

  Mat3 matrix() const {
    Mat3 k = Mat3::Identity();
    k(0, 0) = fx;
    k(1, 1) = fy;
    k(0, 2) = cx;
    k(1, 2) = cy;
    return k;
  }

  Vec3 backproject(const Vec2& p, double depth) const {
    return Vec3((p.x() - cx) / fx * depth, (p.y() - cy) / fy * depth, depth);
  }

  Vec2 project(const Vec3& x) const { return Vec2(fx * x.x() / x.z() + cx, fy * x.y() / x.z() + cy); }

  // Pixel coordinates to a unit-depth normalized ray.
  Vec3 normalize(const Vec2& p) const { return Vec3((p.x() - cx) / fx, (p.y() - cy) / fy, 1.0); }
};

struct DepthMap {
  int width = 0, height = 0;
  Mat z;  // row = y, col = x; 0 marks invalid

  static DepthMap zeros(int w, int h) { return DepthMap{w, h, Mat::Zero(h, w)}; }

  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }

  // Nearest-pixel lookup; 0 when off-grid or unset.
  double at_nearest(const Vec2& p) const {
    int x = static_cast<int>(std::lround(p.x()));
    int y = static_cast<int>(std::lround(p.y()));
    if (!in_bounds(x, y)) return 0.0;
    return z(y, x);
  }
};

inline Vec2 reproject(const Vec2& p, double d, const Intrinsics& ka, const Intrinsics& kb,
                      const CameraPose& t_ab) {
  if (!(d > 0)) throw InvalidDepth("depth must be positive");
  Vec3 xa = ka.backproject(p, d);
  Vec3 xb = t_ab.R * xa + t_ab.t;
  if (xb.z() <= 1e-9) throw BehindCamera("point behind target camera");
  return kb.project(xb);
}

inline double rotation_angle(const Mat3& r) {
  double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c) * kDegPerRad;
}

inline double translation_angle(const Vec3& t_est, const Vec3& t_gt, double eps = 1e-9) {
  double ne = t_est.norm(), ng = t_gt.norm();
  if (ne <= eps || ng <= eps) throw ZeroTranslation("translation norm below threshold");
  // Sign-invariant: an essential matrix only fixes t up to sign.
  double c = std::clamp(std::abs(t_est.dot(t_gt)) / (ne * ng), 0.0, 1.0);
  return std::acos(c) * kDegPerRad;
}

struct PoseError {
  double rot_deg = 0, trans_deg = 0, max_deg = 0;
};

inline PoseError pose_error(const CameraPose& est, const CameraPose& gt) {
  PoseError e;
  e.rot_deg = rotation_angle(est.R * gt.R.transpose());
  e.trans_deg = translation_angle(est.t, gt.t);
  e.max_deg = std::max(e.rot_deg, e.trans_deg);
  return e;
}

// Exact integral of the empirical CDF up to each threshold, normalized by the
// threshold. A sample at error e contributes max(0, tau - e) / (n * tau).
inline std::vector<double> auc(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  if (errors.empty()) throw EmptyInput("auc needs at least one error sample");
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double tau : thresholds) {
    double acc = 0;
    for (double e : errors) {
      if (e < tau) acc += tau - e;
    }
    out.push_back(acc / (static_cast<double>(errors.size()) * tau));
  }
  return out;
}

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

inline Mat3 essential_from_pose(const CameraPose& pose) {
  double n = pose.t.norm();
  if (n <= 1e-9) throw ZeroTranslation("essential matrix undefined for zero translation");
  return skew(pose.t / n) * pose.R;
}

}  // namespace matchkit
