#pragma once

#include "matchkit/image.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace matchkit {

struct EmptyPyramid : Error {
  using Error::Error;
};

enum class DetectorKind : int { corner = 0, blob = 1 };

struct Keypoint {
  double x = 0, y = 0;      // level-0 pixel coordinates
  double scale = 1.0;       // pyramid scale the point was found at
  double score = 0;
  DetectorKind detector_id = DetectorKind::corner;
};

struct DetectorConfig {
  DetectorKind kind = DetectorKind::corner;
  int num_scales = 5;
  double scale_factor = 1.2;
  double nms_radius = 3.0;
  bool single_scale = false;
  int max_keypoints = 2048;
  double response_threshold = 0.01;
  int min_side = 256;

  static DetectorConfig corner_defaults() { return DetectorConfig{}; }

  static DetectorConfig blob_defaults() {
    DetectorConfig cfg;
    cfg.kind = DetectorKind::blob;
    cfg.response_threshold = 0.005;
    return cfg;
  }
};

struct PyramidLevel {
  ImageGray img;
  double scale = 1.0;  // nominal factor^k, tagged onto keypoints
  // Effective per-axis ratios back to level 0; these differ slightly from
  // the nominal scale because level dimensions are floored.
  double sx = 1.0, sy = 1.0;
};

inline std::vector<PyramidLevel> build_pyramid(const ImageGray& img, const DetectorConfig& cfg) {
  int levels = cfg.single_scale ? 1 : cfg.num_scales;
  std::vector<PyramidLevel> out;
  for (int k = 0; k < levels; ++k) {
    double s = std::pow(cfg.scale_factor, k);
    int w = static_cast<int>(std::floor(img.width / s));
    int h = static_cast<int>(std::floor(img.height / s));
    if (std::min(w, h) < cfg.min_side) break;
    if (k == 0)
      out.push_back({img, 1.0, 1.0, 1.0});
    else
      out.push_back({resize_bilinear(img, w, h), s, static_cast<double>(img.width) / w,
                     static_cast<double>(img.height) / h});
  }
  if (out.empty()) throw EmptyPyramid("original image smaller than min_side");
  return out;
}

namespace detail {

// Deterministic ranking: score descending, then (y, x) ascending.
inline bool keypoint_order(const Keypoint& a, const Keypoint& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.y != b.y) return a.y < b.y;
  return a.x < b.x;
}

// One-dimensional quadratic peak interpolation, clamped to half a pixel.
inline double parabolic_offset(double left, double mid, double right) {
  double denom = left - 2.0 * mid + right;
  if (std::abs(denom) < 1e-12) return 0.0;
  return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

struct Grid2d {
  int width = 0, height = 0;
  std::vector<double> v;

  static Grid2d zeros(int w, int h) { return {w, h, std::vector<double>(static_cast<std::size_t>(w) * h, 0.0)}; }
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

}  // namespace detail

// Minimum eigenvalue of the structure tensor averaged over a 3x3 window.
inline detail::Grid2d shi_tomasi_response(const ImageGray& img) {
  GradientField g = sobel_gradients(img);
  detail::Grid2d xx = detail::Grid2d::zeros(img.width, img.height);
  detail::Grid2d yy = detail::Grid2d::zeros(img.width, img.height);
  detail::Grid2d xy = detail::Grid2d::zeros(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double dx = g.dx(x, y), dy = g.dy(x, y);
      xx.at(x, y) = dx * dx;
      yy.at(x, y) = dy * dy;
      xy.at(x, y) = dx * dy;
    }
  detail::Grid2d r = detail::Grid2d::zeros(img.width, img.height);
  for (int y = 2; y < img.height - 2; ++y)
    for (int x = 2; x < img.width - 2; ++x) {
      double a = 0, b = 0, c = 0;
      for (int j = -1; j <= 1; ++j)
        for (int i = -1; i <= 1; ++i) {
          a += xx.at(x + i, y + j);
          c += yy.at(x + i, y + j);
          b += xy.at(x + i, y + j);
        }
      a /= 9.0;
      b /= 9.0;
      c /= 9.0;
      double half_diff = (a - c) / 2.0;
      r.at(x, y) = (a + c) / 2.0 - std::sqrt(half_diff * half_diff + b * b);
    }
  return r;
}

inline std::vector<Keypoint> nms(const std::vector<Keypoint>& kps, double radius) {
  std::vector<Keypoint> sorted = kps;
  std::stable_sort(sorted.begin(), sorted.end(), detail::keypoint_order);
  if (radius <= 0) return sorted;

  // Bucket accepted points so each candidate only checks nearby cells; the
  // result is identical to the quadratic greedy scan.
  double cell = radius;
  auto key = [&](double v) { return static_cast<long>(std::floor(v / cell)); };
  struct Bucket {
    long cx, cy;
    std::vector<int> idx;
  };
  std::vector<Bucket> buckets;
  auto find_bucket = [&](long cx, long cy) -> Bucket* {
    for (Bucket& b : buckets)
      if (b.cx == cx && b.cy == cy) return &b;
    return nullptr;
  };

  std::vector<Keypoint> out;
  for (const Keypoint& kp : sorted) {
    long cx = key(kp.x), cy = key(kp.y);
    bool clear = true;
    for (long j = cy - 1; j <= cy + 1 && clear; ++j)
      for (long i = cx - 1; i <= cx + 1 && clear; ++i) {
        Bucket* b = find_bucket(i, j);
        if (!b) continue;
        for (int id : b->idx) {
          double dx = out[id].x - kp.x, dy = out[id].y - kp.y;
          if (dx * dx + dy * dy <= radius * radius) {
            clear = false;
            break;
          }
        }
      }
    if (!clear) continue;
    Bucket* b = find_bucket(cx, cy);
    if (!b) {
      buckets.push_back({cx, cy, {}});
      b = &buckets.back();
    }
    b->idx.push_back(static_cast<int>(out.size()));
    out.push_back(kp);
  }
  return out;
}

inline std::vector<Keypoint> top_k(const std::vector<Keypoint>& kps, int k) {
  if (k < 1) throw Error("top_k needs k >= 1");
  std::vector<Keypoint> sorted = kps;
  std::stable_sort(sorted.begin(), sorted.end(), detail::keypoint_order);
  if (static_cast<int>(sorted.size()) > k) sorted.resize(k);
  return sorted;
}

inline long count_nearby_pairs(const std::vector<Keypoint>& kps, double radius) {
  if (!(radius > 0)) throw Error("count_nearby_pairs needs radius > 0");
  long n = 0;
  for (std::size_t i = 0; i < kps.size(); ++i)
    for (std::size_t j = i + 1; j < kps.size(); ++j) {
      double dx = kps[i].x - kps[j].x, dy = kps[i].y - kps[j].y;
      if (dx * dx + dy * dy <= radius * radius) ++n;
    }
  return n;
}

namespace detail {

inline void collect_grid_maxima(const Grid2d& r, double threshold, const PyramidLevel& level,
                                DetectorKind kind, int margin, std::vector<Keypoint>& out) {
  for (int y = margin; y < r.height - margin; ++y)
    for (int x = margin; x < r.width - margin; ++x) {
      double v = r.at(x, y);
      if (v <= threshold) continue;
      bool is_max = true;
      for (int j = -1; j <= 1 && is_max; ++j)
        for (int i = -1; i <= 1; ++i) {
          if (i == 0 && j == 0) continue;
          if (r.at(x + i, y + j) >= v) {
            is_max = false;
            break;
          }
        }
      if (!is_max) continue;
      double ox = parabolic_offset(r.at(x - 1, y), v, r.at(x + 1, y));
      double oy = parabolic_offset(r.at(x, y - 1), v, r.at(x, y + 1));
      out.push_back({(x + ox) * level.sx, (y + oy) * level.sy, level.scale, v, kind});
    }
}

}  // namespace detail

inline std::vector<Keypoint> detect_corners(const ImageGray& img, const DetectorConfig& cfg) {
  std::vector<PyramidLevel> pyr = build_pyramid(img, cfg);
  std::vector<Keypoint> all;
  for (const PyramidLevel& level : pyr) {
    detail::Grid2d r = shi_tomasi_response(level.img);
    detail::collect_grid_maxima(r, cfg.response_threshold, level, DetectorKind::corner, 3, all);
  }
  if (cfg.single_scale)
    for (Keypoint& kp : all) kp.scale = 1.0;
  return top_k(nms(all, cfg.nms_radius), cfg.max_keypoints);
}

inline std::vector<Keypoint> detect_blobs(const ImageGray& img, const DetectorConfig& cfg) {
  std::vector<PyramidLevel> pyr = build_pyramid(img, cfg);
  std::vector<Keypoint> all;
  constexpr int kIntervals = 4;
  for (const PyramidLevel& level : pyr) {
    std::vector<ImageGray> gauss;
    for (int s = 0; s <= kIntervals; ++s) gauss.push_back(gaussian_blur(level.img, 1.6 * std::pow(2.0, s / 3.0)));
    std::vector<detail::Grid2d> dog;
    for (int s = 0; s < kIntervals; ++s) {
      detail::Grid2d d = detail::Grid2d::zeros(level.img.width, level.img.height);
      for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = gauss[s + 1].px[i] - gauss[s].px[i];
      dog.push_back(std::move(d));
    }
    const int margin = 5;
    for (int s = 1; s + 1 < kIntervals; ++s) {
      for (int y = margin; y < level.img.height - margin; ++y)
        for (int x = margin; x < level.img.width - margin; ++x) {
          double v = dog[s].at(x, y);
          if (std::abs(v) <= cfg.response_threshold) continue;
          bool is_max = v > 0, is_min = v < 0;
          for (int ds = -1; ds <= 1 && (is_max || is_min); ++ds)
            for (int j = -1; j <= 1; ++j)
              for (int i = -1; i <= 1; ++i) {
                if (ds == 0 && i == 0 && j == 0) continue;
                double u = dog[s + ds].at(x + i, y + j);
                if (u >= v) is_max = false;
                if (u <= v) is_min = false;
              }
          if (!is_max && !is_min) continue;
          // Reject edge-like responses: the ring side-lobe around a blob (and
          // plain contour points) has one near-zero principal curvature, so a
          // bound on tr^2/det of the spatial Hessian removes it.
          double dxx = dog[s].at(x + 1, y) - 2 * v + dog[s].at(x - 1, y);
          double dyy = dog[s].at(x, y + 1) - 2 * v + dog[s].at(x, y - 1);
          double dxy = (dog[s].at(x + 1, y + 1) + dog[s].at(x - 1, y - 1) - dog[s].at(x + 1, y - 1) -
                        dog[s].at(x - 1, y + 1)) /
                       4.0;
          double det = dxx * dyy - dxy * dxy;
          double tr = dxx + dyy;
          constexpr double kEdgeRatio = 10.0;
          if (det <= 0 || tr * tr * kEdgeRatio >= det * (kEdgeRatio + 1) * (kEdgeRatio + 1)) continue;
          double ox = detail::parabolic_offset(std::abs(dog[s].at(x - 1, y)), std::abs(v), std::abs(dog[s].at(x + 1, y)));
          double oy = detail::parabolic_offset(std::abs(dog[s].at(x, y - 1)), std::abs(v), std::abs(dog[s].at(x, y + 1)));
          all.push_back({(x + ox) * level.sx, (y + oy) * level.sy, level.scale, std::abs(v), DetectorKind::blob});
        }
    }
  }
  if (cfg.single_scale)
    for (Keypoint& kp : all) kp.scale = 1.0;
  return top_k(nms(all, cfg.nms_radius), cfg.max_keypoints);
}

inline std::vector<Keypoint> detect(const ImageGray& img, const DetectorConfig& cfg) {
  return cfg.kind == DetectorKind::corner ? detect_corners(img, cfg) : detect_blobs(img, cfg);
}

inline std::string write_keypoints(const std::vector<Keypoint>& kps, int width, int height) {
  std::string out = "# matchkit-keypoints v1 count=" + std::to_string(kps.size()) +
                    " width=" + std::to_string(width) + " height=" + std::to_string(height) + "\n";
  for (const Keypoint& kp : kps) {
    out += format_fixed(kp.x) + " " + format_fixed(kp.y) + " " + format_fixed(kp.scale) + " " +
           format_fixed(kp.score) + " " + std::to_string(static_cast<int>(kp.detector_id)) + "\n";
  }
  return out;
}

struct KeypointFile {
  std::vector<Keypoint> keypoints;
  int width = 0, height = 0;
};

inline KeypointFile read_keypoints(const std::string& text) {
  std::istringstream in(text);
  std::string hash, tag, version;
  in >> hash >> tag >> version;
  if (hash != "#" || tag != "matchkit-keypoints" || version != "v1") throw Error("bad keypoints header");
  KeypointFile out;
  std::size_t count = 0;
  std::string field;
  while (in >> field) {
    auto eq = field.find('=');
    if (eq == std::string::npos) break;
    std::string key = field.substr(0, eq);
    std::string val = field.substr(eq + 1);
    if (key == "count")
      count = std::stoul(val);
    else if (key == "width")
      out.width = std::stoi(val);
    else if (key == "height")
      out.height = std::stoi(val);
    if (key == "height") break;
  }
  for (std::size_t i = 0; i < count; ++i) {
    Keypoint kp;
    int id = 0;
    if (!(in >> kp.x >> kp.y >> kp.scale >> kp.score >> id)) throw Error("truncated keypoints file");
    kp.detector_id = static_cast<DetectorKind>(id);
    out.keypoints.push_back(kp);
  }
  return out;
}

}  // namespace matchkit
