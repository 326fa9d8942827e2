#pragma once
// Synthetic data: corner-rich textures, homography pairs with photometric
// jitter for matcher training, multi-plane two-camera scenes with exact
// depth for pose evaluation, and keypoint clutter injection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "matchkit/detect.hpp"
#include "matchkit/geometry.hpp"
#include "matchkit/image.hpp"

namespace matchkit {

constexpr double kPi = 3.14159265358979323846;

struct TextureTooFlat : Error {
  using Error::Error;
};
struct RetryExhausted : Error {
  using Error::Error;
};

enum class TextureKind : int { checker_noise = 0, blob_noise = 1, mixed = 2 };

struct TextureConfig {
  int width = 256, height = 256;
  TextureKind kind = TextureKind::mixed;
  double amplitude = 1.0;  // 0 disables all contrast and is rejected
  int min_corners = 200;
};

struct HomographyGenConfig {
  TextureConfig texture;
  double rotation_deg = 12.0;   // +- range
  double scale_min = 0.9, scale_max = 1.15;
  double perspective = 1.5e-4;  // +- on the projective row
  double translation_frac = 0.06;
  double brightness = 0.06;     // +- additive, image B only
  double contrast = 0.12;       // +- multiplicative about mid-gray
  double noise_sigma = 0.01;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int width = 256, height = 256;
  int num_planes = 2;
  TextureKind texture = TextureKind::mixed;
  double baseline_min = 0.25, baseline_max = 0.6;  // scene units; camera distance ~6
  double rotation_deg = 4.0;                       // extra roll jitter
  std::uint64_t seed = 0;
};

namespace detail {

inline void add_checker(ImageGray& img, Rng& rng, double amplitude) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int cell = 6 + static_cast<int>(rng() % 14);
  const int cols = 2 + static_cast<int>(rng() % 5);
  const int rows = 2 + static_cast<int>(rng() % 5);
  const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(std::max(1, img.width - cols * cell)));
  const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(std::max(1, img.height - rows * cell)));
  const double lo = 0.5 - 0.45 * amplitude + 0.1 * u(rng) * amplitude;
  const double hi = 0.5 + 0.45 * amplitude - 0.1 * u(rng) * amplitude;
  for (int cy = 0; cy < rows; ++cy)
    for (int cx = 0; cx < cols; ++cx) {
      const double v = ((cx + cy) & 1) ? hi : lo;
      for (int y = y0 + cy * cell; y < std::min(img.height, y0 + (cy + 1) * cell); ++y)
        for (int x = x0 + cx * cell; x < std::min(img.width, x0 + (cx + 1) * cell); ++x) img.at(x, y) = v;
    }
}

inline void add_blob(ImageGray& img, Rng& rng, double amplitude) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double cx = u(rng) * img.width;
  const double cy = u(rng) * img.height;
  const double radius = 2.5 + 5.0 * u(rng);
  const double ug = u(rng);
  const double mag = 0.55 + 0.8 * std::abs(ug - 0.5);  // varied level => crisp same-sign overlaps
  const double gain = (ug < 0.5 ? -mag : mag) * amplitude;
  const int r = static_cast<int>(std::ceil(radius)) + 1;
  // Hard-edged disc with a one-pixel rim: a clean scale-space maximum for
  // blob detection, while rims and overlaps still carry corner energy.
  for (int y = std::max(0, static_cast<int>(cy) - r); y <= std::min(img.height - 1, static_cast<int>(cy) + r); ++y)
    for (int x = std::max(0, static_cast<int>(cx) - r); x <= std::min(img.width - 1, static_cast<int>(cx) + r); ++x) {
      const double d = std::hypot(x - cx, y - cy);
      const double cover = std::clamp(radius - d + 0.5, 0.0, 1.0);
      img.at(x, y) += gain * cover;
    }
}

inline int corner_count(const ImageGray& img) {
  DetectorConfig cfg = DetectorConfig::corner_defaults();
  cfg.single_scale = true;
  cfg.max_keypoints = 100000;
  cfg.min_side = std::min(img.width, img.height);  // plane textures run smaller than full frames
  return static_cast<int>(detect_corners(img, cfg).size());
}

}  // namespace detail

inline ImageGray gen_texture(const TextureConfig& cfg, std::uint64_t seed) {
  if (cfg.width < 32 || cfg.height < 32) throw Error("texture size too small");
  if (!(cfg.amplitude > 1e-9)) throw TextureTooFlat("zero-amplitude texture has no structure");
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Band-limited noise floor so flat regions still carry gradient signal.
  ImageGray img = ImageGray::zeros(cfg.width, cfg.height);
  for (double& v : img.px) v = u(rng);
  img = gaussian_blur(img, 1.5);
  for (double& v : img.px) v = 0.5 + (v - 0.5) * 0.8 * cfg.amplitude;

  const bool checkers = cfg.kind != TextureKind::blob_noise;
  const bool blobs = cfg.kind != TextureKind::checker_noise;
  // Disc intersections carry far less corner energy than checker corners,
  // so blob-only textures draw extra discs per slot to reach the gate.
  const int blob_reps = checkers ? 1 : 3;
  const int per_batch = std::max(4, cfg.width * cfg.height / 8192);
  for (int batch = 0; batch < 24; ++batch) {
    for (int i = 0; i < per_batch; ++i) {
      if (checkers) detail::add_checker(img, rng, cfg.amplitude);
      if (blobs)
        for (int rep = 0; rep < blob_reps; ++rep) detail::add_blob(img, rng, cfg.amplitude);
    }
    img.clamp01();
    if (detail::corner_count(img) >= cfg.min_corners) return img;
  }
  throw TextureTooFlat("texture never reached the required corner density");
}

struct HomographyPair {
  ImageGray a, b;
  Homography h;  // maps A pixel coordinates to B
};

namespace detail {

inline double condition_number(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m);
  const double smin = svd.singularValues()(2);
  if (smin < 1e-18) return std::numeric_limits<double>::infinity();
  return svd.singularValues()(0) / smin;
}

}  // namespace detail

inline Homography sample_homography(const HomographyGenConfig& cfg, Rng& rng) {
  const double w = cfg.texture.width, h = cfg.texture.height;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double theta = u(rng) * cfg.rotation_deg * kPi / 180.0;
    const double s = 0.5 * (cfg.scale_min + cfg.scale_max) + 0.5 * u(rng) * (cfg.scale_max - cfg.scale_min);
    const double tx = u(rng) * cfg.translation_frac * w;
    const double ty = u(rng) * cfg.translation_frac * h;
    const double p0 = u(rng) * cfg.perspective;
    const double p1 = u(rng) * cfg.perspective;

    Mat3 center = Mat3::Identity(), back = Mat3::Identity(), mid = Mat3::Identity();
    center(0, 2) = -0.5 * w;
    center(1, 2) = -0.5 * h;
    back(0, 2) = 0.5 * w + tx;
    back(1, 2) = 0.5 * h + ty;
    mid(0, 0) = s * std::cos(theta);
    mid(0, 1) = -s * std::sin(theta);
    mid(1, 0) = s * std::sin(theta);
    mid(1, 1) = s * std::cos(theta);
    mid(2, 0) = p0;
    mid(2, 1) = p1;
    Homography hh{(back * mid * center).eval()};
    hh = hh.normalized();
    if (detail::condition_number(hh.h) >= 1e6) continue;

    // Every warped corner must land inside the doubled, centered bounds.
    bool ok = true;
    const Vec2 corners[4] = {{0, 0}, {w, 0}, {0, h}, {w, h}};
    for (const Vec2& c : corners) {
      Vec2 q;
      try {
        q = warp_point(hh, c);
      } catch (const DegenerateWarp&) {
        ok = false;
        break;
      }
      if (q.x() < -0.5 * w || q.x() > 1.5 * w || q.y() < -0.5 * h || q.y() > 1.5 * h) {
        ok = false;
        break;
      }
    }
    if (ok) return hh;
  }
  throw RetryExhausted("no in-bounds homography after 100 samples");
}

inline HomographyPair gen_homography_pair(const HomographyGenConfig& cfg) {
  HomographyPair out;
  out.a = gen_texture(cfg.texture, derive_seed(cfg.seed, "texture"));
  Rng rng(derive_seed(cfg.seed, "warp"));
  out.h = sample_homography(cfg, rng);
  out.b = warp_image(out.a, out.h);

  // Photometric jitter on B only; A stays canonical for descriptor debugging.
  Rng photo(derive_seed(cfg.seed, "photometric"));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double alpha = 1.0 + u(photo) * cfg.contrast;
  const double beta = u(photo) * cfg.brightness;
  for (double& v : out.b.px) v = alpha * (v - 0.5) + 0.5 + beta + cfg.noise_sigma * g(photo);
  out.b.clamp01();
  return out;
}

struct PosedPair {
  ImageGray a, b;
  DepthMap depth_a, depth_b;
  CameraPose pose;  // camera A frame to camera B frame
  Intrinsics ka, kb;
};

namespace detail {

// Textured quad in the camera-A (world) frame.
struct ScenePlane {
  Vec3 center, normal, axis_u, axis_v;
  double half_u = 1, half_v = 1;
  ImageGray texture;
};

// Nearest positive quad intersection along origin+t*dir; returns plane index
// or -1, with the hit point in *hit.
inline int raycast(const std::vector<ScenePlane>& planes, const Vec3& origin, const Vec3& dir, Vec3* hit) {
  int best = -1;
  double best_t = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < planes.size(); ++p) {
    const double denom = planes[p].normal.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    const double t = planes[p].normal.dot(planes[p].center - origin) / denom;
    if (t <= 0.1 || t >= best_t) continue;
    const Vec3 x = origin + t * dir;
    const Vec3 rel = x - planes[p].center;
    if (std::abs(rel.dot(planes[p].axis_u)) > planes[p].half_u) continue;
    if (std::abs(rel.dot(planes[p].axis_v)) > planes[p].half_v) continue;
    best = static_cast<int>(p);
    best_t = t;
    *hit = x;
  }
  return best;
}

inline double plane_intensity(const ScenePlane& pl, const Vec3& x) {
  const Vec3 rel = x - pl.center;
  const double a = rel.dot(pl.axis_u) / pl.half_u;   // [-1, 1]
  const double b = rel.dot(pl.axis_v) / pl.half_v;
  const double px = 0.5 * (a + 1.0) * (pl.texture.width - 1);
  const double py = 0.5 * (b + 1.0) * (pl.texture.height - 1);
  return pl.texture.bilinear(px, py);
}

// Render one camera given its world-from-camera rotation transpose
// (world->camera rotation r_wc) and camera center c in world coordinates.
inline void render_view(const std::vector<ScenePlane>& planes, const Mat3& r_wc, const Vec3& c,
                        const Intrinsics& k, ImageGray* img, DepthMap* depth, std::vector<int>* plane_hits) {
  const Mat3 r_cw = r_wc.transpose();
  for (int y = 0; y < img->height; ++y)
    for (int x = 0; x < img->width; ++x) {
      const Vec3 dir_cam((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
      const Vec3 dir = r_cw * dir_cam;
      Vec3 hit;
      const int p = raycast(planes, c, dir, &hit);
      if (p < 0) continue;
      img->at(x, y) = plane_intensity(planes[static_cast<std::size_t>(p)], hit);
      depth->z(y, x) = (r_wc * (hit - c)).z();
      if (plane_hits) ++(*plane_hits)[static_cast<std::size_t>(p)];
    }
}

inline Mat3 look_at_rotation(const Vec3& from, const Vec3& target) {
  const Vec3 zb = (target - from).normalized();
  Vec3 xb = Vec3(0, 1, 0).cross(zb);
  if (xb.norm() < 1e-9) xb = Vec3(1, 0, 0);
  xb.normalize();
  const Vec3 yb = zb.cross(xb);
  Mat3 r;  // world -> camera rows
  r.row(0) = xb.transpose();
  r.row(1) = yb.transpose();
  r.row(2) = zb.transpose();
  return r;
}

}  // namespace detail

inline PosedPair gen_posed_pair(const SceneConfig& cfg) {
  if (cfg.num_planes < 2) throw Error("posed scenes need >= 2 planes");
  if (!(cfg.baseline_max >= cfg.baseline_min) || cfg.baseline_max < 1e-3)
    throw Error("camera baseline must allow |t| > 1e-3");

  const Intrinsics k{0.8 * cfg.width, 0.8 * cfg.width, 0.5 * cfg.width - 0.5, 0.5 * cfg.height - 0.5};
  Rng rng(derive_seed(cfg.seed, "scene"));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  for (int attempt = 0; attempt < 20; ++attempt) {
    // Dominant backdrop plane plus smaller foreground planes; all textured
    // independently so every surface carries matchable structure.
    std::vector<detail::ScenePlane> planes;
    TextureConfig tex;
    tex.width = 192;
    tex.height = 192;
    tex.kind = cfg.texture;
    for (int p = 0; p < cfg.num_planes; ++p) {
      detail::ScenePlane pl;
      if (p == 0) {
        pl.center = Vec3(0.3 * u(rng), 0.3 * u(rng), 6.0 + 0.5 * u(rng));
        pl.half_u = 7.0;
        pl.half_v = 6.0;
      } else {
        const double side = (p % 2 == 1) ? 1.0 : -1.0;
        pl.center = Vec3(side * (0.4 + 0.9 * u01(rng)), 0.8 * u(rng), 3.6 + 0.8 * u01(rng));
        pl.half_u = 1.1 + 0.5 * u01(rng);
        pl.half_v = 1.3 + 0.5 * u01(rng);
      }
      const double tilt = (p == 0 ? 0.12 : 0.35) * u(rng);
      const double tilt2 = (p == 0 ? 0.12 : 0.35) * u(rng);
      pl.normal = Vec3(std::sin(tilt), std::sin(tilt2), -std::cos(tilt) * std::cos(tilt2)).normalized();
      pl.axis_u = pl.normal.cross(Vec3(0, 1, 0)).normalized();
      pl.axis_v = pl.normal.cross(pl.axis_u).normalized();
      pl.texture = gen_texture(tex, derive_seed(cfg.seed, "plane" + std::to_string(p) + "a" + std::to_string(attempt)));
      planes.push_back(std::move(pl));
    }

    // Camera B: translated sideways, re-aimed at the scene center with a
    // small roll so rotation is never exactly identity.
    const double baseline = cfg.baseline_min + u01(rng) * (cfg.baseline_max - cfg.baseline_min);
    Vec3 dir(u(rng), 0.35 * u(rng), 0.25 * u(rng));
    if (dir.norm() < 1e-6) dir = Vec3(1, 0, 0);
    const Vec3 c_b = dir.normalized() * baseline;
    Mat3 r_wb = detail::look_at_rotation(c_b, Vec3(0, 0, 5.5));
    const double roll = u(rng) * cfg.rotation_deg * kPi / 180.0;
    Mat3 rollm;
    rollm << std::cos(roll), -std::sin(roll), 0, std::sin(roll), std::cos(roll), 0, 0, 0, 1;
    r_wb = rollm * r_wb;

    PosedPair out;
    out.ka = k;
    out.kb = k;
    out.pose = CameraPose{r_wb, (-(r_wb * c_b)).eval()};
    out.a = ImageGray::zeros(cfg.width, cfg.height);
    out.b = ImageGray::zeros(cfg.width, cfg.height);
    out.depth_a = DepthMap::zeros(cfg.width, cfg.height);
    out.depth_b = DepthMap::zeros(cfg.width, cfg.height);

    std::vector<int> hits_a(planes.size(), 0), hits_b(planes.size(), 0);
    detail::render_view(planes, Mat3::Identity(), Vec3::Zero(), k, &out.a, &out.depth_a, &hits_a);
    detail::render_view(planes, r_wb, c_b, k, &out.b, &out.depth_b, &hits_b);

    // Visibility gates: enough coverage, enough off-dominant support, and
    // every plane visible in both views.
    const long total_a = std::accumulate(hits_a.begin(), hits_a.end(), 0L);
    const long total_b = std::accumulate(hits_b.begin(), hits_b.end(), 0L);
    const long npx = static_cast<long>(cfg.width) * cfg.height;
    if (total_a < npx * 8 / 10 || total_b < npx * 7 / 10) continue;
    const long dominant_a = *std::max_element(hits_a.begin(), hits_a.end());
    const long dominant_b = *std::max_element(hits_b.begin(), hits_b.end());
    if (total_a - dominant_a < static_cast<long>(0.3 * total_a)) continue;
    if (total_b - dominant_b < static_cast<long>(0.3 * total_b)) continue;
    bool all_visible = true;
    for (std::size_t p = 0; p < planes.size(); ++p)
      if (hits_a[p] < 200 || hits_b[p] < 200) all_visible = false;
    if (!all_visible) continue;
    return out;
  }
  throw RetryExhausted("no posed scene satisfied the visibility constraints");
}

enum class ClutterMode : int { duplicate_offset = 0, multi_scale_sim = 1 };

// Controlled simulation of no-NMS / multi-scale keypoint clutter: every
// keypoint gains one near-duplicate with a slightly lower score.
inline std::vector<Keypoint> inject_clutter(const std::vector<Keypoint>& kps, ClutterMode mode,
                                            double magnitude, std::uint64_t seed = 0) {
  if (!(magnitude > 0)) throw Error("clutter magnitude must be positive");
  Rng rng(derive_seed(seed, "clutter"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<Keypoint> out = kps;
  out.reserve(kps.size() * 2);
  for (const Keypoint& kp : kps) {
    Keypoint dup = kp;
    dup.score = kp.score * 0.9 - 1e-12;
    if (mode == ClutterMode::duplicate_offset) {
      const double angle = 2.0 * kPi * u01(rng);
      const double len = magnitude * std::max(0.25, u01(rng));
      dup.x = kp.x + len * std::cos(angle);
      dup.y = kp.y + len * std::sin(angle);
    } else {
      // Re-quantization to a coarser pyramid grid shifts the duplicate by a
      // sub-pixel-to-pixel offset, mimicking cross-scale near-duplicates.
      const double s = 1.2;
      dup.x = std::floor(kp.x / s) * s;
      dup.y = std::floor(kp.y / s) * s;
      dup.scale = kp.scale * s;
    }
    out.push_back(dup);
  }
  return out;
}

// Depth maps share the MKDS container with descriptor files: kind=0 (real
// f32), count=height rows of dim=width values, row-major.
inline std::string write_depth(const DepthMap& d) {
  std::string out = "MKDS";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(d.height));
  put_u32(out, static_cast<std::uint32_t>(d.width));
  out.push_back(0);
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x) put_f32(out, static_cast<float>(d.z(y, x)));
  return out;
}

inline DepthMap read_depth(const std::string& bytes) {
  if (bytes.size() < 13 || bytes.compare(0, 4, "MKDS") != 0) throw Error("bad depth magic");
  ByteReader r{bytes, 4};
  if (r.u32() != 1) throw Error("unsupported depth version");
  const int height = static_cast<int>(r.u32());
  const int width = static_cast<int>(r.u32());
  if (!r.need(1) || bytes[r.pos++] != 0) throw Error("depth container must hold real values");
  DepthMap d = DepthMap::zeros(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (!r.need(4)) throw Error("truncated depth file");
      d.z(y, x) = static_cast<double>(r.f32());
    }
  return d;
}

struct ManifestItem {
  std::string id;
  std::uint64_t seed = 0;
  std::string kind;
  std::vector<std::string> paths;
};

inline std::string write_manifest(const std::vector<ManifestItem>& items) {
  std::string out = "# matchkit-manifest v1\n";
  for (const ManifestItem& it : items) {
    out += it.id + " " + std::to_string(it.seed) + " " + it.kind;
    for (const std::string& p : it.paths) out += " " + p;
    out += "\n";
  }
  return out;
}

inline std::vector<ManifestItem> read_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# matchkit-manifest v1") throw Error("bad manifest header");
  std::vector<ManifestItem> items;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    ManifestItem it;
    if (!(row >> it.id >> it.seed >> it.kind)) throw Error("bad manifest row: " + line);
    std::string p;
    while (row >> p) it.paths.push_back(p);
    items.push_back(std::move(it));
  }
  return items;
}

}  // namespace matchkit
