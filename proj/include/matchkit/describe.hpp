#pragma once

#include "matchkit/detect.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace matchkit {

struct OutOfBounds : Error {
  using Error::Error;
};
struct PatchOutOfBounds : Error {
  using Error::Error;
};
struct DimensionMismatch : Error {
  using Error::Error;
};

enum class SourceId : int { dense_sift = 0, brief = 1, patch_mlp = 2 };

struct RealDescriptor {
  Vec values;
  SourceId source_id = SourceId::dense_sift;
};

struct BinaryDescriptor {
  std::array<std::uint64_t, 4> bits{};

  bool get(int i) const { return (bits[i >> 6] >> (i & 63)) & 1; }
  void set(int i, bool v) {
    if (v)
      bits[i >> 6] |= (std::uint64_t{1} << (i & 63));
    else
      bits[i >> 6] &= ~(std::uint64_t{1} << (i & 63));
  }
};

constexpr int kBinaryBits = 256;

struct DescriptorMap {
  int grid_w = 0, grid_h = 0, dim = 0, stride = 1;
  SourceId source_id = SourceId::dense_sift;
  Mat data;                        // node-major rows: (gy * grid_w + gx) x dim
  std::vector<std::uint8_t> filled;  // 0 marks an empty cell (no gradient support)

  Eigen::Ref<const Vec> node(int gx, int gy) const {
    return data.row(static_cast<Eigen::Index>(gy) * grid_w + gx).transpose();
  }
};

namespace detail {

constexpr int kSiftDim = 128;

// Dense gradient-orientation histogram at one node: 4x4 cells of 4x4 px,
// 8 orientation bins, Gaussian-weighted magnitudes, 0.2 clamp + renorm.
inline bool sift_at(const GradientField& g, int cx, int cy, double* out) {
  double hist[kSiftDim] = {0};
  for (int dy = -8; dy < 8; ++dy)
    for (int dx = -8; dx < 8; ++dx) {
      int px = cx + dx, py = cy + dy;
      if (px < 1 || px >= g.width - 1 || py < 1 || py >= g.height - 1) continue;
      double gx = g.dx(px, py), gy = g.dy(px, py);
      double m = std::sqrt(gx * gx + gy * gy);
      if (m < 1e-12) continue;
      double theta = std::atan2(gy, gx);  // [-pi, pi]
      int bin = static_cast<int>(std::floor((theta + 3.14159265358979323846) / (2 * 3.14159265358979323846 / 8)));
      bin = std::clamp(bin, 0, 7);
      int cell_x = (dx + 8) / 4, cell_y = (dy + 8) / 4;
      double w = std::exp(-(dx * dx + dy * dy) / (2.0 * 8.0 * 8.0));
      hist[(cell_y * 4 + cell_x) * 8 + bin] += m * w;
    }
  double norm2 = 0;
  for (double v : hist) norm2 += v * v;
  if (norm2 < 1e-24) return false;
  double inv = 1.0 / std::sqrt(norm2);
  double clipped2 = 0;
  for (double& v : hist) {
    v = std::min(v * inv, 0.2);
    clipped2 += v * v;
  }
  double inv2 = 1.0 / std::sqrt(clipped2);
  for (int i = 0; i < kSiftDim; ++i) out[i] = hist[i] * inv2;
  return true;
}

}  // namespace detail

inline DescriptorMap dense_descriptor_map(const ImageGray& img, int stride) {
  if (stride < 1) throw Error("descriptor map stride must be >= 1");
  DescriptorMap map;
  map.stride = stride;
  map.grid_w = img.width / stride;
  map.grid_h = img.height / stride;
  map.dim = detail::kSiftDim;
  map.source_id = SourceId::dense_sift;
  map.data = Mat::Zero(static_cast<Eigen::Index>(map.grid_w) * map.grid_h, map.dim);
  map.filled.assign(static_cast<std::size_t>(map.grid_w) * map.grid_h, 0);
  GradientField g = central_gradients(img);
  std::vector<double> buf(detail::kSiftDim);
  for (int gy = 0; gy < map.grid_h; ++gy)
    for (int gx = 0; gx < map.grid_w; ++gx) {
      if (detail::sift_at(g, gx * stride, gy * stride, buf.data())) {
        map.filled[static_cast<std::size_t>(gy) * map.grid_w + gx] = 1;
        for (int d = 0; d < map.dim; ++d) map.data(static_cast<Eigen::Index>(gy) * map.grid_w + gx, d) = buf[d];
      }
    }
  return map;
}

namespace detail {

// Bilinear blend of the four surrounding grid vectors, before normalization.
inline Vec sample_map_raw(const DescriptorMap& map, double gx, double gy) {
  int x0 = static_cast<int>(std::floor(gx));
  int y0 = static_cast<int>(std::floor(gy));
  x0 = std::clamp(x0, 0, map.grid_w - 2 >= 0 ? map.grid_w - 2 : 0);
  y0 = std::clamp(y0, 0, map.grid_h - 2 >= 0 ? map.grid_h - 2 : 0);
  double fx = std::clamp(gx - x0, 0.0, 1.0);
  double fy = std::clamp(gy - y0, 0.0, 1.0);
  int x1 = std::min(x0 + 1, map.grid_w - 1);
  int y1 = std::min(y0 + 1, map.grid_h - 1);
  Vec v = ((1 - fy) * (1 - fx)) * map.node(x0, y0) + ((1 - fy) * fx) * map.node(x1, y0) +
          (fy * (1 - fx)) * map.node(x0, y1) + (fy * fx) * map.node(x1, y1);
  return v;
}

}  // namespace detail

inline RealDescriptor sample_descriptor(const DescriptorMap& map, const Keypoint& kp) {
  double gx = kp.x / map.stride;
  double gy = kp.y / map.stride;
  if (gx < 0 || gy < 0 || gx > map.grid_w - 1 || gy > map.grid_h - 1)
    throw OutOfBounds("keypoint outside descriptor grid");
  Vec v = detail::sample_map_raw(map, gx, gy);
  double n = v.norm();
  if (n < 1e-12) throw OutOfBounds("sampled an empty descriptor cell");
  return RealDescriptor{v / n, map.source_id};
}

namespace detail {

struct BriefPattern {
  std::array<double, kBinaryBits> px, py, qx, qy;
};

// Fixed comparison pattern, drawn once per build from a seeded Gaussian.
inline const BriefPattern& brief_pattern() {
  static const BriefPattern pattern = [] {
    BriefPattern p;
    Rng rng(0x42524945u);  // arbitrary constant: pattern must never change
    std::normal_distribution<double> n(0.0, 31.0 / 5.0);
    auto draw = [&] { return std::clamp(n(rng), -15.0, 15.0); };
    for (int i = 0; i < kBinaryBits; ++i) {
      p.px[i] = draw();
      p.py[i] = draw();
      p.qx[i] = draw();
      p.qy[i] = draw();
    }
    return p;
  }();
  return pattern;
}

inline void check_binary_support(const ImageGray& img, const Keypoint& kp) {
  double half = 15.0 * std::max(1.0, kp.scale) + 1.0;
  if (kp.x - half < 0 || kp.x + half > img.width - 1 || kp.y - half < 0 || kp.y + half > img.height - 1)
    throw PatchOutOfBounds("comparison patch leaves the image");
}

inline BinaryDescriptor binary_from_smoothed(const ImageGray& smoothed, const Keypoint& kp) {
  check_binary_support(smoothed, kp);
  const BriefPattern& pat = brief_pattern();
  double s = std::max(1.0, kp.scale);
  BinaryDescriptor d;
  for (int i = 0; i < kBinaryBits; ++i) {
    double a = smoothed.bilinear(kp.x + pat.px[i] * s, kp.y + pat.py[i] * s);
    double b = smoothed.bilinear(kp.x + pat.qx[i] * s, kp.y + pat.qy[i] * s);
    d.set(i, a < b);
  }
  return d;
}

}  // namespace detail

inline BinaryDescriptor binary_descriptor(const ImageGray& img, const Keypoint& kp) {
  return detail::binary_from_smoothed(gaussian_blur(img, 2.0), kp);
}

// Batch form smooths the image once; element i corresponds to kps[i].
inline std::vector<BinaryDescriptor> binary_descriptors(const ImageGray& img, const std::vector<Keypoint>& kps) {
  ImageGray smoothed = gaussian_blur(img, 2.0);
  std::vector<BinaryDescriptor> out;
  out.reserve(kps.size());
  for (const Keypoint& kp : kps) out.push_back(detail::binary_from_smoothed(smoothed, kp));
  return out;
}

struct PatchEmbedConfig {
  int patch_size = 15;
  int hidden_dim = 64;
  int out_dim = 256;
  std::uint64_t seed = 0;
  std::vector<Mat> w;  // 4 affine layers, ReLU between
  std::vector<Vec> b;

  bool initialized() const { return w.size() == 4; }
};

inline PatchEmbedConfig init_patch_embed(int patch_size, int hidden_dim, int out_dim, std::uint64_t seed) {
  if (patch_size % 2 == 0 || patch_size < 3) throw Error("patch_size must be odd and >= 3");
  if (out_dim < 1 || hidden_dim < 1) throw Error("patch embed dims must be positive");
  PatchEmbedConfig cfg;
  cfg.patch_size = patch_size;
  cfg.hidden_dim = hidden_dim;
  cfg.out_dim = out_dim;
  cfg.seed = seed;
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  int in = patch_size * patch_size;
  std::array<std::pair<int, int>, 4> shapes{{{hidden_dim, in}, {hidden_dim, hidden_dim}, {hidden_dim, hidden_dim}, {out_dim, hidden_dim}}};
  for (auto [rows, cols] : shapes) {
    Mat w(rows, cols);
    double std_dev = std::sqrt(2.0 / cols);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = n(rng) * std_dev;
    cfg.w.push_back(std::move(w));
    cfg.b.push_back(Vec::Zero(rows));
  }
  return cfg;
}

namespace detail {

// Mean/std-normalized flattened patch, the MLP's input layer.
inline Vec patch_vector(const ImageGray& img, const Keypoint& kp, int patch_size) {
  int half = patch_size / 2;
  int cx = static_cast<int>(std::lround(kp.x));
  int cy = static_cast<int>(std::lround(kp.y));
  if (cx - half < 0 || cx + half >= img.width || cy - half < 0 || cy + half >= img.height)
    throw PatchOutOfBounds("embedding patch leaves the image");
  Vec v(patch_size * patch_size);
  int i = 0;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) v[i++] = img.at(cx + dx, cy + dy);
  double mean = v.mean();
  double var = (v.array() - mean).square().mean();
  return (v.array() - mean) / std::sqrt(var + 1e-8);
}

}  // namespace detail

inline RealDescriptor patch_embed(const ImageGray& img, const Keypoint& kp, const PatchEmbedConfig& cfg) {
  if (!cfg.initialized()) throw Error("patch embed config has no weights");
  Vec x = detail::patch_vector(img, kp, cfg.patch_size);
  for (int layer = 0; layer < 4; ++layer) {
    x = (cfg.w[layer] * x + cfg.b[layer]).eval();
    if (layer < 3) x = x.cwiseMax(0.0);
  }
  double n = x.norm();
  if (n < 1e-12) throw Error("degenerate patch embedding");
  return RealDescriptor{x / n, SourceId::patch_mlp};
}

struct Projection {
  Mat w;  // model_dim x input_dim
  Vec b;  // model_dim
};

inline Vec binary_to_real(const BinaryDescriptor& d) {
  Vec v(kBinaryBits);
  for (int i = 0; i < kBinaryBits; ++i) v[i] = (d.get(i) ? 1.0 : -1.0) / 16.0;
  return v;
}

inline RealDescriptor project_descriptor(const RealDescriptor& d, const Projection& proj) {
  if (proj.w.cols() != d.values.size() || proj.b.size() != proj.w.rows())
    throw DimensionMismatch("projection shape does not match descriptor");
  Vec y = proj.w * d.values + proj.b;
  double n = y.norm();
  // A collapsed projection carries no appearance signal; keep it at zero
  // rather than blowing up the normalization.
  if (n < 1e-12) return RealDescriptor{Vec::Zero(y.size()), d.source_id};
  return RealDescriptor{y / n, d.source_id};
}

inline RealDescriptor project_descriptor(const BinaryDescriptor& d, const Projection& proj) {
  return project_descriptor(RealDescriptor{binary_to_real(d), SourceId::brief}, proj);
}

// One image's keypoints plus their descriptors, the unit every matching
// stage consumes. Exactly one of real/binary is populated.
struct FeatureSet {
  int width = 0, height = 0;
  std::vector<Keypoint> keypoints;
  Mat real_desc;  // M x D
  std::vector<BinaryDescriptor> binary_desc;
  SourceId source_id = SourceId::dense_sift;

  int count() const { return static_cast<int>(keypoints.size()); }
  bool is_binary() const { return source_id == SourceId::brief; }

  // Real-valued view the matcher ingests; binary expands to scaled +-1.
  Mat matcher_input() const {
    if (!is_binary()) return real_desc;
    Mat m(static_cast<Eigen::Index>(binary_desc.size()), kBinaryBits);
    for (std::size_t i = 0; i < binary_desc.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = binary_to_real(binary_desc[i]).transpose();
    return m;
  }
};

struct DescribeConfig {
  SourceId source = SourceId::dense_sift;
  int stride = 4;
  PatchEmbedConfig patch;  // only used for patch_mlp
};

// Detection-to-descriptor glue: keypoints whose descriptor support leaves
// the image are dropped rather than padded.
inline FeatureSet describe_keypoints(const ImageGray& img, const std::vector<Keypoint>& kps,
                                     const DescribeConfig& cfg) {
  FeatureSet out;
  out.width = img.width;
  out.height = img.height;
  out.source_id = cfg.source;
  if (cfg.source == SourceId::dense_sift) {
    DescriptorMap map = dense_descriptor_map(img, cfg.stride);
    std::vector<Vec> rows;
    for (const Keypoint& kp : kps) {
      try {
        RealDescriptor d = sample_descriptor(map, kp);
        rows.push_back(d.values);
        out.keypoints.push_back(kp);
      } catch (const OutOfBounds&) {
      }
    }
    out.real_desc = Mat::Zero(static_cast<Eigen::Index>(rows.size()), detail::kSiftDim);
    for (std::size_t i = 0; i < rows.size(); ++i) out.real_desc.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  } else if (cfg.source == SourceId::brief) {
    ImageGray smoothed = gaussian_blur(img, 2.0);
    for (const Keypoint& kp : kps) {
      try {
        out.binary_desc.push_back(detail::binary_from_smoothed(smoothed, kp));
        out.keypoints.push_back(kp);
      } catch (const PatchOutOfBounds&) {
      }
    }
  } else {
    std::vector<Vec> rows;
    for (const Keypoint& kp : kps) {
      try {
        RealDescriptor d = patch_embed(img, kp, cfg.patch);
        rows.push_back(d.values);
        out.keypoints.push_back(kp);
      } catch (const PatchOutOfBounds&) {
      }
    }
    out.real_desc = Mat::Zero(static_cast<Eigen::Index>(rows.size()), cfg.patch.out_dim);
    for (std::size_t i = 0; i < rows.size(); ++i) out.real_desc.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  }
  return out;
}

inline std::string write_descriptors(const FeatureSet& fs) {
  std::string out = "MKDS";
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(fs.count()));
  if (fs.is_binary()) {
    put_u32(out, kBinaryBits);
    out.push_back(1);
    for (const BinaryDescriptor& d : fs.binary_desc)
      for (int byte = 0; byte < kBinaryBits / 8; ++byte) {
        unsigned char v = 0;
        for (int bit = 0; bit < 8; ++bit) v |= static_cast<unsigned char>(d.get(byte * 8 + bit)) << bit;
        out.push_back(static_cast<char>(v));
      }
  } else {
    put_u32(out, static_cast<std::uint32_t>(fs.real_desc.cols()));
    out.push_back(0);
    for (Eigen::Index i = 0; i < fs.real_desc.rows(); ++i)
      for (Eigen::Index j = 0; j < fs.real_desc.cols(); ++j) put_f32(out, static_cast<float>(fs.real_desc(i, j)));
  }
  return out;
}

struct DescriptorFile {
  int count = 0, dim = 0;
  bool binary = false;
  Mat real;
  std::vector<BinaryDescriptor> bits;
};

inline DescriptorFile read_descriptors(const std::string& bytes) {
  if (bytes.size() < 13 || bytes.compare(0, 4, "MKDS") != 0) throw Error("bad descriptor magic");
  ByteReader r{bytes, 4};
  std::uint32_t version = r.u32();
  if (version != 1) throw Error("unsupported descriptor version");
  DescriptorFile f;
  f.count = static_cast<int>(r.u32());
  f.dim = static_cast<int>(r.u32());
  if (!r.need(1)) throw Error("truncated descriptor file");
  f.binary = bytes[r.pos++] == 1;
  if (f.binary) {
    if (f.dim != kBinaryBits) throw Error("binary descriptors must be 256-bit");
    for (int i = 0; i < f.count; ++i) {
      BinaryDescriptor d;
      for (int byte = 0; byte < kBinaryBits / 8; ++byte) {
        if (!r.need(1)) throw Error("truncated descriptor file");
        unsigned char v = static_cast<unsigned char>(bytes[r.pos++]);
        for (int bit = 0; bit < 8; ++bit) d.set(byte * 8 + bit, (v >> bit) & 1);
      }
      f.bits.push_back(d);
    }
  } else {
    f.real = Mat::Zero(f.count, f.dim);
    for (int i = 0; i < f.count; ++i)
      for (int j = 0; j < f.dim; ++j) f.real(i, j) = r.f32();
  }
  return f;
}

}  // namespace matchkit
