#pragma once

#include "matchkit/common.hpp"
#include "matchkit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace matchkit {

struct InvalidImage : Error {
  using Error::Error;
};

struct ImageGray {
  int width = 0, height = 0;
  std::vector<double> px;  // row-major, values in [0,1]

  static ImageGray zeros(int w, int h) {
    if (w < 16 || h < 16) throw InvalidImage("image sides must be at least 16 px");
    ImageGray img;
    img.width = w;
    img.height = h;
    img.px.assign(static_cast<std::size_t>(w) * h, 0.0);
    return img;
  }

  double& at(int x, int y) { return px[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return px[static_cast<std::size_t>(y) * width + x]; }

  double at_clamped(int x, int y) const {
    x = std::clamp(x, 0, width - 1);
    y = std::clamp(y, 0, height - 1);
    return at(x, y);
  }

  double bilinear(double x, double y) const {
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    double v00 = at_clamped(x0, y0), v10 = at_clamped(x0 + 1, y0);
    double v01 = at_clamped(x0, y0 + 1), v11 = at_clamped(x0 + 1, y0 + 1);
    return (1 - fy) * ((1 - fx) * v00 + fx * v10) + fy * ((1 - fx) * v01 + fx * v11);
  }

  void clamp01() {
    for (double& v : px) v = std::clamp(v, 0.0, 1.0);
  }
};

inline std::vector<double> gaussian_kernel(double sigma) {
  int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

inline ImageGray gaussian_blur(const ImageGray& img, double sigma) {
  if (sigma <= 0) return img;
  std::vector<double> k = gaussian_kernel(sigma);
  int radius = (static_cast<int>(k.size()) - 1) / 2;
  ImageGray tmp = img, out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at_clamped(x + i, y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at_clamped(x, y + i);
      out.at(x, y) = acc;
    }
  return out;
}

// Pixel-center resampling: output pixel (x,y) reads the source at the
// geometrically corresponding center.
inline ImageGray resize_bilinear(const ImageGray& img, int new_w, int new_h) {
  ImageGray out = ImageGray::zeros(new_w, new_h);
  double sx = static_cast<double>(img.width) / new_w;
  double sy = static_cast<double>(img.height) / new_h;
  for (int y = 0; y < new_h; ++y)
    for (int x = 0; x < new_w; ++x) out.at(x, y) = img.bilinear((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
  return out;
}

struct GradientField {
  int width = 0, height = 0;
  std::vector<double> gx, gy;

  double dx(int x, int y) const { return gx[static_cast<std::size_t>(y) * width + x]; }
  double dy(int x, int y) const { return gy[static_cast<std::size_t>(y) * width + x]; }
};

// Sobel scaled by 1/8 so a unit intensity step reads as a unit-order slope.
inline GradientField sobel_gradients(const ImageGray& img) {
  GradientField g;
  g.width = img.width;
  g.height = img.height;
  g.gx.assign(img.px.size(), 0.0);
  g.gy.assign(img.px.size(), 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      auto p = [&](int dx, int dy) { return img.at_clamped(x + dx, y + dy); };
      g.gx[static_cast<std::size_t>(y) * img.width + x] =
          (p(1, -1) + 2 * p(1, 0) + p(1, 1) - p(-1, -1) - 2 * p(-1, 0) - p(-1, 1)) / 8.0;
      g.gy[static_cast<std::size_t>(y) * img.width + x] =
          (p(-1, 1) + 2 * p(0, 1) + p(1, 1) - p(-1, -1) - 2 * p(0, -1) - p(1, -1)) / 8.0;
    }
  return g;
}

// Central differences, used by the descriptor histograms.
inline GradientField central_gradients(const ImageGray& img) {
  GradientField g;
  g.width = img.width;
  g.height = img.height;
  g.gx.assign(img.px.size(), 0.0);
  g.gy.assign(img.px.size(), 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      g.gx[static_cast<std::size_t>(y) * img.width + x] = (img.at_clamped(x + 1, y) - img.at_clamped(x - 1, y)) / 2.0;
      g.gy[static_cast<std::size_t>(y) * img.width + x] = (img.at_clamped(x, y + 1) - img.at_clamped(x, y - 1)) / 2.0;
    }
  return g;
}

// Backward warp: out(p) = img(H^-1 p); pixels that map outside read as 0.
inline ImageGray warp_image(const ImageGray& img, const Homography& h) {
  Homography inv = h.inverse();
  ImageGray out = ImageGray::zeros(img.width, img.height);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      Vec2 src;
      try {
        src = warp_point(inv, Vec2(x, y));
      } catch (const DegenerateWarp&) {
        continue;
      }
      if (src.x() < -0.5 || src.x() > img.width - 0.5 || src.y() < -0.5 || src.y() > img.height - 0.5) continue;
      out.at(x, y) = img.bilinear(src.x(), src.y());
    }
  return out;
}

// 8-bit binary PGM; the quantization here defines the on-disk precision of
// every generated dataset image.
inline void write_pgm(const ImageGray& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for write: " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::string buf;
  buf.reserve(img.px.size());
  for (double v : img.px) {
    int q = static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    buf.push_back(static_cast<char>(q));
  }
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw Error("short write: " + path);
}

inline ImageGray read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for read: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw Error("not a binary PGM: " + path);
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w < 16 || h < 16 || maxval != 255) throw Error("unsupported PGM header: " + path);
  f.get();  // single whitespace byte after the header
  std::vector<char> raw(static_cast<std::size_t>(w) * h);
  f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!f) throw Error("truncated PGM: " + path);
  ImageGray img = ImageGray::zeros(w, h);
  for (std::size_t i = 0; i < raw.size(); ++i) img.px[i] = static_cast<unsigned char>(raw[i]) / 255.0;
  return img;
}

}  // namespace matchkit
