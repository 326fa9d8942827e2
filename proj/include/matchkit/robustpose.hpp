#pragma once
// Robust two-view geometry: LO-RANSAC for homography and essential-matrix
// estimation, cheirality-based pose recovery, and the per-pair evaluation
// protocol (threshold sweep, angular pose error, inlier count).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "matchkit/detect.hpp"
#include "matchkit/geometry.hpp"
#include "matchkit/matchset.hpp"

namespace matchkit {

struct TooFewPoints : Error {
  using Error::Error;
};
struct CheiralityTie : Error {
  using Error::Error;
};
struct DegenerateModel : Error {
  using Error::Error;
};

struct RansacConfig {
  int max_iterations = 2000;
  // Pixel threshold grid; the estimators consume the first entry, the
  // evaluation protocol sweeps the whole grid and keeps the max-inlier run.
  std::vector<double> thresholds = {0.5, 1.0, 2.0};
  double confidence = 0.9999;
  bool lo_enabled = true;
  int lo_max_points = 64;
  std::uint64_t seed = 0;
};

struct EstimateResult {
  Mat3 model = Mat3::Identity();
  std::vector<int> inliers;
  int num_inliers = 0;
  double threshold_used = 0.0;
  bool planar_degenerate = false;  // essential path: homography explains >= 95% of inliers
};

using Correspondences = std::vector<std::pair<Vec2, Vec2>>;

namespace detail {

inline void validate_ransac(const RansacConfig& cfg) {
  if (!(cfg.confidence > 0.0 && cfg.confidence < 1.0)) throw Error("confidence must be in (0, 1)");
  if (cfg.thresholds.empty()) throw Error("threshold grid must be nonempty");
  for (double t : cfg.thresholds)
    if (!(t > 0.0)) throw Error("thresholds must be positive");
  if (cfg.max_iterations < 1) throw Error("max_iterations must be >= 1");
}

// Hartley conditioning: translate the centroid to the origin and scale the
// mean radius to sqrt(2); DLT is numerically unusable without it.
inline Mat3 hartley_transform(const Correspondences& corr, const std::vector<int>& idx, bool side_b) {
  Vec2 c = Vec2::Zero();
  for (int i : idx) c += side_b ? corr[static_cast<std::size_t>(i)].second : corr[static_cast<std::size_t>(i)].first;
  c /= static_cast<double>(idx.size());
  double mean_dist = 0;
  for (int i : idx) {
    const Vec2& p = side_b ? corr[static_cast<std::size_t>(i)].second : corr[static_cast<std::size_t>(i)].first;
    mean_dist += (p - c).norm();
  }
  mean_dist /= static_cast<double>(idx.size());
  const double s = mean_dist > 1e-12 ? std::sqrt(2.0) / mean_dist : 1.0;
  Mat3 t = Mat3::Identity();
  t(0, 0) = s;
  t(1, 1) = s;
  t(0, 2) = -s * c.x();
  t(1, 2) = -s * c.y();
  return t;
}

inline Vec3 apply3(const Mat3& t, const Vec2& p) { return t * Vec3(p.x(), p.y(), 1.0); }

// Normalized DLT on the indexed subset; least squares when over-determined.
inline Mat3 homography_dlt(const Correspondences& corr, const std::vector<int>& idx) {
  const Mat3 ta = hartley_transform(corr, idx, false);
  const Mat3 tb = hartley_transform(corr, idx, true);
  Mat a(2 * static_cast<Eigen::Index>(idx.size()), 9);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Vec3 p = apply3(ta, corr[static_cast<std::size_t>(idx[k])].first);
    const Vec3 q = apply3(tb, corr[static_cast<std::size_t>(idx[k])].second);
    const Eigen::Index r = 2 * static_cast<Eigen::Index>(k);
    a.row(r) << 0, 0, 0, -q.z() * p.x(), -q.z() * p.y(), -q.z() * p.z(), q.y() * p.x(), q.y() * p.y(),
        q.y() * p.z();
    a.row(r + 1) << q.z() * p.x(), q.z() * p.y(), q.z() * p.z(), 0, 0, 0, -q.x() * p.x(), -q.x() * p.y(),
        -q.x() * p.z();
  }
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeFullV);
  const Vec h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8];
  Mat3 out = tb.inverse() * hn * ta;
  if (!out.allFinite() || std::abs(out.determinant()) < 1e-14) throw DegenerateModel("homography fit collapsed");
  if (std::abs(out(2, 2)) > 1e-12) out /= out(2, 2);
  return out;
}

// RMS of forward and backward transfer error in pixels; infinite when the
// point maps to the line at infinity.
inline double symmetric_transfer(const Mat3& h, const Mat3& h_inv, const Vec2& a, const Vec2& b) {
  const Vec3 fa = h * Vec3(a.x(), a.y(), 1.0);
  const Vec3 fb = h_inv * Vec3(b.x(), b.y(), 1.0);
  if (std::abs(fa.z()) < 1e-12 || std::abs(fb.z()) < 1e-12) return std::numeric_limits<double>::infinity();
  const double e1 = (Vec2(fa.x() / fa.z(), fa.y() / fa.z()) - b).squaredNorm();
  const double e2 = (Vec2(fb.x() / fb.z(), fb.y() / fb.z()) - a).squaredNorm();
  return std::sqrt(0.5 * (e1 + e2));
}

inline bool has_collinear_triple(const Correspondences& corr, const std::vector<int>& idx) {
  auto area2 = [](const Vec2& p, const Vec2& q, const Vec2& r) {
    return std::abs((q.x() - p.x()) * (r.y() - p.y()) - (q.y() - p.y()) * (r.x() - p.x()));
  };
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j)
      for (std::size_t k = j + 1; k < idx.size(); ++k) {
        const auto &pa = corr[static_cast<std::size_t>(idx[i])], &pb = corr[static_cast<std::size_t>(idx[j])],
                   &pc = corr[static_cast<std::size_t>(idx[k])];
        if (area2(pa.first, pb.first, pc.first) < 1e-9 || area2(pa.second, pb.second, pc.second) < 1e-9)
          return true;
      }
  return false;
}

inline std::vector<int> sample_distinct(Rng& rng, int n, int k) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(k));
  while (static_cast<int>(out.size()) < k) {
    const int cand = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
    if (std::find(out.begin(), out.end(), cand) == out.end()) out.push_back(cand);
  }
  return out;
}

inline int adaptive_iterations(int inliers, int total, double confidence, int sample_size, int cap) {
  const double w = static_cast<double>(inliers) / static_cast<double>(total);
  const double denom = std::log(1.0 - std::min(1.0 - 1e-12, std::pow(w, sample_size)));
  if (!(denom < 0.0)) return cap;
  const double need = std::log(1.0 - confidence) / denom;
  if (!(need < static_cast<double>(cap))) return cap;
  return std::max(1, static_cast<int>(std::ceil(need)));
}

inline std::vector<int> capped(const std::vector<int>& idx, int cap) {
  if (static_cast<int>(idx.size()) <= cap) return idx;
  return std::vector<int>(idx.begin(), idx.begin() + cap);
}

// Shared RANSAC skeleton: FitFn(list of indices) -> model (throws
// DegenerateModel), ResidualFn(model, index) -> residual in threshold units.
template <typename FitFn, typename ResidualFn>
EstimateResult ransac_loop(int n, int sample_size, double threshold, const RansacConfig& cfg, FitFn fit,
                           ResidualFn residual) {
  Rng rng(cfg.seed);
  EstimateResult best;
  best.threshold_used = threshold;
  double best_score = std::numeric_limits<double>::infinity();
  bool have_model = false;
  int budget = cfg.max_iterations;

  auto score_model = [&](const Mat3& model) {
    std::vector<int> inl;
    double total = 0;
    for (int i = 0; i < n; ++i) {
      const double r = residual(model, i);
      if (r <= threshold) {
        inl.push_back(i);
        total += r;
      }
    }
    return std::make_pair(std::move(inl), total);
  };
  auto consider = [&](const Mat3& model, const std::vector<int>& inl, double total) {
    const bool better = static_cast<int>(inl.size()) > best.num_inliers ||
                        (static_cast<int>(inl.size()) == best.num_inliers && total < best_score);
    if (!better) return false;
    best.model = model;
    best.inliers = inl;
    best.num_inliers = static_cast<int>(inl.size());
    best_score = total;
    have_model = true;
    return true;
  };

  // Reseeding band for local optimization: a least-squares refit from a
  // biased inlier subset can exclude the borderline points that constrain it
  // most, so the next round's support is gathered at twice the threshold.
  auto widened = [&](const Mat3& model) {
    std::vector<int> out;
    for (int i = 0; i < n; ++i)
      if (residual(model, i) <= 2.0 * threshold) out.push_back(i);
    return out;
  };
  auto local_optimize = [&](std::vector<int> seed, int rounds) {
    for (int round = 0; round < rounds && static_cast<int>(seed.size()) >= sample_size; ++round) {
      Mat3 refit;
      try {
        refit = fit(capped(seed, cfg.lo_max_points));
      } catch (const DegenerateModel&) {
        return;
      }
      auto [inl2, total2] = score_model(refit);
      consider(refit, inl2, total2);
      seed = widened(refit);
    }
  };

  for (int iter = 0; iter < budget; ++iter) {
    std::vector<int> sample = sample_distinct(rng, n, sample_size);
    Mat3 model;
    try {
      model = fit(sample);
    } catch (const DegenerateModel&) {
      continue;  // degenerate minimal sample; the iteration still counts
    }
    auto [inl, total] = score_model(model);
    consider(model, inl, total);
    // Polishing every valid sample (not just new bests) keeps noisy minimal
    // fits from locking the search onto a mediocre early model.
    if (cfg.lo_enabled) local_optimize(std::move(inl), 2);
    budget = std::min(budget,
                      iter + 1 + adaptive_iterations(best.num_inliers, n, cfg.confidence, sample_size,
                                                     cfg.max_iterations));
  }
  if (!have_model) throw DegenerateModel("no valid model found");
  if (cfg.lo_enabled) local_optimize(best.inliers, 4);
  return best;
}

}  // namespace detail

inline EstimateResult ransac_homography(const Correspondences& corr, const RansacConfig& cfg) {
  detail::validate_ransac(cfg);
  const int n = static_cast<int>(corr.size());
  if (n < 4) throw TooFewPoints("homography needs >= 4 correspondences");

  // Residuals need the inverse; cache it per candidate model.
  Mat3 cached_model = Mat3::Zero();
  Mat3 cached_inv = Mat3::Zero();
  auto fit = [&](const std::vector<int>& idx) {
    if (idx.size() == 4 && detail::has_collinear_triple(corr, idx)) throw DegenerateModel("collinear sample");
    return detail::homography_dlt(corr, idx);
  };
  auto residual = [&](const Mat3& model, int i) {
    if (model != cached_model) {
      cached_model = model;
      if (std::abs(model.determinant()) < 1e-14) return std::numeric_limits<double>::infinity();
      cached_inv = model.inverse();
    }
    return detail::symmetric_transfer(model, cached_inv, corr[static_cast<std::size_t>(i)].first,
                                      corr[static_cast<std::size_t>(i)].second);
  };
  return detail::ransac_loop(n, 4, cfg.thresholds.front(), cfg, fit, residual);
}

namespace detail {

// Normalized 8-point fit with rank-2 projection and singular-value
// equalization; operates on unit-depth normalized coordinates.
inline Mat3 essential_eight_point(const Correspondences& norm, const std::vector<int>& idx) {
  const Mat3 ta = hartley_transform(norm, idx, false);
  const Mat3 tb = hartley_transform(norm, idx, true);
  Mat a(static_cast<Eigen::Index>(idx.size()), 9);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Vec3 p = apply3(ta, norm[static_cast<std::size_t>(idx[k])].first);
    const Vec3 q = apply3(tb, norm[static_cast<std::size_t>(idx[k])].second);
    a.row(static_cast<Eigen::Index>(k)) << q.x() * p.x(), q.x() * p.y(), q.x(), q.y() * p.x(),
        q.y() * p.y(), q.y(), p.x(), p.y(), 1.0;
  }
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeFullV);
  if (svd.matrixV().cols() < 9) throw DegenerateModel("rank-deficient sample");
  const Vec e = svd.matrixV().col(8);
  Mat3 en;
  en << e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8];
  Mat3 raw = tb.transpose() * en * ta;
  if (!raw.allFinite()) throw DegenerateModel("essential fit collapsed");
  Eigen::JacobiSVD<Mat3> dec(raw, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 s = dec.singularValues();
  if (s[1] < 1e-12) throw DegenerateModel("essential fit collapsed");
  const double m = 0.5 * (s[0] + s[1]);
  return dec.matrixU() * Eigen::DiagonalMatrix<double, 3>(m, m, 0.0) * dec.matrixV().transpose();
}

inline double sampson_residual(const Mat3& e, const Vec2& pa, const Vec2& pb) {
  const Vec3 xa(pa.x(), pa.y(), 1.0), xb(pb.x(), pb.y(), 1.0);
  const Vec3 ea = e * xa;
  const Vec3 eb = e.transpose() * xb;
  const double num = xb.dot(ea);
  const double den = ea.head<2>().squaredNorm() + eb.head<2>().squaredNorm();
  if (den < 1e-18) return std::numeric_limits<double>::infinity();
  return std::abs(num) / std::sqrt(den);
}

}  // namespace detail

inline EstimateResult ransac_essential(const Correspondences& corr, const Intrinsics& k_a,
                                       const Intrinsics& k_b, const RansacConfig& cfg) {
  detail::validate_ransac(cfg);
  const int n = static_cast<int>(corr.size());
  if (n < 8) throw TooFewPoints("essential matrix needs >= 8 correspondences");

  Correspondences norm(corr.size());
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Vec3 na = k_a.normalize(corr[i].first);
    const Vec3 nb = k_b.normalize(corr[i].second);
    norm[i] = {Vec2(na.x(), na.y()), Vec2(nb.x(), nb.y())};
  }
  // Sampson error is computed in normalized coordinates and mapped back to
  // pixels through the mean focal length, so thresholds and reported
  // residuals both stay in pixel units.
  const double favg = 0.25 * (k_a.fx + k_a.fy + k_b.fx + k_b.fy);

  auto fit = [&](const std::vector<int>& idx) { return detail::essential_eight_point(norm, idx); };
  auto residual = [&](const Mat3& model, int i) {
    return favg * detail::sampson_residual(model, norm[static_cast<std::size_t>(i)].first,
                                           norm[static_cast<std::size_t>(i)].second);
  };
  EstimateResult result = detail::ransac_loop(n, 8, cfg.thresholds.front(), cfg, fit, residual);

  // Planar-degeneracy diagnostic: when one homography explains nearly every
  // inlier, the essential solution is ambiguous.
  if (result.num_inliers >= 8) {
    Correspondences inl;
    inl.reserve(result.inliers.size());
    for (int i : result.inliers) inl.push_back(corr[static_cast<std::size_t>(i)]);
    RansacConfig hcfg = cfg;
    hcfg.thresholds = {std::max(cfg.thresholds.front(), 1.0)};
    hcfg.max_iterations = 500;
    try {
      EstimateResult h = ransac_homography(inl, hcfg);
      result.planar_degenerate =
          h.num_inliers >= static_cast<int>(std::ceil(0.95 * static_cast<double>(result.num_inliers)));
    } catch (const Error&) {
      result.planar_degenerate = false;
    }
  }
  return result;
}

namespace detail {

// Linear DLT triangulation in normalized coordinates with P1 = [I|0],
// P2 = [R|t]; returns false when the point is numerically at infinity.
inline bool triangulate(const Mat3& r, const Vec3& t, const Vec2& pa, const Vec2& pb, Vec3* out) {
  Eigen::Matrix<double, 3, 4> p2;
  p2.leftCols<3>() = r;
  p2.col(3) = t;
  Eigen::Matrix<double, 4, 4> a;
  a.row(0) << -1, 0, pa.x(), 0;
  a.row(1) << 0, -1, pa.y(), 0;
  a.row(2) = pb.x() * p2.row(2) - p2.row(0);
  a.row(3) = pb.y() * p2.row(2) - p2.row(1);
  Eigen::JacobiSVD<Eigen::Matrix<double, 4, 4>> svd(a, Eigen::ComputeFullV);
  const Eigen::Vector4d x = svd.matrixV().col(3);
  if (std::abs(x[3]) < 1e-12) return false;
  *out = x.head<3>() / x[3];
  return true;
}

}  // namespace detail

inline CameraPose recover_pose(const Mat3& e, const Correspondences& corr, const Intrinsics& k_a,
                               const Intrinsics& k_b) {
  if (corr.empty()) throw TooFewPoints("pose recovery needs >= 1 correspondence");
  Eigen::JacobiSVD<Mat3> svd(e, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  if (u.determinant() < 0) u.col(2) *= -1;
  if (v.determinant() < 0) v.col(2) *= -1;
  Mat3 w;
  w << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Mat3 r1 = u * w * v.transpose();
  const Mat3 r2 = u * w.transpose() * v.transpose();
  const Vec3 tu = u.col(2);

  const std::pair<Mat3, Vec3> candidates[4] = {{r1, tu}, {r1, (-tu).eval()}, {r2, tu}, {r2, (-tu).eval()}};
  int best = -1, best_count = -1, second_count = -1;
  for (int c = 0; c < 4; ++c) {
    int count = 0;
    for (const auto& pq : corr) {
      const Vec3 na = k_a.normalize(pq.first);
      const Vec3 nb = k_b.normalize(pq.second);
      Vec3 x;
      if (!detail::triangulate(candidates[c].first, candidates[c].second, Vec2(na.x(), na.y()),
                               Vec2(nb.x(), nb.y()), &x))
        continue;
      const double z1 = x.z();
      const double z2 = (candidates[c].first * x + candidates[c].second).z();
      if (z1 > 0 && z2 > 0) ++count;
    }
    if (count > best_count) {
      second_count = best_count;
      best_count = count;
      best = c;
    } else if (count > second_count) {
      second_count = count;
    }
  }
  if (best_count <= 0 || best_count == second_count)
    throw CheiralityTie("no pose candidate has a strict cheirality majority");
  return CameraPose{candidates[best].first, candidates[best].second.normalized()};
}

// One evaluation-protocol run: sweep the threshold grid, keep the run with
// the most inliers, recover the pose, and report angular errors vs GT.
// Failures come back as infinite error with zero inliers, never as throws.
inline std::pair<PoseError, int> evaluate_pair(const MatchSet& matches, const std::vector<Keypoint>& kps_a,
                                               const std::vector<Keypoint>& kps_b, const CameraPose& gt,
                                               const Intrinsics& k_a, const Intrinsics& k_b,
                                               const RansacConfig& cfg) {
  const double inf = std::numeric_limits<double>::infinity();
  const PoseError failure{inf, inf, inf};
  Correspondences corr;
  corr.reserve(matches.pairs.size());
  for (const Match& m : matches.pairs) {
    if (m.i < 0 || m.i >= static_cast<int>(kps_a.size()) || m.j < 0 || m.j >= static_cast<int>(kps_b.size()))
      return {failure, 0};
    corr.push_back({Vec2(kps_a[static_cast<std::size_t>(m.i)].x, kps_a[static_cast<std::size_t>(m.i)].y),
                    Vec2(kps_b[static_cast<std::size_t>(m.j)].x, kps_b[static_cast<std::size_t>(m.j)].y)});
  }
  if (corr.size() < 8) return {failure, 0};

  EstimateResult best;
  bool found = false;
  for (double thr : cfg.thresholds) {
    RansacConfig one = cfg;
    one.thresholds = {thr};
    try {
      EstimateResult r = ransac_essential(corr, k_a, k_b, one);
      if (!found || r.num_inliers > best.num_inliers) {
        best = r;
        found = true;
      }
    } catch (const Error&) {
    }
  }
  if (!found || best.num_inliers < 1) return {failure, 0};

  Correspondences inl;
  inl.reserve(best.inliers.size());
  for (int i : best.inliers) inl.push_back(corr[static_cast<std::size_t>(i)]);
  try {
    const CameraPose est = recover_pose(best.model, inl, k_a, k_b);
    return {pose_error(est, gt), best.num_inliers};
  } catch (const Error&) {
    return {failure, 0};
  }
}

}  // namespace matchkit
