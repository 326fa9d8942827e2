#pragma once
// Classical matching baselines: mutual nearest neighbor, Lowe-style ratio
// test, and Hamming distance for binary descriptors. Brute-force O(MN)
// distances; desk-scale inputs never justify an index.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "matchkit/describe.hpp"
#include "matchkit/geometry.hpp"
#include "matchkit/matchset.hpp"

namespace matchkit {

enum class MatchMetric : int { euclidean = 0, cosine = 1, hamming = 2 };

inline int hamming(const BinaryDescriptor& a, const BinaryDescriptor& b) {
  int d = 0;
  for (std::size_t w = 0; w < a.bits.size(); ++w) d += std::popcount(a.bits[w] ^ b.bits[w]);
  return d;
}

namespace detail {

// M x N distance matrix, blocked over queries for cache friendliness.
inline Mat distance_matrix(const Mat& a, const Mat& b, MatchMetric metric) {
  if (a.rows() == 0 || b.rows() == 0) throw EmptyInput("descriptor lists must be nonempty");
  if (a.cols() != b.cols()) throw DimensionMismatch("descriptor dims differ");
  const Eigen::Index m = a.rows(), n = b.rows();
  Mat d(m, n);
  constexpr Eigen::Index kBlock = 64;
  for (Eigen::Index r0 = 0; r0 < m; r0 += kBlock) {
    const Eigen::Index rows = std::min(kBlock, m - r0);
    Mat dots = a.middleRows(r0, rows) * b.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < n; ++c) {
        if (metric == MatchMetric::euclidean) {
          const double sq = a.row(r0 + r).squaredNorm() + b.row(c).squaredNorm() - 2.0 * dots(r, c);
          d(r0 + r, c) = std::sqrt(std::max(0.0, sq));
        } else {
          const double na = a.row(r0 + r).norm(), nb = b.row(c).norm();
          const double cosine = (na > 0 && nb > 0) ? dots(r, c) / (na * nb) : 0.0;
          d(r0 + r, c) = 1.0 - cosine;
        }
      }
    }
  }
  return d;
}

inline Mat distance_matrix(const std::vector<BinaryDescriptor>& a, const std::vector<BinaryDescriptor>& b) {
  if (a.empty() || b.empty()) throw EmptyInput("descriptor lists must be nonempty");
  Mat d(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = hamming(a[i], b[j]);
  return d;
}

// First index attaining the row minimum; ties go to the smaller index.
inline int argmin_row(const Mat& d, Eigen::Index i) {
  int best = 0;
  for (Eigen::Index j = 1; j < d.cols(); ++j)
    if (d(i, j) < d(i, best)) best = static_cast<int>(j);
  return best;
}

inline int argmin_col(const Mat& d, Eigen::Index j) {
  int best = 0;
  for (Eigen::Index i = 1; i < d.rows(); ++i)
    if (d(i, j) < d(best, j)) best = static_cast<int>(i);
  return best;
}

inline MatchSet mutual_from_distances(const Mat& d) {
  const double dist_max = d.maxCoeff();
  MatchSet out;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const int j = argmin_row(d, i);
    if (argmin_col(d, j) != static_cast<int>(i)) continue;
    const double conf = dist_max > 0 ? 1.0 - d(i, j) / dist_max : 1.0;
    out.pairs.push_back({static_cast<int>(i), j, conf});
  }
  return out;
}

inline MatchSet ratio_from_distances(const Mat& d, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error("ratio must be in (0, 1]");
  if (d.cols() < 2) throw Error("ratio test needs at least 2 candidates");
  const double dist_max = d.maxCoeff();
  MatchSet out;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    const int j = argmin_row(d, i);
    if (ratio < 1.0) {
      double second = std::numeric_limits<double>::infinity();
      for (Eigen::Index jj = 0; jj < d.cols(); ++jj)
        if (jj != j && d(i, jj) < second) second = d(i, jj);
      // Ambiguous queries (tied or zero second distance) never pass a
      // strict ratio; at ratio 1 the filter is off so mutual_nn is exact.
      if (!(d(i, j) < ratio * second)) continue;
    }
    if (argmin_col(d, j) != static_cast<int>(i)) continue;
    const double conf = dist_max > 0 ? 1.0 - d(i, j) / dist_max : 1.0;
    out.pairs.push_back({static_cast<int>(i), j, conf});
  }
  return out;
}

}  // namespace detail

inline MatchSet mutual_nn(const Mat& desc_a, const Mat& desc_b, MatchMetric metric) {
  if (metric == MatchMetric::hamming) throw Error("hamming metric needs binary descriptors");
  return detail::mutual_from_distances(detail::distance_matrix(desc_a, desc_b, metric));
}

inline MatchSet mutual_nn(const std::vector<BinaryDescriptor>& desc_a,
                          const std::vector<BinaryDescriptor>& desc_b) {
  return detail::mutual_from_distances(detail::distance_matrix(desc_a, desc_b));
}

inline MatchSet ratio_test(const Mat& desc_a, const Mat& desc_b, MatchMetric metric, double ratio) {
  if (metric == MatchMetric::hamming) throw Error("hamming metric needs binary descriptors");
  return detail::ratio_from_distances(detail::distance_matrix(desc_a, desc_b, metric), ratio);
}

inline MatchSet ratio_test(const std::vector<BinaryDescriptor>& desc_a,
                           const std::vector<BinaryDescriptor>& desc_b, double ratio) {
  return detail::ratio_from_distances(detail::distance_matrix(desc_a, desc_b), ratio);
}

// Metric dispatch over a FeatureSet pair: binary sources go through hamming,
// real sources through the requested vector metric.
inline MatchSet baseline_match(const FeatureSet& a, const FeatureSet& b, MatchMetric metric,
                               double ratio = 1.0) {
  if (a.is_binary() != b.is_binary()) throw DimensionMismatch("cannot mix binary and real descriptors");
  if (a.is_binary()) {
    if (metric != MatchMetric::hamming) throw Error("binary descriptors require the hamming metric");
    return ratio < 1.0 ? ratio_test(a.binary_desc, b.binary_desc, ratio)
                       : mutual_nn(a.binary_desc, b.binary_desc);
  }
  return ratio < 1.0 ? ratio_test(a.real_desc, b.real_desc, metric, ratio)
                     : mutual_nn(a.real_desc, b.real_desc, metric);
}

}  // namespace matchkit
