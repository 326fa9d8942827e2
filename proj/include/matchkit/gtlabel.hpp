#pragma once

#include "matchkit/describe.hpp"
#include "matchkit/geometry.hpp"

#include <limits>
#include <sstream>
#include <variant>

namespace matchkit {

struct GTLabels {
  std::vector<std::pair<int, int>> matches;
  std::vector<int> negatives_a, negatives_b;
  std::vector<int> ignored_a, ignored_b;
};

struct PosedSupervision {
  CameraPose pose;  // camera A to camera B
  Intrinsics ka, kb;
  DepthMap depth_a, depth_b;
};

struct PairSupervision {
  std::variant<Homography, PosedSupervision> transform;
  double match_threshold = 3.0;
  double negative_threshold = 6.0;
  // Two-way reprojection with max aggregation by default; one-way (A to B
  // only) stays available for sensitivity runs.
  bool symmetric = true;
};

inline Mat reprojection_error_matrix(const std::vector<Keypoint>& kps_a, const std::vector<Keypoint>& kps_b,
                                     const PairSupervision& sup) {
  const double inf = std::numeric_limits<double>::infinity();
  Eigen::Index m = static_cast<Eigen::Index>(kps_a.size());
  Eigen::Index n = static_cast<Eigen::Index>(kps_b.size());
  Mat err(m, n);

  if (const Homography* h = std::get_if<Homography>(&sup.transform)) {
    for (Eigen::Index i = 0; i < m; ++i) {
      Vec2 w = warp_point(*h, Vec2(kps_a[i].x, kps_a[i].y));
      for (Eigen::Index j = 0; j < n; ++j)
        err(i, j) = (w - Vec2(kps_b[j].x, kps_b[j].y)).norm();
    }
    return err;
  }

  const PosedSupervision& ps = std::get<PosedSupervision>(sup.transform);
  CameraPose inv = ps.pose.inverse();

  // Forward (A into B) reprojections; rows with invalid depth or off-image
  // projections become infinite.
  std::vector<Vec2> fwd(kps_a.size());
  std::vector<bool> fwd_ok(kps_a.size(), false);
  for (std::size_t i = 0; i < kps_a.size(); ++i) {
    double d = ps.depth_a.at_nearest(Vec2(kps_a[i].x, kps_a[i].y));
    if (!(d > 0)) continue;
    try {
      Vec2 p = reproject(Vec2(kps_a[i].x, kps_a[i].y), d, ps.ka, ps.kb, ps.pose);
      if (p.x() < 0 || p.x() > ps.depth_b.width - 1 || p.y() < 0 || p.y() > ps.depth_b.height - 1) continue;
      fwd[i] = p;
      fwd_ok[i] = true;
    } catch (const BehindCamera&) {
    }
  }
  std::vector<Vec2> bwd(kps_b.size());
  std::vector<bool> bwd_ok(kps_b.size(), false);
  if (sup.symmetric) {
    for (std::size_t j = 0; j < kps_b.size(); ++j) {
      double d = ps.depth_b.at_nearest(Vec2(kps_b[j].x, kps_b[j].y));
      if (!(d > 0)) continue;
      try {
        Vec2 p = reproject(Vec2(kps_b[j].x, kps_b[j].y), d, ps.kb, ps.ka, inv);
        if (p.x() < 0 || p.x() > ps.depth_a.width - 1 || p.y() < 0 || p.y() > ps.depth_a.height - 1) continue;
        bwd[j] = p;
        bwd_ok[j] = true;
      } catch (const BehindCamera&) {
      }
    }
  }

  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!fwd_ok[i]) {
        err(i, j) = inf;
        continue;
      }
      double e = (fwd[i] - Vec2(kps_b[j].x, kps_b[j].y)).norm();
      if (sup.symmetric) {
        if (!bwd_ok[j]) {
          err(i, j) = inf;
          continue;
        }
        e = std::max(e, (bwd[j] - Vec2(kps_a[i].x, kps_a[i].y)).norm());
      }
      err(i, j) = e;
    }
  return err;
}

// Match rule: strict minimum along both its row and its column, below the
// match threshold. Ties produce no match.
inline GTLabels label_correspondences(const Mat& err, const PairSupervision& sup) {
  if (!(sup.match_threshold > 0)) throw Error("match_threshold must be positive");
  Eigen::Index m = err.rows(), n = err.cols();
  GTLabels out;
  std::vector<bool> matched_a(m, false), matched_b(n, false);

  // An entry is the strict minimum of its line iff it equals the line
  // minimum and that minimum occurs exactly once.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> row_min(m, inf), col_min(n, inf);
  std::vector<int> row_cnt(m, 0), col_cnt(n, 0);
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double e = err(i, j);
      if (e < row_min[i]) {
        row_min[i] = e;
        row_cnt[i] = 1;
      } else if (e == row_min[i] && e < inf) {
        ++row_cnt[i];
      }
      if (e < col_min[j]) {
        col_min[j] = e;
        col_cnt[j] = 1;
      } else if (e == col_min[j] && e < inf) {
        ++col_cnt[j];
      }
    }
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double e = err(i, j);
      if (!(e < sup.match_threshold)) continue;
      if (e == row_min[i] && row_cnt[i] == 1 && e == col_min[j] && col_cnt[j] == 1) {
        out.matches.push_back({static_cast<int>(i), static_cast<int>(j)});
        matched_a[i] = true;
        matched_b[j] = true;
      }
    }

  for (Eigen::Index i = 0; i < m; ++i) {
    if (matched_a[i]) continue;
    double row_min = n > 0 ? err.row(i).minCoeff() : std::numeric_limits<double>::infinity();
    if (row_min >= sup.negative_threshold)
      out.negatives_a.push_back(static_cast<int>(i));
    else
      out.ignored_a.push_back(static_cast<int>(i));
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    if (matched_b[j]) continue;
    double col_min = m > 0 ? err.col(j).minCoeff() : std::numeric_limits<double>::infinity();
    if (col_min >= sup.negative_threshold)
      out.negatives_b.push_back(static_cast<int>(j));
    else
      out.ignored_b.push_back(static_cast<int>(j));
  }
  return out;
}

inline GTLabels labels_for_pair(const FeatureSet& feat_a, const FeatureSet& feat_b, const PairSupervision& sup) {
  if (feat_a.count() == 0 || feat_b.count() == 0) throw EmptyInput("labels need nonempty feature sets");
  Mat err = reprojection_error_matrix(feat_a.keypoints, feat_b.keypoints, sup);
  GTLabels labels = label_correspondences(err, sup);
  if (static_cast<int>(log_level()) >= static_cast<int>(LogLevel::info)) {
    long na = count_nearby_pairs(feat_a.keypoints, sup.match_threshold);
    long nb = count_nearby_pairs(feat_b.keypoints, sup.match_threshold);
    log_info("labels: " + std::to_string(labels.matches.size()) + " matches, nearby pairs a=" +
             std::to_string(na) + " b=" + std::to_string(nb));
  }
  return labels;
}

inline std::string write_labels(const GTLabels& labels) {
  std::string out = "# matchkit-labels v1\n";
  for (auto [i, j] : labels.matches) out += "M " + std::to_string(i) + " " + std::to_string(j) + "\n";
  for (int i : labels.negatives_a) out += "NA " + std::to_string(i) + "\n";
  for (int j : labels.negatives_b) out += "NB " + std::to_string(j) + "\n";
  for (int i : labels.ignored_a) out += "IA " + std::to_string(i) + "\n";
  for (int j : labels.ignored_b) out += "IB " + std::to_string(j) + "\n";
  return out;
}

inline GTLabels read_labels(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "# matchkit-labels v1") throw Error("bad labels header");
  GTLabels out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "M") {
      int i, j;
      if (!(ls >> i >> j)) throw Error("bad labels line: " + line);
      out.matches.push_back({i, j});
    } else {
      int i;
      if (!(ls >> i)) throw Error("bad labels line: " + line);
      if (tag == "NA")
        out.negatives_a.push_back(i);
      else if (tag == "NB")
        out.negatives_b.push_back(i);
      else if (tag == "IA")
        out.ignored_a.push_back(i);
      else if (tag == "IB")
        out.ignored_b.push_back(i);
      else
        throw Error("unknown labels tag: " + tag);
    }
  }
  return out;
}

}  // namespace matchkit
