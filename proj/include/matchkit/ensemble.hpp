#pragma once
// Multi-detector ensemble inference: run several detectors to per-detector
// budgets, merge with rank-normalized cross-detector NMS, then describe
// every survivor from one fixed descriptor source so a single matcher can
// consume the union.

#include <algorithm>
#include <cmath>
#include <vector>

#include "matchkit/describe.hpp"
#include "matchkit/detect.hpp"

namespace matchkit {

struct EnsembleConfig {
  std::vector<DetectorConfig> detectors;
  int per_detector_budget = 512;
  double cross_nms_radius = 3.0;  // 0 keeps every budgeted keypoint
  DescribeConfig descriptor;      // the single descriptor source
};

namespace detail {

// Greedy radius suppression ordered by externally supplied priorities.
// Raw responses of different detectors are incommensurable, so the caller
// passes per-detector rank-normalized scores instead of kp.score.
inline std::vector<Keypoint> cross_nms(const std::vector<Keypoint>& kps, const std::vector<double>& priority,
                                       double radius) {
  std::vector<int> order(kps.size());
  for (std::size_t i = 0; i < kps.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return priority[static_cast<std::size_t>(a)] > priority[static_cast<std::size_t>(b)];
  });
  const double r2 = radius * radius;
  std::vector<Keypoint> kept;
  for (int i : order) {
    const Keypoint& kp = kps[static_cast<std::size_t>(i)];
    bool suppressed = false;
    for (const Keypoint& k : kept) {
      const double dx = kp.x - k.x, dy = kp.y - k.y;
      if (dx * dx + dy * dy <= r2) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(kp);
  }
  return kept;
}

}  // namespace detail

inline std::vector<Keypoint> merge_keypoints(const ImageGray& img, const EnsembleConfig& cfg) {
  if (cfg.detectors.empty()) throw Error("ensemble needs at least one detector");
  if (cfg.per_detector_budget < 1) throw Error("per-detector budget must be >= 1");

  std::vector<Keypoint> merged;
  std::vector<double> priority;
  for (const DetectorConfig& dc : cfg.detectors) {
    std::vector<Keypoint> kps = top_k(detect(img, dc), cfg.per_detector_budget);
    // Rank-normalized score in (0, 1]: rank 0 is the detector's best. top_k
    // returns score-descending order, which is exactly the rank order.
    const double n = static_cast<double>(kps.size());
    for (std::size_t r = 0; r < kps.size(); ++r) {
      merged.push_back(kps[r]);
      priority.push_back(1.0 - static_cast<double>(r) / n);
    }
  }
  if (cfg.cross_nms_radius > 0) merged = detail::cross_nms(merged, priority, cfg.cross_nms_radius);
  return merged;
}

inline FeatureSet merge_features(const ImageGray& img, const EnsembleConfig& cfg) {
  return describe_keypoints(img, merge_keypoints(img, cfg), cfg.descriptor);
}

}  // namespace matchkit
