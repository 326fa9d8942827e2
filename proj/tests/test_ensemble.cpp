#include "matchkit/ensemble.hpp"

#include "matchkit/synthgen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <vector>

using namespace matchkit;

namespace {

std::multiset<std::pair<double, double>> positions(const std::vector<Keypoint>& kps) {
  std::multiset<std::pair<double, double>> s;
  for (const Keypoint& k : kps) s.insert({k.x, k.y});
  return s;
}

ImageGray test_image() {
  TextureConfig cfg;
  cfg.kind = TextureKind::mixed;
  return gen_texture(cfg, 424242);
}

}  // namespace

TEST_CASE("a one-detector ensemble equals the plain pipeline") {
  ImageGray img = test_image();
  EnsembleConfig cfg;
  cfg.detectors = {DetectorConfig::corner_defaults()};
  cfg.per_detector_budget = 200;

  std::vector<Keypoint> merged = merge_keypoints(img, cfg);
  std::vector<Keypoint> plain = top_k(detect(img, cfg.detectors[0]), 200);
  CHECK(positions(merged) == positions(plain));
}

TEST_CASE("duplicate detectors collapse under cross-suppression") {
  ImageGray img = test_image();
  EnsembleConfig cfg;
  cfg.detectors = {DetectorConfig::corner_defaults(), DetectorConfig::corner_defaults()};
  cfg.per_detector_budget = 150;

  std::vector<Keypoint> merged = merge_keypoints(img, cfg);
  EnsembleConfig single = cfg;
  single.detectors = {DetectorConfig::corner_defaults()};
  CHECK(positions(merged) == positions(merge_keypoints(img, single)));
}

TEST_CASE("mixed ensembles keep both detector identities and stay deduplicated") {
  ImageGray img = test_image();
  EnsembleConfig cfg;
  cfg.detectors = {DetectorConfig::corner_defaults(), DetectorConfig::blob_defaults()};
  cfg.per_detector_budget = 150;

  std::vector<Keypoint> merged = merge_keypoints(img, cfg);
  REQUIRE(!merged.empty());
  CHECK(merged.size() <= 300);

  bool has_corner = false, has_blob = false;
  for (const Keypoint& k : merged) {
    if (k.detector_id == DetectorKind::corner) has_corner = true;
    if (k.detector_id == DetectorKind::blob) has_blob = true;
  }
  CHECK(has_corner);
  CHECK(has_blob);
  CHECK(count_nearby_pairs(merged, cfg.cross_nms_radius) == 0);

  // Zero radius keeps every candidate from every detector.
  EnsembleConfig raw = cfg;
  raw.cross_nms_radius = 0.0;
  std::vector<Keypoint> unmerged = merge_keypoints(img, raw);
  CHECK(unmerged.size() >= merged.size());
}

TEST_CASE("ensemble descriptors share one source id") {
  ImageGray img = test_image();
  EnsembleConfig cfg;
  cfg.detectors = {DetectorConfig::corner_defaults(), DetectorConfig::blob_defaults()};
  cfg.per_detector_budget = 100;
  cfg.descriptor.source = SourceId::dense_sift;

  FeatureSet fs = merge_features(img, cfg);
  REQUIRE(fs.count() > 0);
  CHECK(fs.source_id == SourceId::dense_sift);
  CHECK(fs.real_desc.rows() == fs.count());

  EnsembleConfig empty;
  empty.detectors = {};
  CHECK_THROWS_AS(merge_keypoints(img, empty), Error);
}
