#include "matchkit/baseline.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>
#include <vector>

using namespace matchkit;

namespace {

std::set<std::pair<int, int>> as_set(const MatchSet& ms) {
  std::set<std::pair<int, int>> s;
  for (const Match& m : ms.pairs) s.insert({m.i, m.j});
  return s;
}

Mat random_desc(Rng& rng, int n, int d) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(n, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = g(rng);
  return m;
}

BinaryDescriptor random_binary(Rng& rng) {
  BinaryDescriptor d;
  for (auto& w : d.bits) w = rng();
  return d;
}

// Reference mutual nearest neighbor with smaller-index tie breaking.
std::set<std::pair<int, int>> mutual_oracle(const Mat& d) {
  std::set<std::pair<int, int>> out;
  for (int i = 0; i < d.rows(); ++i)
    for (int j = 0; j < d.cols(); ++j) {
      bool row_best = true, col_best = true;
      for (int jj = 0; jj < d.cols(); ++jj)
        if (d(i, jj) < d(i, j) || (d(i, jj) == d(i, j) && jj < j)) row_best = false;
      for (int ii = 0; ii < d.rows(); ++ii)
        if (d(ii, j) < d(i, j) || (d(ii, j) == d(i, j) && ii < i)) col_best = false;
      if (row_best && col_best) out.insert({i, j});
    }
  return out;
}

Mat euclidean_distances(const Mat& a, const Mat& b) {
  Mat d(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.rows(); ++j) d(i, j) = (a.row(i) - b.row(j)).norm();
  return d;
}

}  // namespace

TEST_CASE("hamming distance basics") {
  BinaryDescriptor a, b;
  CHECK(hamming(a, b) == 0);
  for (int i = 0; i < kBinaryBits; ++i) b.set(i, true);
  CHECK(hamming(a, b) == kBinaryBits);

  BinaryDescriptor c = a, d = a;
  for (int i = 0; i < 8; ++i) c.set(i, true);   // byte 0xFF
  for (int i = 0; i < 4; ++i) d.set(i, true);   // byte 0x0F
  CHECK(hamming(c, d) == 4);
}

TEST_CASE("hamming is symmetric and satisfies the triangle inequality") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    BinaryDescriptor x = random_binary(rng), y = random_binary(rng), z = random_binary(rng);
    CHECK(hamming(x, y) == hamming(y, x));
    CHECK(hamming(x, z) <= hamming(x, y) + hamming(y, z));
    CHECK(hamming(x, x) == 0);
  }
}

TEST_CASE("mutual nearest neighbor identity and hand example") {
  Mat basis = Mat::Identity(6, 6);
  MatchSet ms = mutual_nn(basis, basis, MatchMetric::euclidean);
  REQUIRE(ms.size() == 6);
  for (const Match& m : ms.pairs) {
    CHECK(m.i == m.j);
    CHECK(m.confidence == Catch::Approx(1.0));
  }

  Mat d(2, 2);
  d << 0.1, 0.9, 0.9, 0.2;
  std::set<std::pair<int, int>> got = as_set(MatchSet{[&] {
    MatchSet s = detail::mutual_from_distances(d);
    return s.pairs;
  }()});
  CHECK(got == std::set<std::pair<int, int>>{{0, 0}, {1, 1}});
}

TEST_CASE("mutual nearest neighbor equals the brute-force oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int m = 1 + static_cast<int>(rng() % 20);
    const int n = 1 + static_cast<int>(rng() % 30);
    const int dim = 2 + static_cast<int>(rng() % 8);
    Mat a = random_desc(rng, m, dim), b = random_desc(rng, n, dim);
    const MatchMetric metric = (trial % 2 == 0) ? MatchMetric::euclidean : MatchMetric::cosine;
    MatchSet ms = mutual_nn(a, b, metric);

    Mat d(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        d(i, j) = metric == MatchMetric::euclidean
                      ? (a.row(i) - b.row(j)).norm()
                      : 1.0 - a.row(i).dot(b.row(j)) / (a.row(i).norm() * b.row(j).norm());
    // Implementation and oracle must agree on the distances they rank, so
    // compare the match sets produced from the same matrix.
    CHECK(as_set(ms) == as_set(detail::mutual_from_distances(detail::distance_matrix(a, b, metric))));
    CHECK(as_set(detail::mutual_from_distances(d)) == mutual_oracle(d));

    // Partial bijection: indices unique per side.
    std::set<int> is, js;
    for (const Match& mm : ms.pairs) {
      CHECK(is.insert(mm.i).second);
      CHECK(js.insert(mm.j).second);
    }
  }
}

TEST_CASE("binary mutual nearest neighbor matches the real-valued path") {
  Rng rng(21);
  std::vector<BinaryDescriptor> a, b;
  for (int i = 0; i < 12; ++i) a.push_back(random_binary(rng));
  for (int j = 0; j < 15; ++j) b.push_back(random_binary(rng));
  MatchSet ms = mutual_nn(a, b);
  Mat d(12, 15);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 15; ++j) d(i, j) = hamming(a[static_cast<std::size_t>(i)], b[static_cast<std::size_t>(j)]);
  CHECK(as_set(ms) == mutual_oracle(d));
}

TEST_CASE("ratio test boundary, ambiguity, and oracle") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 2 + static_cast<int>(rng() % 15);
    const int n = 2 + static_cast<int>(rng() % 15);
    Mat a = random_desc(rng, m, 4), b = random_desc(rng, n, 4);
    CHECK(as_set(ratio_test(a, b, MatchMetric::euclidean, 1.0)) ==
          as_set(mutual_nn(a, b, MatchMetric::euclidean)));

    // Brute-force ratio oracle at 0.8.
    Mat d = euclidean_distances(a, b);
    std::set<std::pair<int, int>> want;
    for (int i = 0; i < m; ++i) {
      int nn1 = 0;
      for (int j = 1; j < n; ++j)
        if (d(i, j) < d(i, nn1)) nn1 = j;
      double second = std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j)
        if (j != nn1) second = std::min(second, d(i, j));
      if (!(d(i, nn1) < 0.8 * second)) continue;
      bool col_best = true;
      for (int ii = 0; ii < m; ++ii)
        if (d(ii, nn1) < d(i, nn1) || (d(ii, nn1) == d(i, nn1) && ii < i)) col_best = false;
      if (col_best) want.insert({i, nn1});
    }
    CHECK(as_set(ratio_test(a, b, MatchMetric::euclidean, 0.8)) == want);
  }

  // One query with two equidistant targets is rejected for any ratio < 1.
  Mat a(1, 2), b(2, 2);
  a << 0.0, 0.0;
  b << 1.0, 0.0, -1.0, 0.0;
  CHECK(ratio_test(a, b, MatchMetric::euclidean, 0.99).size() == 0);
  CHECK(ratio_test(a, b, MatchMetric::euclidean, 0.1).size() == 0);
  CHECK(ratio_test(a, b, MatchMetric::euclidean, 1.0).size() == 1);
}

TEST_CASE("baseline matcher input validation") {
  Mat a = Mat::Zero(3, 4), b = Mat::Zero(3, 5);
  CHECK_THROWS_AS(mutual_nn(a, b, MatchMetric::euclidean), DimensionMismatch);
  CHECK_THROWS_AS(mutual_nn(Mat(0, 4), a, MatchMetric::euclidean), EmptyInput);
  CHECK_THROWS_AS(mutual_nn(a, a, MatchMetric::hamming), Error);
  CHECK_THROWS_AS(ratio_test(a, Mat::Zero(1, 4), MatchMetric::euclidean, 0.8), Error);
  CHECK_THROWS_AS(ratio_test(a, a, MatchMetric::euclidean, 0.0), Error);
  CHECK_THROWS_AS(ratio_test(a, a, MatchMetric::euclidean, 1.5), Error);

  FeatureSet fa, fb;
  fa.source_id = SourceId::brief;
  fb.source_id = SourceId::dense_sift;
  fa.binary_desc.push_back({});
  fb.real_desc = Mat::Zero(1, 4);
  CHECK_THROWS_AS(baseline_match(fa, fb, MatchMetric::hamming), DimensionMismatch);
}
