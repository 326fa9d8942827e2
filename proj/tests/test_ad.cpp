#include "matchkit/ad.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

using namespace matchkit;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Compares the tape gradient of a scalar-valued builder against central
// finite differences over every element of every input.
double max_rel_err(const Builder& build, const std::vector<Mat>& xs, double h = 1e-5) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Mat& m : xs) vars.push_back(tape.input(m));
  ad::Var out = build(tape, vars);
  tape.backward(out);
  std::vector<Mat> grads;
  for (ad::Var v : vars) grads.push_back(tape.grad(v));

  auto eval = [&](const std::vector<Mat>& inputs) {
    ad::Tape t2;
    std::vector<ad::Var> v2;
    for (const Mat& m : inputs) v2.push_back(t2.input(m));
    return t2.val(build(t2, v2))(0, 0);
  };

  double worst = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    for (Eigen::Index r = 0; r < xs[i].rows(); ++r) {
      for (Eigen::Index c = 0; c < xs[i].cols(); ++c) {
        std::vector<Mat> bumped = xs;
        bumped[i](r, c) += h;
        const double fp = eval(bumped);
        bumped[i](r, c) -= 2 * h;
        const double fm = eval(bumped);
        const double fd = (fp - fm) / (2 * h);
        const double an = grads[i](r, c);
        const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

// Weights a matrix output into a scalar with fixed coefficients so every
// entry's gradient is exercised.
ad::Var weighted(ad::Tape& t, ad::Var x, const Mat& w) { return t.sum(t.mul(x, t.constant(w))); }

}  // namespace

TEST_CASE("forward values of elementwise and reduction ops") {
  ad::Tape t;
  Mat a(2, 2), b(2, 2);
  a << 1, -2, 3, 0.5;
  b << 2, 2, -1, 4;
  CHECK(t.val(t.add(t.input(a), t.input(b)))(0, 0) == 3.0);
  CHECK(t.val(t.mul(t.input(a), t.input(b)))(1, 0) == -3.0);
  CHECK(t.val(t.sum(t.input(a)))(0, 0) == Catch::Approx(2.5));
  CHECK(t.val(t.mean(t.input(a)))(0, 0) == Catch::Approx(0.625));
  CHECK(t.val(t.relu(t.input(a)))(0, 1) == 0.0);
  CHECK(t.val(t.sigmoid(t.constant(Mat::Zero(1, 1))))(0, 0) == Catch::Approx(0.5));

  Mat sm = t.val(t.softmax_rows(t.input(a)));
  for (int r = 0; r < 2; ++r) CHECK(sm.row(r).sum() == Catch::Approx(1.0));
  Mat sc = t.val(t.softmax_cols(t.input(a)));
  for (int c = 0; c < 2; ++c) CHECK(sc.col(c).sum() == Catch::Approx(1.0));

  Mat ones = Mat::Ones(1, 3);
  Mat normed = t.val(t.l2_normalize_rows(t.input(ones)));
  CHECK(normed(0, 0) == Catch::Approx(1.0 / std::sqrt(3.0)));
  Mat zero_row = t.val(t.l2_normalize_rows(t.input(Mat::Zero(1, 3))));
  CHECK(zero_row.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients of linear algebra ops match finite differences") {
  Rng rng(101);
  Mat w1 = random_mat(rng, 3, 5);
  Mat w2 = random_mat(rng, 3, 4);
  Mat w3 = random_mat(rng, 5, 3);

  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.matmul(v[0], v[1]), w1); },
                    {random_mat(rng, 3, 4), random_mat(rng, 4, 5)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.transpose(v[0]), w3); },
                    {random_mat(rng, 3, 5)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.add(t.sub(v[0], v[1]), v[2]), w2); },
                    {random_mat(rng, 3, 4), random_mat(rng, 3, 4), random_mat(rng, 3, 4)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.mul(v[0], v[1]), w2); },
                    {random_mat(rng, 3, 4), random_mat(rng, 3, 4)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.scale(v[0], -2.5), w2); },
                    {random_mat(rng, 3, 4)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.affine(v[0], 0.7, -0.3), w2); },
                    {random_mat(rng, 3, 4)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.add_row(v[0], v[1]), w2); },
                    {random_mat(rng, 3, 4), random_mat(rng, 1, 4)}) < 1e-6);
  Mat wc = random_mat(rng, 3, 7);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.concat_cols(v[0], v[1]), wc); },
                    {random_mat(rng, 3, 4), random_mat(rng, 3, 3)}) < 1e-6);
}

TEST_CASE("gradients of nonlinearities match finite differences") {
  Rng rng(202);
  Mat w = random_mat(rng, 4, 5);
  // Keep relu inputs away from the kink.
  Mat xr = random_mat(rng, 4, 5);
  for (int i = 0; i < xr.size(); ++i)
    if (std::abs(xr.data()[i]) < 0.05) xr.data()[i] = 0.1;

  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.relu(v[0]), w); }, {xr}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.gelu(v[0]), w); },
                    {random_mat(rng, 4, 5, -2, 2)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.sigmoid(v[0]), w); },
                    {random_mat(rng, 4, 5, -3, 3)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.softmax_rows(v[0]), w); },
                    {random_mat(rng, 4, 5, -2, 2)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.softmax_cols(v[0]), w); },
                    {random_mat(rng, 4, 5, -2, 2)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.l2_normalize_rows(v[0]), w); },
                    {random_mat(rng, 4, 5, 0.3, 1.5)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.log_clamped(v[0], 1e-12), w); },
                    {random_mat(rng, 4, 5, 0.2, 2.0)}) < 1e-6);
  CHECK(max_rel_err(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.layer_norm(v[0], v[1], v[2]), w); },
            {random_mat(rng, 4, 5, -2, 2), random_mat(rng, 1, 5, 0.5, 1.5), random_mat(rng, 1, 5)}) < 1e-6);
}

TEST_CASE("gradients of gather and reduction ops") {
  Rng rng(303);
  std::vector<std::pair<int, int>> idx{{0, 1}, {2, 3}, {1, 1}, {0, 1}};
  Mat w = random_mat(rng, 4, 1);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.select(v[0], idx), w); },
                    {random_mat(rng, 3, 4)}) < 1e-6);
  CHECK(max_rel_err([&](ad::Tape& t, const std::vector<ad::Var>& v) { return t.mean(v[0]); },
                    {random_mat(rng, 3, 4)}) < 1e-6);

  // Reusing a var twice must accumulate both paths: d/dx sum(x*x) = 2x.
  ad::Tape t;
  Mat x = random_mat(rng, 3, 3);
  ad::Var vx = t.input(x);
  t.backward(t.sum(t.mul(vx, vx)));
  CHECK((t.grad(vx) - 2.0 * x).cwiseAbs().maxCoeff() < 1e-12);

  // Constants receive no gradient and a scalar root is required.
  ad::Var c = t.constant(x);
  CHECK(t.grad(c).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(t.backward(c), Error);
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(404);
  Mat w = random_mat(rng, 5, 8);
  std::vector<Mat> qkv{random_mat(rng, 5, 8), random_mat(rng, 6, 8), random_mat(rng, 6, 8)};
  CHECK(max_rel_err(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) { return weighted(t, t.attention(v[0], v[1], v[2], 2), w); },
            qkv) < 1e-6);

  Mat pos_q = random_mat(rng, 5, 2);
  Mat pos_k = random_mat(rng, 6, 2);
  CHECK(max_rel_err(
            [&](ad::Tape& t, const std::vector<ad::Var>& v) {
              return weighted(t, t.attention(v[0], v[1], v[2], 2, &pos_q, &pos_k), w);
            },
            qkv) < 1e-6);

  // Single head, keys = queries, uniform values: output equals the value row.
  ad::Tape t;
  Mat q = random_mat(rng, 3, 4);
  Mat vconst = Mat::Ones(3, 4);
  Mat out = t.val(t.attention(t.constant(q), t.constant(q), t.constant(vconst), 1));
  CHECK((out - vconst).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rotary encoding identities") {
  Rng rng(505);
  Vec q = random_mat(rng, 8, 1).col(0);
  Vec k = random_mat(rng, 8, 1).col(0);

  Vec same = ad::rotary_encode(q, Vec2(0, 0));
  CHECK((same - q).cwiseAbs().maxCoeff() == 0.0);

  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    Vec2 p1(u(rng), u(rng)), p2(u(rng), u(rng)), d(u(rng), u(rng));
    Vec r1 = ad::rotary_encode(q, p1);
    CHECK(r1.norm() == Catch::Approx(q.norm()).epsilon(1e-9));
    double lhs = ad::rotary_encode(q, p1).dot(ad::rotary_encode(k, p2));
    double rhs = ad::rotary_encode(q, Vec2(p1 + d)).dot(ad::rotary_encode(k, Vec2(p2 + d)));
    CHECK(lhs == Catch::Approx(rhs).margin(1e-9));
  }

  CHECK_THROWS_AS(ad::rotary_encode(Vec::Ones(6), Vec2(0.1, 0.2)), Error);
}

TEST_CASE("op preconditions reject bad shapes") {
  ad::Tape t;
  ad::Var a = t.input(Mat::Zero(2, 3));
  ad::Var b = t.input(Mat::Zero(3, 2));
  CHECK_THROWS_AS(t.add(a, b), Error);
  CHECK_THROWS_AS(t.matmul(a, a), Error);
  CHECK_THROWS_AS(t.add_row(a, b), Error);
  CHECK_THROWS_AS(t.attention(a, a, a, 2), Error);
  CHECK_THROWS_AS(t.select(a, {{5, 0}}), Error);
}
