#pragma once

// Reverse-mode automatic differentiation at matrix granularity. A Tape owns
// value/gradient storage; ops append nodes holding a backward closure that
// scatters the output gradient into the inputs. Granularity is one Eigen
// matrix per node so desk-scale attention graphs stay in the hundreds of
// nodes and backward cost tracks forward cost.

#include "matchkit/common.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace matchkit::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

// Position-frequency ladder for 2D rotary encoding: K pairs per coordinate,
// angles theta_k = omega_k * coord with omega_k = 10000^(-k/K). The first
// 2K dims rotate by x, the next 2K by y, so a head dim must divide by 4.
inline std::vector<double> rotary_freqs(int pairs_per_axis) {
  std::vector<double> w(static_cast<size_t>(pairs_per_axis));
  for (int k = 0; k < pairs_per_axis; ++k)
    w[static_cast<size_t>(k)] = std::pow(10000.0, -static_cast<double>(k) / pairs_per_axis);
  return w;
}

// Rotates each row of a head block by its row's 2D position. sign=-1 applies
// the inverse rotation (used by backward; rotations are orthogonal).
inline void rotate_rows(Mat& h, const Mat& pos, double sign) {
  const int dh = static_cast<int>(h.cols());
  if (dh % 4 != 0) throw Error("rotary head dim must be divisible by 4");
  if (pos.rows() != h.rows() || pos.cols() != 2) throw Error("rotary positions must be rows x 2");
  const int k_pairs = dh / 4;
  const std::vector<double> freqs = rotary_freqs(k_pairs);
  for (Eigen::Index r = 0; r < h.rows(); ++r) {
    for (int axis = 0; axis < 2; ++axis) {
      const double coord = pos(r, axis);
      for (int k = 0; k < k_pairs; ++k) {
        const double th = sign * freqs[static_cast<size_t>(k)] * coord;
        const double c = std::cos(th), s = std::sin(th);
        const int i0 = axis * 2 * k_pairs + 2 * k;
        const double a = h(r, i0), b = h(r, i0 + 1);
        h(r, i0) = a * c - b * s;
        h(r, i0 + 1) = a * s + b * c;
      }
    }
  }
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

inline double gelu_grad_scalar(double x) {
  const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
  const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
  return cdf + x * pdf;
}

// Gradient of row-wise softmax given the softmax output y and upstream g.
inline Mat softmax_rows_back(const Mat& y, const Mat& g) {
  Mat gx(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const double dot = (g.row(r).array() * y.row(r).array()).sum();
    gx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
  }
  return gx;
}

}  // namespace detail

class Tape {
 public:
  // Leaf whose gradient is tracked (parameters).
  Var input(Mat v) { return push(std::move(v), true); }
  // Leaf treated as a constant (data, positions).
  Var constant(Mat v) { return push(std::move(v), false); }

  const Mat& val(Var v) const { return node(v).value; }

  // Gradient of the last backward() root w.r.t. v; zeros if v never
  // influenced the root.
  Mat grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }
  bool tracked(Var v) const { return node(v).tracked; }

  Var add(Var a, Var b) {
    check_same_shape(a, b);
    Var out = push(val(a) + val(b), tracked(a) || tracked(b));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, g);
      t.accum(b, g);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b);
    Var out = push(val(a) - val(b), tracked(a) || tracked(b));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, g);
      t.accum(b, Mat(-g));
    });
    return out;
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b);
    Var out = push(val(a).cwiseProduct(val(b)), tracked(a) || tracked(b));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, g.cwiseProduct(t.val(b)));
      t.accum(b, g.cwiseProduct(t.val(a)));
    });
    return out;
  }

  Var matmul(Var a, Var b) {
    if (val(a).cols() != val(b).rows()) throw Error("matmul inner dims disagree");
    Mat v(val(a).rows(), val(b).cols());
    v.noalias() = val(a) * val(b);
    Var out = push(std::move(v), tracked(a) || tracked(b));
    set_back(out, [=](Tape& t, const Mat& g) {
      if (t.tracked(a)) {
        Mat ga(g.rows(), t.val(b).rows());
        ga.noalias() = g * t.val(b).transpose();
        t.accum(a, std::move(ga));
      }
      if (t.tracked(b)) {
        Mat gb(t.val(a).cols(), g.cols());
        gb.noalias() = t.val(a).transpose() * g;
        t.accum(b, std::move(gb));
      }
    });
    return out;
  }

  Var transpose(Var a) {
    Var out = push(val(a).transpose(), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) { t.accum(a, g.transpose()); });
    return out;
  }

  Var scale(Var a, double c) {
    Var out = push(val(a) * c, tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) { t.accum(a, g * c); });
    return out;
  }

  // Elementwise s*x + o.
  Var affine(Var a, double s, double o) {
    Var out = push((val(a).array() * s + o).matrix(), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) { t.accum(a, g * s); });
    return out;
  }

  // Adds a 1 x C bias row to every row of x.
  Var add_row(Var x, Var bias) {
    if (val(bias).rows() != 1 || val(bias).cols() != val(x).cols())
      throw Error("bias row shape mismatch");
    Var out = push(val(x).rowwise() + val(bias).row(0), tracked(x) || tracked(bias));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(x, g);
      t.accum(bias, g.colwise().sum());
    });
    return out;
  }

  Var concat_cols(Var a, Var b) {
    if (val(a).rows() != val(b).rows()) throw Error("concat rows disagree");
    const Eigen::Index ca = val(a).cols(), cb = val(b).cols();
    Mat v(val(a).rows(), ca + cb);
    v.leftCols(ca) = val(a);
    v.rightCols(cb) = val(b);
    Var out = push(std::move(v), tracked(a) || tracked(b));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, g.leftCols(ca));
      t.accum(b, g.rightCols(cb));
    });
    return out;
  }

  Var relu(Var a) {
    Var out = push(val(a).cwiseMax(0.0), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      Mat gx = (t.val(a).array() > 0.0).select(g.array(), 0.0).matrix();
      t.accum(a, std::move(gx));
    });
    return out;
  }

  Var gelu(Var a) {
    Var out = push(val(a).unaryExpr(&detail::gelu_scalar), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, g.cwiseProduct(t.val(a).unaryExpr(&detail::gelu_grad_scalar)));
    });
    return out;
  }

  Var sigmoid(Var a) {
    Mat y = (1.0 / (1.0 + (-val(a).array()).exp())).matrix();
    Var out = push(std::move(y), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      const Mat& yo = t.val(out);
      t.accum(a, (g.array() * yo.array() * (1.0 - yo.array())).matrix());
    });
    return out;
  }

  Var softmax_rows(Var a) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      Eigen::Array<double, 1, Eigen::Dynamic> e = (x.row(r).array() - x.row(r).maxCoeff()).exp();
      y.row(r) = (e / e.sum()).matrix();
    }
    Var out = push(std::move(y), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) { t.accum(a, detail::softmax_rows_back(t.val(out), g)); });
    return out;
  }

  Var softmax_cols(Var a) {
    const Mat& x = val(a);
    Mat y(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::ArrayXd e = (x.col(c).array() - x.col(c).maxCoeff()).exp();
      y.col(c) = (e / e.sum()).matrix();
    }
    Var out = push(std::move(y), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      Mat gt = detail::softmax_rows_back(t.val(out).transpose(), g.transpose());
      t.accum(a, gt.transpose());
    });
    return out;
  }

  // Row-wise layer normalization with learned 1 x C gain/offset.
  Var layer_norm(Var x, Var gamma, Var beta) {
    const Mat& v = val(x);
    const Eigen::Index c = v.cols();
    if (val(gamma).rows() != 1 || val(gamma).cols() != c || val(beta).rows() != 1 || val(beta).cols() != c)
      throw Error("layer_norm gain/offset must be 1 x C");
    constexpr double kEps = 1e-5;
    auto saved = std::make_shared<std::pair<Mat, Vec>>();
    Mat& xhat = saved->first;
    Vec& inv_std = saved->second;
    xhat.resize(v.rows(), c);
    inv_std.resize(v.rows());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      const double mu = v.row(r).mean();
      const double var = (v.row(r).array() - mu).square().sum() / static_cast<double>(c);
      inv_std[r] = 1.0 / std::sqrt(var + kEps);
      xhat.row(r) = ((v.row(r).array() - mu) * inv_std[r]).matrix();
    }
    Mat y = ((xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() + val(beta).row(0).array()).matrix();
    Var out = push(std::move(y), tracked(x) || tracked(gamma) || tracked(beta));
    set_back(out, [=](Tape& t, const Mat& g) {
      const Mat& xh = saved->first;
      const Vec& inv = saved->second;
      t.accum(gamma, (g.array() * xh.array()).colwise().sum().matrix());
      t.accum(beta, g.colwise().sum());
      if (!t.tracked(x)) return;
      Mat gxh = (g.array().rowwise() * t.val(gamma).row(0).array()).matrix();
      Mat gx(g.rows(), g.cols());
      const double cd = static_cast<double>(g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double m1 = gxh.row(r).sum() / cd;
        const double m2 = (gxh.row(r).array() * xh.row(r).array()).sum() / cd;
        gx.row(r) = (((gxh.row(r).array() - m1) - xh.row(r).array() * m2) * inv[r]).matrix();
      }
      t.accum(x, std::move(gx));
    });
    return out;
  }

  // Rows scaled to unit norm; rows with norm below 1e-12 stay zero and pass
  // no gradient (a zero row carries no signal to normalize).
  Var l2_normalize_rows(Var a) {
    const Mat& x = val(a);
    auto norms = std::make_shared<Vec>(x.rows());
    Mat y = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double n = x.row(r).norm();
      (*norms)[r] = n;
      if (n >= 1e-12) y.row(r) = x.row(r) / n;
    }
    Var out = push(std::move(y), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      const Mat& yo = t.val(out);
      Mat gx = Mat::Zero(g.rows(), g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const double n = (*norms)[r];
        if (n < 1e-12) continue;
        const double dot = g.row(r).dot(yo.row(r));
        gx.row(r) = (g.row(r) - dot * yo.row(r)) / n;
      }
      t.accum(a, std::move(gx));
    });
    return out;
  }

  // log(max(x, floor)); entries at the floor pass no gradient.
  Var log_clamped(Var a, double floor) {
    const Mat& x = val(a);
    Var out = push(x.cwiseMax(floor).array().log().matrix(), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      const Mat& xv = t.val(a);
      Mat gx = (xv.array() > floor).select(g.array() / xv.array(), 0.0).matrix();
      t.accum(a, std::move(gx));
    });
    return out;
  }

  // Gathers entries (i,j) into a k x 1 column.
  Var select(Var a, std::vector<std::pair<int, int>> idx) {
    const Mat& x = val(a);
    Mat v(static_cast<Eigen::Index>(idx.size()), 1);
    for (size_t k = 0; k < idx.size(); ++k) {
      if (idx[k].first < 0 || idx[k].first >= x.rows() || idx[k].second < 0 || idx[k].second >= x.cols())
        throw Error("select index out of range");
      v(static_cast<Eigen::Index>(k), 0) = x(idx[k].first, idx[k].second);
    }
    auto ids = std::make_shared<std::vector<std::pair<int, int>>>(std::move(idx));
    Var out = push(std::move(v), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      Mat gx = Mat::Zero(t.val(a).rows(), t.val(a).cols());
      for (size_t k = 0; k < ids->size(); ++k)
        gx((*ids)[k].first, (*ids)[k].second) += g(static_cast<Eigen::Index>(k), 0);
      t.accum(a, std::move(gx));
    });
    return out;
  }

  Var sum(Var a) {
    Mat v(1, 1);
    v(0, 0) = val(a).sum();
    Var out = push(std::move(v), tracked(a));
    set_back(out, [=](Tape& t, const Mat& g) {
      t.accum(a, Mat::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0)));
    });
    return out;
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

  // Multi-head scaled dot-product attention. q: M x d, k/v: N x d, d split
  // across heads. When positions are given (M x 2 / N x 2, normalized
  // coordinates) each head's q and k rows are rotary-encoded before the dot
  // product, which makes the attention logits depend on relative positions
  // only. Per-head rotated q/k and the softmax matrix are saved for backward.
  Var attention(Var q, Var k, Var v, int heads, const Mat* pos_q = nullptr, const Mat* pos_k = nullptr) {
    const Mat& qv = val(q);
    const Mat& kv = val(k);
    const Mat& vv = val(v);
    const Eigen::Index d = qv.cols();
    if (kv.cols() != d || vv.cols() != d) throw Error("attention dims disagree");
    if (kv.rows() != vv.rows()) throw Error("attention k/v row counts disagree");
    if (heads < 1 || d % heads != 0) throw Error("attention head count must divide dim");
    const Eigen::Index dh = d / heads;
    const bool rotary = pos_q != nullptr;
    if (rotary && (pos_k == nullptr || dh % 4 != 0))
      throw Error("rotary attention needs both position sets and head dim divisible by 4");
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    struct Saved {
      std::vector<Mat> qr, kr, a;
      Mat pq, pk;
      bool rotary = false;
    };
    auto saved = std::make_shared<Saved>();
    saved->rotary = rotary;
    if (rotary) {
      saved->pq = *pos_q;
      saved->pk = *pos_k;
    }

    Mat out_v(qv.rows(), d);
    for (int h = 0; h < heads; ++h) {
      Mat qh = qv.middleCols(h * dh, dh);
      Mat kh = kv.middleCols(h * dh, dh);
      if (rotary) {
        detail::rotate_rows(qh, saved->pq, 1.0);
        detail::rotate_rows(kh, saved->pk, 1.0);
      }
      Mat s(qh.rows(), kh.rows());
      s.noalias() = qh * kh.transpose();
      s *= sc;
      Mat a(s.rows(), s.cols());
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        Eigen::Array<double, 1, Eigen::Dynamic> e = (s.row(r).array() - s.row(r).maxCoeff()).exp();
        a.row(r) = (e / e.sum()).matrix();
      }
      out_v.middleCols(h * dh, dh).noalias() = a * vv.middleCols(h * dh, dh);
      saved->qr.push_back(std::move(qh));
      saved->kr.push_back(std::move(kh));
      saved->a.push_back(std::move(a));
    }

    Var out = push(std::move(out_v), tracked(q) || tracked(k) || tracked(v));
    set_back(out, [=](Tape& t, const Mat& g) {
      const Mat& vv2 = t.val(v);
      Mat gq = Mat::Zero(t.val(q).rows(), d);
      Mat gk = Mat::Zero(t.val(k).rows(), d);
      Mat gv = Mat::Zero(vv2.rows(), d);
      for (int h = 0; h < heads; ++h) {
        const Mat& a = saved->a[static_cast<size_t>(h)];
        const Mat& qh = saved->qr[static_cast<size_t>(h)];
        const Mat& kh = saved->kr[static_cast<size_t>(h)];
        const Mat go = g.middleCols(h * dh, dh);
        Mat ga(a.rows(), a.cols());
        ga.noalias() = go * vv2.middleCols(h * dh, dh).transpose();
        gv.middleCols(h * dh, dh).noalias() = a.transpose() * go;
        Mat gs = detail::softmax_rows_back(a, ga);
        gs *= sc;
        Mat gqh(qh.rows(), dh);
        gqh.noalias() = gs * kh;
        Mat gkh(kh.rows(), dh);
        gkh.noalias() = gs.transpose() * qh;
        if (saved->rotary) {
          detail::rotate_rows(gqh, saved->pq, -1.0);
          detail::rotate_rows(gkh, saved->pk, -1.0);
        }
        gq.middleCols(h * dh, dh) = gqh;
        gk.middleCols(h * dh, dh) = gkh;
      }
      t.accum(q, std::move(gq));
      t.accum(k, std::move(gk));
      t.accum(v, std::move(gv));
    });
    return out;
  }

  // Seeds the 1x1 root with gradient 1 and sweeps the tape in reverse.
  void backward(Var root) {
    Node& rn = node(root);
    if (rn.value.rows() != 1 || rn.value.cols() != 1) throw Error("backward root must be 1x1");
    for (Node& n : nodes_) n.grad.resize(0, 0);
    rn.grad = Mat::Ones(1, 1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back(*this, n.grad);
    }
  }

  void accum(Var v, const Mat& g) {
    Node& n = node(v);
    if (!n.tracked) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) throw Error("gradient shape mismatch");
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void accum(Var v, Mat&& g) {
    Node& n = node(v);
    if (!n.tracked) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols()) throw Error("gradient shape mismatch");
    if (n.grad.size() == 0)
      n.grad = std::move(g);
    else
      n.grad += g;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool tracked = false;
    std::function<void(Tape&, const Mat&)> back;
  };

  Var push(Mat v, bool track) {
    nodes_.push_back(Node{std::move(v), Mat(), track, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  void set_back(Var v, std::function<void(Tape&, const Mat&)> fn) {
    if (node(v).tracked) node(v).back = std::move(fn);
  }

  Node& node(Var v) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid tape var");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const Node& node(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw Error("invalid tape var");
    return nodes_[static_cast<size_t>(v.id)];
  }

  void check_same_shape(Var a, Var b) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw Error("elementwise op shape mismatch");
  }

  std::vector<Node> nodes_;
};

// Rotary-encodes one head vector (dim divisible by 4) at a normalized 2D
// position. Self-attention applies this to every q and k row.
inline Vec rotary_encode(const Vec& v, const Vec2& pos) {
  Mat m = v.transpose();
  Mat p(1, 2);
  p << pos.x(), pos.y();
  detail::rotate_rows(m, p, 1.0);
  return m.transpose();
}

}  // namespace matchkit::ad
