#pragma once

// Attention matcher over keypoint tokens: per-source descriptor projection,
// interleaved self/cross attention with 2D rotary positions, and a partial
// assignment formed from dual softmax times per-side matchability. Training
// runs reverse-mode differentiation on the Tape from ad.hpp.

#include "matchkit/ad.hpp"
#include "matchkit/describe.hpp"
#include "matchkit/gtlabel.hpp"
#include "matchkit/matchset.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace matchkit {

struct UnknownSource : Error {
  using Error::Error;
};
struct EmptySupervision : Error {
  using Error::Error;
};
struct NonFiniteLoss : Error {
  using Error::Error;
};

// All learned state, stored as named blocks so the optimizer, checkpoints,
// and the finite-difference checker can enumerate parameters uniformly.
// Linear blocks apply as y = x*W + b with W of shape in x out.
struct MatcherParams {
  int dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  uint64_t seed = 0;
  std::map<int, int> sources;  // source_id -> descriptor dim accepted
  std::vector<std::pair<std::string, Mat>> blocks;

  bool has_block(const std::string& name) const { return find(name) >= 0; }

  Mat& block(const std::string& name) {
    int i = find(name);
    if (i < 0) throw Error("unknown parameter block: " + name);
    return blocks[static_cast<size_t>(i)].second;
  }
  const Mat& block(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw Error("unknown parameter block: " + name);
    return blocks[static_cast<size_t>(i)].second;
  }

  void add_block(const std::string& name, Mat value) {
    if (has_block(name)) throw Error("duplicate parameter block: " + name);
    blocks.emplace_back(name, std::move(value));
  }

  bool has_patch_tower() const { return has_block("patch.w0"); }

 private:
  int find(const std::string& name) const {
    for (size_t i = 0; i < blocks.size(); ++i)
      if (blocks[i].first == name) return static_cast<int>(i);
    return -1;
  }
};

struct MatcherInit {
  int dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  std::map<int, int> sources;  // source_id -> descriptor dim
  // Patch tower (raw patch -> descriptor); patch_size 0 disables it.
  int patch_size = 0;
  int patch_hidden = 64;
  int patch_out = 256;
  uint64_t seed = 0;
};

namespace detail {

inline Mat gaussian_block(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = n(rng);
  return m;
}

// Each block gets its own stream keyed by name, so the initialization is
// independent of block creation order.
inline void init_linear(MatcherParams& p, const std::string& prefix, int in, int out) {
  Rng rng(derive_seed(p.seed, prefix));
  const double std = std::sqrt(2.0 / static_cast<double>(in + out));
  p.add_block(prefix + ".w", gaussian_block(rng, in, out, std));
  p.add_block(prefix + ".b", Mat::Zero(1, out));
}

}  // namespace detail

inline MatcherParams init_matcher_params(const MatcherInit& cfg) {
  if (cfg.dim < 2 || cfg.num_heads < 1 || cfg.dim % (2 * cfg.num_heads) != 0)
    throw Error("model dim must be a positive multiple of 2*num_heads");
  if (cfg.num_layers < 0) throw Error("negative layer count");
  MatcherParams p;
  p.dim = cfg.dim;
  p.num_layers = cfg.num_layers;
  p.num_heads = cfg.num_heads;
  p.seed = cfg.seed;
  p.sources = cfg.sources;

  if (cfg.patch_size > 0) {
    if (cfg.patch_size % 2 == 0) throw Error("patch size must be odd");
    p.sources[static_cast<int>(SourceId::patch_mlp)] = cfg.patch_out;
    const int in = cfg.patch_size * cfg.patch_size;
    const int dims[5] = {in, cfg.patch_hidden, cfg.patch_hidden, cfg.patch_hidden, cfg.patch_out};
    for (int l = 0; l < 4; ++l) {
      Rng rng(derive_seed(cfg.seed, "patch" + std::to_string(l)));
      const double std = std::sqrt(2.0 / static_cast<double>(dims[l]));
      p.add_block("patch.w" + std::to_string(l), detail::gaussian_block(rng, dims[l], dims[l + 1], std));
      p.add_block("patch.b" + std::to_string(l), Mat::Zero(1, dims[l + 1]));
    }
  }

  for (const auto& [sid, in_dim] : p.sources)
    detail::init_linear(p, "src" + std::to_string(sid), in_dim, cfg.dim);

  const int d = cfg.dim;
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (const char* part : {"self", "cross"}) {
      const std::string pre = "l" + std::to_string(l) + "." + part;
      detail::init_linear(p, pre + ".q", d, d);
      detail::init_linear(p, pre + ".k", d, d);
      detail::init_linear(p, pre + ".v", d, d);
      detail::init_linear(p, pre + ".f1", 2 * d, 2 * d);
      p.add_block(pre + ".ln_g", Mat::Ones(1, 2 * d));
      p.add_block(pre + ".ln_b", Mat::Zero(1, 2 * d));
      detail::init_linear(p, pre + ".f2", 2 * d, d);
    }
  }
  detail::init_linear(p, "score", d, d);
  detail::init_linear(p, "match", d, 1);
  return p;
}

// One image's matcher-ready inputs: constant descriptor rows (or raw patch
// rows for the learned patch tower) plus positions normalized to [-1,1]^2.
struct TokenInput {
  Mat desc;     // M x desc_dim, empty when patches drive the tower
  Mat patches;  // M x patch_size^2
  Mat pos;      // M x 2
  int source_id = 0;
  int count() const { return static_cast<int>(pos.rows()); }
};

inline Mat normalized_positions(const std::vector<Keypoint>& kps, int width, int height) {
  Mat pos(static_cast<Eigen::Index>(kps.size()), 2);
  for (size_t i = 0; i < kps.size(); ++i) {
    pos(static_cast<Eigen::Index>(i), 0) = 2.0 * kps[i].x / width - 1.0;
    pos(static_cast<Eigen::Index>(i), 1) = 2.0 * kps[i].y / height - 1.0;
  }
  return pos;
}

inline TokenInput token_input(const FeatureSet& fs) {
  if (fs.count() == 0) throw EmptyInput("feature set has no keypoints");
  TokenInput in;
  in.desc = fs.matcher_input();
  in.pos = normalized_positions(fs.keypoints, fs.width, fs.height);
  in.source_id = static_cast<int>(fs.source_id);
  return in;
}

// Patch-driven input: descriptors are produced inside the matcher graph so
// the tower trains jointly. Keypoints must have full patch support.
inline TokenInput token_input_patches(const ImageGray& img, const std::vector<Keypoint>& kps, int patch_size) {
  if (kps.empty()) throw EmptyInput("no keypoints for patch input");
  TokenInput in;
  in.patches.resize(static_cast<Eigen::Index>(kps.size()), patch_size * patch_size);
  for (size_t i = 0; i < kps.size(); ++i)
    in.patches.row(static_cast<Eigen::Index>(i)) = detail::patch_vector(img, kps[i], patch_size).transpose();
  in.pos = normalized_positions(kps, img.width, img.height);
  in.source_id = static_cast<int>(SourceId::patch_mlp);
  return in;
}

struct AssignmentResult {
  Mat p;        // M x N soft partial assignment
  Vec sigma_a;  // M matchabilities
  Vec sigma_b;  // N matchabilities
  Mat scores;   // M x N pre-assignment similarity
};

namespace detail {

// Builds the matcher computation graph on a tape. Parameter blocks enter as
// tracked inputs when trainable(name) holds, otherwise as constants.
class GraphBuilder {
 public:
  GraphBuilder(ad::Tape& tape, const MatcherParams& params, std::function<bool(const std::string&)> trainable)
      : tape_(tape), params_(params), trainable_(std::move(trainable)) {}

  ad::Var param(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const Mat& v = params_.block(name);
    ad::Var var = trainable_ && trainable_(name) ? tape_.input(v) : tape_.constant(v);
    cache_.emplace(name, var);
    return var;
  }

  ad::Var linear(ad::Var x, const std::string& prefix) {
    return tape_.add_row(tape_.matmul(x, param(prefix + ".w")), param(prefix + ".b"));
  }

  ad::Var embed(const TokenInput& in) {
    ad::Var desc;
    if (in.patches.size() > 0) {
      if (!params_.has_patch_tower()) throw UnknownSource("matcher has no patch tower");
      ad::Var x = tape_.constant(in.patches);
      for (int l = 0; l < 4; ++l) {
        const std::string ls = std::to_string(l);
        x = tape_.add_row(tape_.matmul(x, param("patch.w" + ls)), param("patch.b" + ls));
        if (l < 3) x = tape_.relu(x);
      }
      desc = tape_.l2_normalize_rows(x);
    } else {
      auto it = params_.sources.find(in.source_id);
      if (it == params_.sources.end())
        throw UnknownSource("no projection for source id " + std::to_string(in.source_id));
      if (in.desc.cols() != it->second) throw DimensionMismatch("descriptor dim does not match source registry");
      desc = tape_.constant(in.desc);
    }
    const std::string src = "src" + std::to_string(in.source_id);
    return tape_.l2_normalize_rows(linear(desc, src));
  }

  // Residual update x + f2(gelu(ln(f1([x || m])))).
  ad::Var ffn(ad::Var x, ad::Var m, const std::string& pre) {
    ad::Var h = linear(tape_.concat_cols(x, m), pre + ".f1");
    h = tape_.layer_norm(h, param(pre + ".ln_g"), param(pre + ".ln_b"));
    h = tape_.gelu(h);
    return tape_.add(x, linear(h, pre + ".f2"));
  }

  std::pair<ad::Var, ad::Var> run_layers(ad::Var xa, ad::Var xb, const Mat& pos_a, const Mat& pos_b) {
    for (int l = 0; l < params_.num_layers; ++l) {
      const std::string ls = "l" + std::to_string(l);
      {
        const std::string pre = ls + ".self";
        ad::Var ma = tape_.attention(linear(xa, pre + ".q"), linear(xa, pre + ".k"), linear(xa, pre + ".v"),
                                     params_.num_heads, &pos_a, &pos_a);
        ad::Var mb = tape_.attention(linear(xb, pre + ".q"), linear(xb, pre + ".k"), linear(xb, pre + ".v"),
                                     params_.num_heads, &pos_b, &pos_b);
        xa = ffn(xa, ma, pre);
        xb = ffn(xb, mb, pre);
      }
      {
        const std::string pre = ls + ".cross";
        ad::Var ma = tape_.attention(linear(xa, pre + ".q"), linear(xb, pre + ".k"), linear(xb, pre + ".v"),
                                     params_.num_heads);
        ad::Var mb = tape_.attention(linear(xb, pre + ".q"), linear(xa, pre + ".k"), linear(xa, pre + ".v"),
                                     params_.num_heads);
        xa = ffn(xa, ma, pre);
        xb = ffn(xb, mb, pre);
      }
    }
    return {xa, xb};
  }

  const std::map<std::string, ad::Var>& tracked_params() const { return cache_; }

 private:
  ad::Tape& tape_;
  const MatcherParams& params_;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, ad::Var> cache_;
};

}  // namespace detail

struct ForwardGraph {
  ad::Var p, sigma_a, sigma_b, scores;
  std::map<std::string, ad::Var> params;  // tracked blocks only
};

// Tokens the attention layers consume: projected descriptors, unit norm,
// one row per keypoint. Positions stay separate (they only enter through
// the rotary encoding inside self-attention).
inline Mat embed_tokens(const TokenInput& in, const MatcherParams& params) {
  if (in.count() < 1) throw EmptyInput("no keypoints to embed");
  ad::Tape tape;
  detail::GraphBuilder gb(tape, params, nullptr);
  return tape.val(gb.embed(in));
}

inline Mat embed_tokens(const FeatureSet& fs, const MatcherParams& params) {
  return embed_tokens(token_input(fs), params);
}

inline ForwardGraph build_forward(ad::Tape& tape, const TokenInput& a, const TokenInput& b,
                                  const MatcherParams& params,
                                  std::function<bool(const std::string&)> trainable = nullptr) {
  if (a.count() < 1 || b.count() < 1) throw EmptyInput("matcher needs at least one keypoint per side");
  detail::GraphBuilder gb(tape, params, std::move(trainable));
  ad::Var xa = gb.embed(a);
  ad::Var xb = gb.embed(b);
  auto [ya, yb] = gb.run_layers(xa, xb, a.pos, b.pos);

  ad::Var fa = gb.linear(ya, "score");
  ad::Var fb = gb.linear(yb, "score");
  ad::Var s = tape.scale(tape.matmul(fa, tape.transpose(fb)), 1.0 / std::sqrt(static_cast<double>(params.dim)));
  ad::Var sa = tape.sigmoid(gb.linear(ya, "match"));
  ad::Var sb = tape.sigmoid(gb.linear(yb, "match"));
  ad::Var p = tape.mul(tape.mul(tape.softmax_rows(s), tape.softmax_cols(s)), tape.matmul(sa, tape.transpose(sb)));

  ForwardGraph g;
  g.p = p;
  g.sigma_a = sa;
  g.sigma_b = sb;
  g.scores = s;
  for (const auto& [name, var] : gb.tracked_params())
    if (tape.tracked(var)) g.params.emplace(name, var);
  return g;
}

inline AssignmentResult forward(const TokenInput& a, const TokenInput& b, const MatcherParams& params) {
  ad::Tape tape;
  ForwardGraph g = build_forward(tape, a, b, params);
  AssignmentResult res;
  res.p = tape.val(g.p);
  res.sigma_a = tape.val(g.sigma_a).col(0);
  res.sigma_b = tape.val(g.sigma_b).col(0);
  res.scores = tape.val(g.scores);
  return res;
}

inline AssignmentResult forward(const FeatureSet& a, const FeatureSet& b, const MatcherParams& params) {
  return forward(token_input(a), token_input(b), params);
}

// Hard decisions: mutual row/column argmax of p above the threshold.
inline MatchSet extract_matches(const AssignmentResult& res, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error("confidence threshold must lie in (0,1)");
  const Mat& p = res.p;
  MatchSet out;
  std::vector<int> col_best(static_cast<size_t>(p.cols()), -1);
  for (int j = 0; j < p.cols(); ++j) {
    int bi = 0;
    for (int i = 1; i < p.rows(); ++i)
      if (p(i, j) > p(bi, j)) bi = i;
    col_best[static_cast<size_t>(j)] = bi;
  }
  for (int i = 0; i < p.rows(); ++i) {
    int bj = 0;
    for (int j = 1; j < p.cols(); ++j)
      if (p(i, j) > p(i, bj)) bj = j;
    if (p(i, bj) > tau && col_best[static_cast<size_t>(bj)] == i) out.pairs.push_back({i, bj, p(i, bj)});
  }
  return out;
}

namespace detail {

inline void check_labels_in_range(const GTLabels& labels, int m, int n) {
  for (auto [i, j] : labels.matches)
    if (i < 0 || i >= m || j < 0 || j >= n) throw Error("label index out of range");
  for (int i : labels.negatives_a)
    if (i < 0 || i >= m) throw Error("label index out of range");
  for (int j : labels.negatives_b)
    if (j < 0 || j >= n) throw Error("label index out of range");
}

}  // namespace detail

// Negative log-likelihood: -mean log p over true matches, minus half the
// mean log(1-sigma) over each side's confident negatives. Probabilities are
// clamped at 1e-12 so the loss stays finite.
inline ad::Var build_loss(ad::Tape& tape, const ForwardGraph& g, const GTLabels& labels) {
  constexpr double kClamp = 1e-12;
  const int m = static_cast<int>(tape.val(g.p).rows());
  const int n = static_cast<int>(tape.val(g.p).cols());
  detail::check_labels_in_range(labels, m, n);
  if (labels.matches.empty() && labels.negatives_a.empty() && labels.negatives_b.empty())
    throw EmptySupervision("labels contain no matches and no negatives");

  ad::Var total = tape.constant(Mat::Zero(1, 1));
  if (!labels.matches.empty()) {
    ad::Var sel = tape.select(g.p, labels.matches);
    total = tape.add(total, tape.scale(tape.mean(tape.log_clamped(sel, kClamp)), -1.0));
  }
  if (!labels.negatives_a.empty()) {
    std::vector<std::pair<int, int>> idx;
    for (int i : labels.negatives_a) idx.emplace_back(i, 0);
    ad::Var sel = tape.select(g.sigma_a, idx);
    total = tape.add(total, tape.scale(tape.mean(tape.log_clamped(tape.affine(sel, -1.0, 1.0), kClamp)), -0.5));
  }
  if (!labels.negatives_b.empty()) {
    std::vector<std::pair<int, int>> idx;
    for (int j : labels.negatives_b) idx.emplace_back(j, 0);
    ad::Var sel = tape.select(g.sigma_b, idx);
    total = tape.add(total, tape.scale(tape.mean(tape.log_clamped(tape.affine(sel, -1.0, 1.0), kClamp)), -0.5));
  }
  return total;
}

// Loss on a finished forward pass, for evaluation without a graph.
inline double loss_value(const AssignmentResult& res, const GTLabels& labels) {
  constexpr double kClamp = 1e-12;
  detail::check_labels_in_range(labels, static_cast<int>(res.p.rows()), static_cast<int>(res.p.cols()));
  if (labels.matches.empty() && labels.negatives_a.empty() && labels.negatives_b.empty())
    throw EmptySupervision("labels contain no matches and no negatives");
  double total = 0.0;
  if (!labels.matches.empty()) {
    double s = 0.0;
    for (auto [i, j] : labels.matches) s += std::log(std::max(res.p(i, j), kClamp));
    total -= s / static_cast<double>(labels.matches.size());
  }
  if (!labels.negatives_a.empty()) {
    double s = 0.0;
    for (int i : labels.negatives_a) s += std::log(std::max(1.0 - res.sigma_a[i], kClamp));
    total -= 0.5 * s / static_cast<double>(labels.negatives_a.size());
  }
  if (!labels.negatives_b.empty()) {
    double s = 0.0;
    for (int j : labels.negatives_b) s += std::log(std::max(1.0 - res.sigma_b[j], kClamp));
    total -= 0.5 * s / static_cast<double>(labels.negatives_b.size());
  }
  return total;
}

struct TrainPair {
  TokenInput a, b;
  GTLabels labels;
};

struct TrainConfig {
  int epochs = 20;
  double lr_initial = 5e-5;
  double lr_final = 6e-6;
  int lr_decay_start = 10;  // epochs before the exponential decay begins
  int batch_size = 1;
  double confidence_threshold = 0.1;
  double grad_clip = 10.0;  // global norm; 0 disables
  double holdout_fraction = 0.1;
  uint64_t seed = 0;
};

struct EpochStats {
  double train_loss = 0.0;
  double eval_loss = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

namespace detail {

struct AdamState {
  std::map<std::string, Mat> m, v;
  long step = 0;
};

inline void adam_step(MatcherParams& params, const std::map<std::string, Mat>& grads, AdamState& st, double lr,
                      double clip) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  const double scale = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;

  st.step += 1;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
  for (const auto& [name, g_raw] : grads) {
    Mat g = g_raw * scale;
    Mat& mm = st.m.try_emplace(name, Mat::Zero(g.rows(), g.cols())).first->second;
    Mat& vv = st.v.try_emplace(name, Mat::Zero(g.rows(), g.cols())).first->second;
    mm = b1 * mm + (1.0 - b1) * g;
    vv = (b2 * vv.array() + (1.0 - b2) * g.array().square()).matrix();
    Mat mhat = mm / c1;
    Mat vhat = vv / c2;
    params.block(name) -= (lr * mhat.array() / (vhat.array().sqrt() + eps)).matrix();
  }
}

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < cfg.lr_decay_start || cfg.epochs <= cfg.lr_decay_start) return cfg.lr_initial;
  const double progress =
      static_cast<double>(epoch - cfg.lr_decay_start + 1) / static_cast<double>(cfg.epochs - cfg.lr_decay_start);
  return cfg.lr_initial * std::pow(cfg.lr_final / cfg.lr_initial, progress);
}

// Precision/recall of hard matches against GT labels, micro-averaged.
struct MatchCounts {
  long tp = 0, pred = 0, gt = 0;
  double precision() const { return pred == 0 ? 0.0 : static_cast<double>(tp) / pred; }
  double recall() const { return gt == 0 ? 0.0 : static_cast<double>(tp) / gt; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

inline void count_matches(const MatchSet& pred, const GTLabels& labels, MatchCounts& c) {
  std::set<std::pair<int, int>> gt(labels.matches.begin(), labels.matches.end());
  for (const Match& m : pred.pairs)
    if (gt.count({m.i, m.j})) c.tp += 1;
  c.pred += static_cast<long>(pred.pairs.size());
  c.gt += static_cast<long>(gt.size());
}

// One corpus item holds one variant per detector arm; plain training has a
// single variant. The same index shuffle drives both paths, and the detector
// draw is skipped entirely for single-variant items so a one-detector
// fine-tune consumes the identical RNG stream as train().
inline MatcherParams train_impl(const std::vector<std::vector<const TrainPair*>>& items, const TrainConfig& cfg,
                                MatcherParams params, std::function<bool(const std::string&)> trainable,
                                std::vector<EpochStats>* stats) {
  if (items.empty()) throw Error("training corpus is empty");
  for (const auto& variants : items)
    if (variants.empty()) throw Error("corpus item has no detector variants");
  if (!trainable) trainable = [](const std::string&) { return true; };

  std::vector<size_t> order(items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, "split"));
  std::shuffle(order.begin(), order.end(), split_rng);
  const size_t n_hold = items.size() >= 5 ? std::max<size_t>(1, static_cast<size_t>(std::llround(
                                                                    cfg.holdout_fraction * items.size())))
                                          : 0;
  std::vector<size_t> train_idx(order.begin(), order.end() - static_cast<long>(n_hold));
  std::vector<size_t> hold_idx(order.end() - static_cast<long>(n_hold), order.end());
  if (hold_idx.empty()) hold_idx = train_idx;  // tiny corpora: evaluate on the train items

  Rng rng(derive_seed(cfg.seed, "train"));
  AdamState adam;
  const int batch = std::max(1, cfg.batch_size);

  auto eval_stats = [&](double train_loss) {
    EpochStats es;
    es.train_loss = train_loss;
    double hsum = 0.0;
    MatchCounts counts;
    for (size_t idx : hold_idx) {
      const TrainPair* tp = items[idx][0];
      AssignmentResult res = forward(tp->a, tp->b, params);
      hsum += loss_value(res, tp->labels);
      count_matches(extract_matches(res, cfg.confidence_threshold), tp->labels, counts);
    }
    es.eval_loss = hsum / static_cast<double>(hold_idx.size());
    es.precision = counts.precision();
    es.recall = counts.recall();
    return es;
  };

  // First stats entry records the held-out metrics at initialization.
  if (stats) stats->push_back(eval_stats(0.0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    const double lr = lr_at_epoch(cfg, epoch);
    double loss_sum = 0.0;
    long loss_n = 0;

    for (size_t start = 0; start < train_idx.size(); start += static_cast<size_t>(batch)) {
      const size_t stop = std::min(train_idx.size(), start + static_cast<size_t>(batch));
      std::map<std::string, Mat> grads;
      for (size_t s = start; s < stop; ++s) {
        const auto& variants = items[train_idx[s]];
        const TrainPair* tp =
            variants.size() == 1 ? variants[0] : variants[rng() % variants.size()];
        ad::Tape tape;
        ForwardGraph g = build_forward(tape, tp->a, tp->b, params, trainable);
        ad::Var loss = build_loss(tape, g, tp->labels);
        const double lv = tape.val(loss)(0, 0);
        if (!std::isfinite(lv))
          throw NonFiniteLoss("loss diverged at epoch " + std::to_string(epoch) + ", item " +
                              std::to_string(train_idx[s]) + ": " + std::to_string(lv));
        loss_sum += lv;
        loss_n += 1;
        tape.backward(loss);
        for (const auto& [name, var] : g.params) {
          Mat gmat = tape.grad(var);
          auto it = grads.find(name);
          if (it == grads.end())
            grads.emplace(name, std::move(gmat));
          else
            it->second += gmat;
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto& [name, g] : grads) g *= inv;
      adam_step(params, grads, adam, lr, cfg.grad_clip);
    }

    EpochStats es = eval_stats(loss_n > 0 ? loss_sum / static_cast<double>(loss_n) : 0.0);
    if (stats) stats->push_back(es);
    log_info("epoch " + std::to_string(epoch) + " lr " + std::to_string(lr) + " train_loss " +
             std::to_string(es.train_loss) + " eval_loss " + std::to_string(es.eval_loss) + " precision " +
             std::to_string(es.precision) + " recall " + std::to_string(es.recall));
  }
  return params;
}

}  // namespace detail

inline MatcherParams train(const std::vector<TrainPair>& corpus, const TrainConfig& cfg, MatcherParams params,
                           std::vector<EpochStats>* stats = nullptr) {
  std::vector<std::vector<const TrainPair*>> items;
  items.reserve(corpus.size());
  for (const TrainPair& tp : corpus) items.push_back({&tp});
  return detail::train_impl(items, cfg, std::move(params), nullptr, stats);
}

// One item per image pair, one TrainPair per detector arm. Every step draws
// a detector uniformly; descriptor-producing blocks (the patch tower) stay
// frozen so only matcher weights move.
inline MatcherParams finetune_multi_detector(const std::vector<std::vector<TrainPair>>& corpus,
                                             const TrainConfig& cfg, MatcherParams params,
                                             std::vector<EpochStats>* stats = nullptr) {
  std::vector<std::vector<const TrainPair*>> items;
  items.reserve(corpus.size());
  for (const auto& variants : corpus) {
    std::vector<const TrainPair*> ptrs;
    for (const TrainPair& tp : variants) ptrs.push_back(&tp);
    items.push_back(std::move(ptrs));
  }
  auto not_descriptor = [](const std::string& name) { return name.rfind("patch.", 0) != 0; };
  return detail::train_impl(items, cfg, std::move(params), not_descriptor, stats);
}

// Compares tape gradients against central finite differences on a seeded
// sample of entries from every parameter block; returns the worst relative
// error. Small inputs only (the full loss is re-evaluated twice per entry).
inline double gradient_check(const MatcherParams& params, const TrainPair& pair, double h = 1e-4) {
  ad::Tape tape;
  ForwardGraph g = build_forward(tape, pair.a, pair.b, params, [](const std::string&) { return true; });
  ad::Var loss = build_loss(tape, g, pair.labels);
  tape.backward(loss);

  auto loss_at = [&](const MatcherParams& p2) {
    ad::Tape t2;
    ForwardGraph g2 = build_forward(t2, pair.a, pair.b, p2);
    return t2.val(build_loss(t2, g2, pair.labels))(0, 0);
  };

  double worst = 0.0;
  for (const auto& [name, var] : g.params) {
    const Mat grad = tape.grad(var);
    const Eigen::Index total = grad.size();
    std::vector<Eigen::Index> picks;
    if (total <= 16) {
      for (Eigen::Index i = 0; i < total; ++i) picks.push_back(i);
    } else {
      Rng rng(derive_seed(params.seed ^ fnv1a(name), "gradcheck"));
      for (int i = 0; i < 16; ++i) picks.push_back(static_cast<Eigen::Index>(rng() % static_cast<uint64_t>(total)));
    }
    for (Eigen::Index flat : picks) {
      const Eigen::Index r = flat % grad.rows();
      const Eigen::Index c = flat / grad.rows();
      MatcherParams bumped = params;
      bumped.block(name)(r, c) += h;
      const double fp = loss_at(bumped);
      bumped.block(name)(r, c) -= 2 * h;
      const double fm = loss_at(bumped);
      const double fd = (fp - fm) / (2 * h);
      const double an = grad(r, c);
      const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

// Checkpoint container: magic, version, architecture, source registry, then
// named parameter blocks as little-endian 64-bit reals.
inline std::string write_checkpoint(const MatcherParams& p) {
  std::string out = "MKPW";
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(p.dim));
  put_u32(out, static_cast<uint32_t>(p.num_layers));
  put_u32(out, static_cast<uint32_t>(p.num_heads));
  put_u64(out, p.seed);
  put_u32(out, static_cast<uint32_t>(p.sources.size()));
  for (const auto& [sid, dim] : p.sources) {
    put_u32(out, static_cast<uint32_t>(sid));
    put_u32(out, static_cast<uint32_t>(dim));
  }
  put_u32(out, static_cast<uint32_t>(p.blocks.size()));
  for (const auto& [name, mat] : p.blocks) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(mat.rows()));
    put_u32(out, static_cast<uint32_t>(mat.cols()));
    for (Eigen::Index r = 0; r < mat.rows(); ++r)
      for (Eigen::Index c = 0; c < mat.cols(); ++c) put_f64(out, mat(r, c));
  }
  return out;
}

inline MatcherParams read_checkpoint(const std::string& data) {
  ByteReader rd{data, 0};
  if (!rd.need(8) || data.compare(0, 4, "MKPW") != 0) throw Error("bad checkpoint magic");
  rd.pos = 4;
  if (rd.u32() != 1) throw Error("unsupported checkpoint version");
  MatcherParams p;
  p.dim = static_cast<int>(rd.u32());
  p.num_layers = static_cast<int>(rd.u32());
  p.num_heads = static_cast<int>(rd.u32());
  p.seed = rd.u64();
  const uint32_t n_src = rd.u32();
  for (uint32_t i = 0; i < n_src; ++i) {
    const int sid = static_cast<int>(rd.u32());
    const int dim = static_cast<int>(rd.u32());
    p.sources[sid] = dim;
  }
  const uint32_t n_blocks = rd.u32();
  for (uint32_t i = 0; i < n_blocks; ++i) {
    const uint32_t len = rd.u32();
    if (!rd.need(len)) throw Error("checkpoint truncated");
    std::string name = data.substr(rd.pos, len);
    rd.pos += len;
    const uint32_t rows = rd.u32();
    const uint32_t cols = rd.u32();
    Mat m(rows, cols);
    for (uint32_t r = 0; r < rows; ++r)
      for (uint32_t c = 0; c < cols; ++c) {
        const double v = rd.f64();
        if (!std::isfinite(v)) throw Error("checkpoint block " + name + " has non-finite values");
        m(r, c) = v;
      }
    p.add_block(name, std::move(m));
  }
  if (p.dim < 2 || p.num_heads < 1 || p.dim % (2 * p.num_heads) != 0)
    throw Error("checkpoint violates head divisibility");
  return p;
}

}  // namespace matchkit
