#pragma once
// Experiment harness: flat-text run configs, evaluation reports with a
// pinned CSV schema and self-checking aggregates, pose-AUC and match-F1
// metrics, dependency-free SVG charts, and the ablation drivers for the
// three studied mechanisms (nearby-keypoint clutter, cross-detector
// generalization, multi-detector ensembles).

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "matchkit/baseline.hpp"
#include "matchkit/describe.hpp"
#include "matchkit/detect.hpp"
#include "matchkit/ensemble.hpp"
#include "matchkit/gtlabel.hpp"
#include "matchkit/matcher.hpp"
#include "matchkit/robustpose.hpp"
#include "matchkit/synthgen.hpp"

namespace matchkit {

struct ConfigError : Error {
  using Error::Error;
};
struct ReportError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------- metrics

// Area under the cumulative error curve up to tau, normalized to [0,1]:
// each error e <= tau contributes (tau - e); infinities and NaNs count as
// failures and contribute nothing.
inline double pose_auc(const std::vector<double>& errors, double tau) {
  if (errors.empty()) throw EmptyInput("auc needs at least one error");
  if (!(tau > 0)) throw Error("auc threshold must be positive");
  double area = 0.0;
  for (double e : errors) {
    if (e < 0) throw Error("pose errors must be non-negative");
    if (e <= tau) area += tau - e;
  }
  return area / (tau * static_cast<double>(errors.size()));
}

inline std::vector<double> pose_auc_multi(const std::vector<double>& errors, const std::vector<double>& taus) {
  std::vector<double> out;
  out.reserve(taus.size());
  for (double t : taus) out.push_back(pose_auc(errors, t));
  return out;
}

// ------------------------------------------------------------- run config

// Flat `key = value` text: '#' starts a comment, duplicate keys are errors,
// and every key must be consumed by a getter before finish().
struct RunConfig {
  std::map<std::string, std::string> values;
  std::set<std::string> consumed;

  bool has(const std::string& key) const { return values.count(key) != 0; }

  std::string get_str(const std::string& key, const std::string& def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    return it->second;
  }

  std::string require_str(const std::string& key) {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("missing required config key: " + key);
    consumed.insert(key);
    return it->second;
  }

  long long get_int(const std::string& key, long long def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    char* end = nullptr;
    const long long v = std::strtoll(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0')
      throw ConfigError("key '" + key + "': expected integer, got '" + it->second + "'");
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    char* end = nullptr;
    const unsigned long long v = std::strtoull(it->second.c_str(), &end, 10);
    if (end == it->second.c_str() || *end != '\0' || it->second[0] == '-')
      throw ConfigError("key '" + key + "': expected unsigned integer, got '" + it->second + "'");
    return v;
  }

  double get_double(const std::string& key, double def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    char* end = nullptr;
    const double v = std::strtod(it->second.c_str(), &end);
    if (end == it->second.c_str() || *end != '\0')
      throw ConfigError("key '" + key + "': expected number, got '" + it->second + "'");
    return v;
  }

  bool get_bool(const std::string& key, bool def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + it->second + "'");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> def) {
    auto it = values.find(key);
    if (it == values.end()) return def;
    consumed.insert(key);
    std::vector<double> out;
    const std::string& s = it->second;
    std::size_t pos = 0;
    while (pos <= s.size()) {
      std::size_t comma = s.find(',', pos);
      if (comma == std::string::npos) comma = s.size();
      const std::string part = s.substr(pos, comma - pos);
      char* end = nullptr;
      const double v = std::strtod(part.c_str(), &end);
      if (end == part.c_str() || *end != '\0')
        throw ConfigError("key '" + key + "': expected comma-separated numbers, got '" + s + "'");
      out.push_back(v);
      pos = comma + 1;
    }
    return out;
  }

  // Unknown keys are rejected, not ignored: a typo must fail loudly.
  void finish() const {
    for (const auto& [key, value] : values)
      if (!consumed.count(key)) throw ConfigError("unknown config key: " + key);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::size_t pos = 0;
  int line_no = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || key.find(' ') != std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": bad key '" + key + "'");
    if (cfg.values.count(key)) throw ConfigError("duplicate config key: " + key);
    cfg.values[key] = value;
  }
  return cfg;
}

// ------------------------------------------------------------ eval report

struct EvalRow {
  std::string pair_id, detector, descriptor, matcher;
  int num_matches = 0;
  int num_inliers = 0;
  double rot_deg = 0.0, trans_deg = 0.0, max_deg = 0.0;
};

namespace detail {

// Six decimals is the serialized precision; aggregates are computed from
// the rounded values so a loader can recompute them exactly.
inline double round6(double v) {
  if (!std::isfinite(v)) return v;
  return static_cast<double>(std::llround(v * 1e6)) / 1e6;
}

}  // namespace detail

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<double> auc_taus{5.0, 10.0, 20.0};
  long tp = 0, pred = 0, gt = 0;  // hard-match counts vs GT labels

  std::vector<double> aucs() const {
    if (rows.empty()) return std::vector<double>(auc_taus.size(), 0.0);
    std::vector<double> errors;
    errors.reserve(rows.size());
    for (const EvalRow& r : rows) errors.push_back(r.max_deg);
    return pose_auc_multi(errors, auc_taus);
  }

  double mean_inliers() const {
    if (rows.empty()) return 0.0;
    double s = 0.0;
    for (const EvalRow& r : rows) s += r.num_inliers;
    return s / static_cast<double>(rows.size());
  }

  double precision() const { return pred == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(pred); }
  double recall() const { return gt == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(gt); }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
};

inline const char* report_header() {
  return "pair_id,detector,descriptor,matcher,num_matches,num_inliers,rot_deg,trans_deg,max_deg";
}

inline std::string write_report(const EvalReport& rep) {
  std::string out = report_header();
  out += "\n";
  for (const EvalRow& r : rep.rows) {
    out += r.pair_id + "," + r.detector + "," + r.descriptor + "," + r.matcher + ",";
    out += std::to_string(r.num_matches) + "," + std::to_string(r.num_inliers) + ",";
    out += format_fixed(r.rot_deg) + "," + format_fixed(r.trans_deg) + "," + format_fixed(r.max_deg) + "\n";
  }
  const std::vector<double> a = rep.aucs();
  for (std::size_t i = 0; i < a.size(); ++i)
    out += "# auc " + format_fixed(rep.auc_taus[i]) + " " + format_fixed(a[i], 12) + "\n";
  out += "# mean_inliers " + format_fixed(rep.mean_inliers(), 12) + "\n";
  out += "# matches " + std::to_string(rep.tp) + " " + std::to_string(rep.pred) + " " +
         std::to_string(rep.gt) + "\n";
  return out;
}

namespace detail {

inline double parse_double_field(const std::string& s, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ReportError(std::string("bad ") + what + ": '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    std::size_t c = line.find(sep, pos);
    if (c == std::string::npos) c = line.size();
    out.push_back(line.substr(pos, c - pos));
    pos = c + 1;
  }
  return out;
}

}  // namespace detail

// Loader recomputes every recomputable aggregate from the rows and rejects
// files whose stored values drifted: reports stay trustworthy after manual
// edits or partial writes.
inline EvalReport read_report(const std::string& text) {
  EvalReport rep;
  rep.auc_taus.clear();
  std::vector<double> stored_aucs;
  double stored_mean = 0.0;
  bool have_mean = false, have_counts = false;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    if (first) {
      if (line != report_header()) throw ReportError("bad report header: '" + line + "'");
      first = false;
      continue;
    }
    if (line[0] == '#') {
      const std::vector<std::string> f = detail::split(line, ' ');
      if (f.size() == 4 && f[1] == "auc") {
        rep.auc_taus.push_back(detail::parse_double_field(f[2], "auc tau"));
        stored_aucs.push_back(detail::parse_double_field(f[3], "auc value"));
      } else if (f.size() == 3 && f[1] == "mean_inliers") {
        stored_mean = detail::parse_double_field(f[2], "mean_inliers");
        have_mean = true;
      } else if (f.size() == 5 && f[1] == "matches") {
        rep.tp = std::atol(f[2].c_str());
        rep.pred = std::atol(f[3].c_str());
        rep.gt = std::atol(f[4].c_str());
        have_counts = true;
      } else {
        throw ReportError("bad report footer line: '" + line + "'");
      }
      continue;
    }
    const std::vector<std::string> f = detail::split(line, ',');
    if (f.size() != 9) throw ReportError("bad report row: '" + line + "'");
    EvalRow r;
    r.pair_id = f[0];
    r.detector = f[1];
    r.descriptor = f[2];
    r.matcher = f[3];
    r.num_matches = std::atoi(f[4].c_str());
    r.num_inliers = std::atoi(f[5].c_str());
    r.rot_deg = detail::parse_double_field(f[6], "rot_deg");
    r.trans_deg = detail::parse_double_field(f[7], "trans_deg");
    r.max_deg = detail::parse_double_field(f[8], "max_deg");
    rep.rows.push_back(std::move(r));
  }
  if (first) throw ReportError("empty report");
  if (rep.auc_taus.empty() || !have_mean || !have_counts) throw ReportError("report footer incomplete");
  const std::vector<double> recomputed = rep.aucs();
  for (std::size_t i = 0; i < recomputed.size(); ++i)
    if (std::abs(recomputed[i] - stored_aucs[i]) > 1e-9)
      throw ReportError("stored auc disagrees with rows at tau " + format_fixed(rep.auc_taus[i]));
  if (std::abs(rep.mean_inliers() - stored_mean) > 1e-9)
    throw ReportError("stored mean_inliers disagrees with rows");
  return rep;
}

// -------------------------------------------------------- detection policy

inline std::string source_label(SourceId s) {
  switch (s) {
    case SourceId::dense_sift: return "dense_sift";
    case SourceId::brief: return "brief";
    case SourceId::patch_mlp: return "patch_mlp";
  }
  return "unknown";
}

// Everything that decides which keypoints exist on an image: detector set,
// budgets, cross-detector NMS, optional near-duplicate injection, and the
// single descriptor source.
struct DetectPolicy {
  std::string name = "corner";
  std::vector<DetectorConfig> detectors{DetectorConfig::corner_defaults()};
  int per_detector_budget = 512;
  double cross_nms_radius = 3.0;
  DescribeConfig descriptor;
  bool inject = false;
  ClutterMode clutter_mode = ClutterMode::duplicate_offset;
  double clutter_magnitude = 1.5;
};

inline FeatureSet features_for(const ImageGray& img, const DetectPolicy& pol, std::uint64_t seed) {
  EnsembleConfig ec;
  ec.detectors = pol.detectors;
  ec.per_detector_budget = pol.per_detector_budget;
  ec.cross_nms_radius = pol.cross_nms_radius;
  ec.descriptor = pol.descriptor;
  if (!pol.inject) return merge_features(img, ec);
  std::vector<Keypoint> kps =
      inject_clutter(merge_keypoints(img, ec), pol.clutter_mode, pol.clutter_magnitude, seed);
  return describe_keypoints(img, kps, pol.descriptor);
}

// Clean regime: single-scale extraction with NMS, the condition found to
// help the matcher.
inline DetectPolicy clean_policy(int budget) {
  DetectPolicy p;
  p.name = "clean";
  DetectorConfig d = DetectorConfig::corner_defaults();
  d.single_scale = true;
  p.detectors = {d};
  p.per_detector_budget = budget;
  return p;
}

// Cluttered regime: multi-scale pyramid, NMS off, plus injected
// near-duplicates. Half the budget before injection keeps the token count
// matched with the clean regime.
inline DetectPolicy clutter_policy(int budget) {
  DetectPolicy p;
  p.name = "cluttered";
  DetectorConfig d = DetectorConfig::corner_defaults();
  d.single_scale = false;
  d.nms_radius = 0.0;
  p.detectors = {d};
  p.per_detector_budget = std::max(1, budget / 2);
  p.cross_nms_radius = 0.0;
  p.inject = true;
  return p;
}

inline DetectPolicy single_detector_policy(const std::string& name, DetectorConfig det, int budget) {
  DetectPolicy p;
  p.name = name;
  p.detectors = {std::move(det)};
  p.per_detector_budget = budget;
  return p;
}

inline DetectPolicy two_detector_policy(const std::string& name, DetectorConfig first, DetectorConfig second,
                                        int total_budget) {
  DetectPolicy p;
  p.name = name;
  p.detectors = {std::move(first), std::move(second)};
  p.per_detector_budget = std::max(1, total_budget / 2);
  return p;
}

// ----------------------------------------------------------------- corpora

inline std::vector<HomographyPair> make_planar_corpus(int count, std::uint64_t seed, const std::string& tag) {
  if (count <= 0) throw Error("corpus size must be positive");
  std::vector<HomographyPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    HomographyGenConfig cfg;
    cfg.seed = derive_seed(seed, tag + ":" + std::to_string(i));
    out.push_back(gen_homography_pair(cfg));
  }
  return out;
}

inline std::vector<PosedPair> make_posed_corpus(int count, std::uint64_t seed, const std::string& tag) {
  if (count <= 0) throw Error("corpus size must be positive");
  std::vector<PosedPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneConfig cfg;
    cfg.seed = derive_seed(seed, tag + ":" + std::to_string(i));
    out.push_back(gen_posed_pair(cfg));
  }
  return out;
}

inline TrainPair planar_train_pair(const HomographyPair& hp, const DetectPolicy& pol, std::uint64_t seed,
                                   double match_threshold) {
  FeatureSet fa = features_for(hp.a, pol, derive_seed(seed, "a"));
  FeatureSet fb = features_for(hp.b, pol, derive_seed(seed, "b"));
  PairSupervision sup;
  sup.transform = hp.h;
  sup.match_threshold = match_threshold;
  sup.negative_threshold = 2.0 * match_threshold;
  return TrainPair{token_input(fa), token_input(fb), labels_for_pair(fa, fb, sup)};
}

// One evaluation pair: features under a policy plus the ground truth needed
// for both match-level (labels) and pose-level (relative pose) scoring.
struct EvalItem {
  std::string id;
  FeatureSet fa, fb;
  GTLabels labels;
  CameraPose pose;
  Intrinsics ka, kb;
};

inline EvalItem posed_eval_item(std::string id, const PosedPair& pp, const DetectPolicy& pol,
                                std::uint64_t seed, double match_threshold) {
  EvalItem it;
  it.id = std::move(id);
  it.fa = features_for(pp.a, pol, derive_seed(seed, "a"));
  it.fb = features_for(pp.b, pol, derive_seed(seed, "b"));
  PairSupervision sup;
  sup.transform = PosedSupervision{pp.pose, pp.ka, pp.kb, pp.depth_a, pp.depth_b};
  sup.match_threshold = match_threshold;
  sup.negative_threshold = 2.0 * match_threshold;
  it.labels = labels_for_pair(it.fa, it.fb, sup);
  it.pose = pp.pose;
  it.ka = pp.ka;
  it.kb = pp.kb;
  return it;
}

// -------------------------------------------------------------- evaluation

struct EvalProtocol {
  std::vector<double> ransac_thresholds{0.5, 1.0, 2.0};
  std::vector<double> auc_taus{5.0, 10.0, 20.0};
  double match_tau = 0.1;  // assignment acceptance threshold
  int jobs = 1;
  std::uint64_t seed = 0;
};

inline void validate(const EvalProtocol& p) {
  if (p.ransac_thresholds.empty()) throw Error("ransac threshold grid is empty");
  if (p.auc_taus.empty()) throw Error("auc threshold list is empty");
  if (!(p.auc_taus.front() > 0)) throw Error("auc thresholds must be positive");
  for (std::size_t i = 0; i + 1 < p.auc_taus.size(); ++i)
    if (!(p.auc_taus[i] < p.auc_taus[i + 1])) throw Error("auc thresholds must be ascending");
  if (!(p.match_tau > 0.0 && p.match_tau < 1.0)) throw Error("match threshold must be in (0,1)");
}

namespace detail {

// Index-sharded worker pool. Work items write to preassigned slots, so the
// result is identical for any job count; the first exception wins.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    while (true) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::min(jobs, n);
  pool.reserve(static_cast<std::size_t>(n_threads));
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (std::thread& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// Forward every pair through the matcher, score hard matches against GT
// labels, estimate relative pose from the matches, and collect one report.
inline EvalReport run_eval(const MatcherParams& params, const std::vector<EvalItem>& items,
                           const EvalProtocol& proto, const std::string& detector_label,
                           const std::string& matcher_label) {
  validate(proto);
  EvalReport rep;
  rep.auc_taus = proto.auc_taus;
  rep.rows.resize(items.size());
  std::vector<detail::MatchCounts> counts(items.size());
  detail::parallel_for(static_cast<int>(items.size()), proto.jobs, [&](int i) {
    const EvalItem& it = items[static_cast<std::size_t>(i)];
    AssignmentResult res = forward(it.fa, it.fb, params);
    MatchSet ms = extract_matches(res, proto.match_tau);
    detail::count_matches(ms, it.labels, counts[static_cast<std::size_t>(i)]);
    RansacConfig rc;
    rc.thresholds = proto.ransac_thresholds;
    rc.seed = derive_seed(proto.seed, "eval:" + it.id);
    auto [err, ninl] = evaluate_pair(ms, it.fa.keypoints, it.fb.keypoints, it.pose, it.ka, it.kb, rc);
    EvalRow row;
    row.pair_id = it.id;
    row.detector = detector_label;
    row.descriptor = source_label(it.fa.source_id);
    row.matcher = matcher_label;
    row.num_matches = static_cast<int>(ms.size());
    row.num_inliers = ninl;
    row.rot_deg = detail::round6(err.rot_deg);
    row.trans_deg = detail::round6(err.trans_deg);
    row.max_deg = detail::round6(err.max_deg);
    rep.rows[static_cast<std::size_t>(i)] = std::move(row);
  });
  for (const detail::MatchCounts& c : counts) {
    rep.tp += c.tp;
    rep.pred += c.pred;
    rep.gt += c.gt;
  }
  return rep;
}

// -------------------------------------------------------------- SVG charts

namespace detail {

inline std::string escape_xml(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

inline const char* chart_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return palette[i % 6];
}

}  // namespace detail

struct ChartSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::string svg_line_chart(const std::string& title, const std::string& x_label,
                                  const std::string& y_label, const std::vector<ChartSeries>& series) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  std::size_t total = 0;
  for (const ChartSeries& s : series)
    for (const auto& [x, y] : s.points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
      ++total;
    }
  if (total == 0) throw EmptyInput("chart needs at least one point");
  if (xmax - xmin < 1e-12) {
    xmin -= 1.0;
    xmax += 1.0;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const double px0 = 70, px1 = 610, py0 = 370, py1 = 50;
  auto sx = [&](double x) { return px0 + (x - xmin) / (xmax - xmin) * (px1 - px0); };
  auto sy = [&](double y) { return py0 + (y - ymin) / (ymax - ymin) * (py1 - py0); };

  std::string svg =
      "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 640 420\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"420\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" + detail::escape_xml(title) +
         "</text>\n";
  for (int k = 0; k < 5; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    svg += "<line x1=\"" + format_fixed(sx(xv), 2) + "\" y1=\"" + format_fixed(py0, 2) + "\" x2=\"" +
           format_fixed(sx(xv), 2) + "\" y2=\"" + format_fixed(py1, 2) + "\" stroke=\"#dddddd\"/>\n";
    svg += "<line x1=\"" + format_fixed(px0, 2) + "\" y1=\"" + format_fixed(sy(yv), 2) + "\" x2=\"" +
           format_fixed(px1, 2) + "\" y2=\"" + format_fixed(sy(yv), 2) + "\" stroke=\"#dddddd\"/>\n";
    svg += "<text x=\"" + format_fixed(sx(xv), 2) + "\" y=\"388\" text-anchor=\"middle\">" +
           format_fixed(xv, 3) + "</text>\n";
    svg += "<text x=\"62\" y=\"" + format_fixed(sy(yv) + 4, 2) + "\" text-anchor=\"end\">" +
           format_fixed(yv, 3) + "</text>\n";
  }
  svg += "<line x1=\"70\" y1=\"370\" x2=\"610\" y2=\"370\" stroke=\"#333333\"/>\n";
  svg += "<line x1=\"70\" y1=\"50\" x2=\"70\" y2=\"370\" stroke=\"#333333\"/>\n";
  svg += "<text x=\"340\" y=\"410\" text-anchor=\"middle\">" + detail::escape_xml(x_label) + "</text>\n";
  svg += "<text x=\"18\" y=\"210\" text-anchor=\"middle\" transform=\"rotate(-90 18 210)\">" +
         detail::escape_xml(y_label) + "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = detail::chart_color(s);
    std::string pts;
    for (const auto& [x, y] : series[s].points)
      pts += format_fixed(sx(x), 2) + "," + format_fixed(sy(y), 2) + " ";
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
           pts + "\"/>\n";
    for (const auto& [x, y] : series[s].points)
      svg += "<circle cx=\"" + format_fixed(sx(x), 2) + "\" cy=\"" + format_fixed(sy(y), 2) +
             "\" r=\"3\" fill=\"" + std::string(color) + "\"/>\n";
    const double ly = 58.0 + 18.0 * static_cast<double>(s);
    svg += "<rect x=\"480\" y=\"" + format_fixed(ly - 9, 2) +
           "\" width=\"12\" height=\"12\" fill=\"" + std::string(color) + "\"/>\n";
    svg += "<text x=\"498\" y=\"" + format_fixed(ly + 1, 2) + "\">" + detail::escape_xml(series[s].name) +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

inline std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                               const std::vector<std::string>& col_labels, const Mat& values) {
  if (values.rows() != static_cast<Eigen::Index>(row_labels.size()) ||
      values.cols() != static_cast<Eigen::Index>(col_labels.size()))
    throw DimensionMismatch("heatmap labels do not match value shape");
  if (values.size() == 0) throw EmptyInput("heatmap needs at least one cell");
  const double vmin = values.minCoeff(), vmax = values.maxCoeff();
  const double cw = 96, ch = 48, x0 = 150, y0 = 70;
  const double width = x0 + cw * static_cast<double>(values.cols()) + 30;
  const double height = y0 + ch * static_cast<double>(values.rows()) + 40;

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + format_fixed(width, 0) +
                    " " + format_fixed(height, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + format_fixed(width, 0) + "\" height=\"" +
         format_fixed(height, 0) + "\" fill=\"#ffffff\"/>\n";
  svg += "<text x=\"" + format_fixed(width / 2, 1) + "\" y=\"26\" text-anchor=\"middle\" font-size=\"15\">" +
         detail::escape_xml(title) + "</text>\n";
  for (Eigen::Index c = 0; c < values.cols(); ++c)
    svg += "<text x=\"" + format_fixed(x0 + cw * (static_cast<double>(c) + 0.5), 1) +
           "\" y=\"60\" text-anchor=\"middle\">" + detail::escape_xml(col_labels[static_cast<std::size_t>(c)]) +
           "</text>\n";
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    svg += "<text x=\"" + format_fixed(x0 - 10, 1) + "\" y=\"" +
           format_fixed(y0 + ch * (static_cast<double>(r) + 0.5) + 4, 1) + "\" text-anchor=\"end\">" +
           detail::escape_xml(row_labels[static_cast<std::size_t>(r)]) + "</text>\n";
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      const double v = values(r, c);
      const double t = vmax - vmin < 1e-12 ? 0.5 : (v - vmin) / (vmax - vmin);
      const int red = static_cast<int>(std::lround(247 + t * (8 - 247)));
      const int green = static_cast<int>(std::lround(251 + t * (81 - 251)));
      const int blue = static_cast<int>(std::lround(255 + t * (156 - 255)));
      char color[8];
      std::snprintf(color, sizeof color, "#%02x%02x%02x", red, green, blue);
      svg += "<rect x=\"" + format_fixed(x0 + cw * static_cast<double>(c), 1) + "\" y=\"" +
             format_fixed(y0 + ch * static_cast<double>(r), 1) + "\" width=\"" + format_fixed(cw, 1) +
             "\" height=\"" + format_fixed(ch, 1) + "\" fill=\"" + color +
             "\" stroke=\"#ffffff\"/>\n";
      svg += "<text x=\"" + format_fixed(x0 + cw * (static_cast<double>(c) + 0.5), 1) + "\" y=\"" +
             format_fixed(y0 + ch * (static_cast<double>(r) + 0.5) + 4, 1) +
             "\" text-anchor=\"middle\" fill=\"" + (t > 0.6 ? "#ffffff" : "#111111") + "\">" +
             format_fixed(v, 3) + "</text>\n";
    }
  }
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------- ablations

// Shared sizing and schedules for the ablation drivers. Defaults target a
// full-size run; tests and quick sweeps shrink them through config.
struct SuiteConfig {
  int train_pairs = 200;
  int eval_pairs = 50;
  int budget = 512;               // keypoints per image
  double match_threshold = 3.0;   // GT label threshold, px
  MatcherInit arch;               // descriptor sources filled by the drivers
  TrainConfig train;
  TrainConfig finetune;
  EvalProtocol protocol;
  std::uint64_t seed = 0;
};

namespace detail {

inline int descriptor_dim(const TrainPair& tp) { return static_cast<int>(tp.a.desc.cols()); }

inline std::string agg_header(const std::vector<double>& taus) {
  std::string h = "f1,precision,recall";
  for (double t : taus) h += ",auc" + std::to_string(static_cast<int>(t));
  h += ",mean_inliers";
  return h;
}

inline std::string agg_fields(const EvalReport& rep) {
  std::string s = format_fixed(rep.f1()) + "," + format_fixed(rep.precision()) + "," +
                  format_fixed(rep.recall());
  for (double a : rep.aucs()) s += "," + format_fixed(a);
  s += "," + format_fixed(rep.mean_inliers());
  return s;
}

}  // namespace detail

// --- nearby-keypoint ablation: 2x2 {train condition} x {eval condition} ---

struct NearbyAblationResult {
  // cells[t][e]: t and e index {0 = clean, 1 = cluttered}
  std::string arm_names[2];
  EvalReport cells[2][2];

  double f1(int t, int e) const { return cells[t][e].f1(); }

  std::string summary_csv() const {
    std::string out = "train_arm,eval_arm," + detail::agg_header(cells[0][0].auc_taus) + "\n";
    for (int t = 0; t < 2; ++t)
      for (int e = 0; e < 2; ++e)
        out += arm_names[t] + "," + arm_names[e] + "," + detail::agg_fields(cells[t][e]) + "\n";
    return out;
  }

  std::string heatmap_svg() const {
    Mat v(2, 2);
    for (int t = 0; t < 2; ++t)
      for (int e = 0; e < 2; ++e) v(t, e) = f1(t, e);
    std::vector<std::string> rows = {"train " + arm_names[0], "train " + arm_names[1]};
    std::vector<std::string> cols = {"eval " + arm_names[0], "eval " + arm_names[1]};
    return svg_heatmap("match F1 by train/eval condition", rows, cols, v);
  }
};

inline NearbyAblationResult run_nearby_ablation(const SuiteConfig& cfg) {
  validate(cfg.protocol);
  const std::vector<HomographyPair> planar = make_planar_corpus(cfg.train_pairs, cfg.seed, "nearby-train");
  const std::vector<PosedPair> posed = make_posed_corpus(cfg.eval_pairs, cfg.seed, "nearby-eval");
  const DetectPolicy pol[2] = {clean_policy(cfg.budget), clutter_policy(cfg.budget)};

  NearbyAblationResult out;
  out.arm_names[0] = pol[0].name;
  out.arm_names[1] = pol[1].name;

  MatcherParams models[2];
  for (int t = 0; t < 2; ++t) {
    std::vector<TrainPair> corpus;
    corpus.reserve(planar.size());
    for (std::size_t i = 0; i < planar.size(); ++i)
      corpus.push_back(planar_train_pair(
          planar[i], pol[t], derive_seed(cfg.seed, "nearby:item:" + std::to_string(i) + ":" + pol[t].name),
          cfg.match_threshold));
    MatcherInit arch = cfg.arch;
    arch.sources[static_cast<int>(SourceId::dense_sift)] = detail::descriptor_dim(corpus[0]);
    arch.seed = derive_seed(cfg.seed, "nearby:init");
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "nearby:train:" + pol[t].name);
    models[t] = train(corpus, tc, init_matcher_params(arch));
  }

  for (int e = 0; e < 2; ++e) {
    std::vector<EvalItem> items;
    items.reserve(posed.size());
    for (std::size_t i = 0; i < posed.size(); ++i) {
      char id[16];
      std::snprintf(id, sizeof id, "p%04zu", i);
      items.push_back(posed_eval_item(
          id, posed[i], pol[e], derive_seed(cfg.seed, "nearby:eval:" + std::to_string(i) + ":" + pol[e].name),
          cfg.match_threshold));
    }
    for (int t = 0; t < 2; ++t) {
      EvalProtocol proto = cfg.protocol;
      proto.seed = derive_seed(cfg.seed, "nearby:ransac:" + pol[t].name + ":" + pol[e].name);
      out.cells[t][e] = run_eval(models[t], items, proto, pol[e].name, "attn-" + pol[t].name);
    }
  }
  return out;
}

// --- cross-detector ablation: specialist vs multi-detector fine-tune ---

struct CrossDetectorResult {
  std::vector<std::string> model_names;  // {specialist, fine-tuned}
  std::vector<std::string> eval_names;   // {seen, unseen, held-out merge}
  std::vector<std::vector<EvalReport>> cells;  // [model][eval]

  double f1(int m, int e) const { return cells[static_cast<std::size_t>(m)][static_cast<std::size_t>(e)].f1(); }

  std::string summary_csv() const {
    std::string out = "model,eval_detector," + detail::agg_header(cells[0][0].auc_taus) + "\n";
    for (std::size_t m = 0; m < cells.size(); ++m)
      for (std::size_t e = 0; e < cells[m].size(); ++e)
        out += model_names[m] + "," + eval_names[e] + "," + detail::agg_fields(cells[m][e]) + "\n";
    return out;
  }

  std::string heatmap_svg() const {
    Mat v(static_cast<Eigen::Index>(cells.size()), static_cast<Eigen::Index>(eval_names.size()));
    for (std::size_t m = 0; m < cells.size(); ++m)
      for (std::size_t e = 0; e < cells[m].size(); ++e)
        v(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(e)) = cells[m][e].f1();
    return svg_heatmap("match F1 by model and eval detector", model_names, eval_names, v);
  }
};

inline CrossDetectorResult run_cross_detector_ablation(const SuiteConfig& cfg) {
  validate(cfg.protocol);
  const std::vector<HomographyPair> planar = make_planar_corpus(cfg.train_pairs, cfg.seed, "xdet-train");
  const std::vector<PosedPair> posed = make_posed_corpus(cfg.eval_pairs, cfg.seed, "xdet-eval");

  const DetectPolicy corner = single_detector_policy("corner", DetectorConfig::corner_defaults(), cfg.budget);
  const DetectPolicy blob = single_detector_policy("blob", DetectorConfig::blob_defaults(), cfg.budget);
  const DetectPolicy merged = two_detector_policy("ensemble", DetectorConfig::corner_defaults(),
                                                  DetectorConfig::blob_defaults(), cfg.budget);

  // Per-pair detector variants share the image pair, so fine-tuning mixes
  // detectors without mixing scenes.
  std::vector<std::vector<TrainPair>> variants;
  variants.reserve(planar.size());
  for (std::size_t i = 0; i < planar.size(); ++i) {
    std::vector<TrainPair> v;
    v.push_back(planar_train_pair(planar[i], corner,
                                  derive_seed(cfg.seed, "xdet:item:" + std::to_string(i) + ":corner"),
                                  cfg.match_threshold));
    v.push_back(planar_train_pair(planar[i], blob,
                                  derive_seed(cfg.seed, "xdet:item:" + std::to_string(i) + ":blob"),
                                  cfg.match_threshold));
    variants.push_back(std::move(v));
  }

  MatcherInit arch = cfg.arch;
  arch.sources[static_cast<int>(SourceId::dense_sift)] = detail::descriptor_dim(variants[0][0]);
  arch.seed = derive_seed(cfg.seed, "xdet:init");

  std::vector<TrainPair> corner_only;
  corner_only.reserve(variants.size());
  for (const auto& v : variants) corner_only.push_back(v[0]);
  TrainConfig base_tc = cfg.train;
  base_tc.seed = derive_seed(cfg.seed, "xdet:train:base");
  MatcherParams base = train(corner_only, base_tc, init_matcher_params(arch));

  TrainConfig ft_tc = cfg.finetune;
  ft_tc.seed = derive_seed(cfg.seed, "xdet:train:ft");
  MatcherParams tuned = finetune_multi_detector(variants, ft_tc, base);

  CrossDetectorResult out;
  out.model_names = {"specialist-corner", "finetuned-multi"};
  out.eval_names = {corner.name, blob.name, merged.name};
  out.cells.assign(2, std::vector<EvalReport>(3));
  const DetectPolicy* eval_pols[3] = {&corner, &blob, &merged};
  const MatcherParams* models[2] = {&base, &tuned};
  for (int e = 0; e < 3; ++e) {
    std::vector<EvalItem> items;
    items.reserve(posed.size());
    for (std::size_t i = 0; i < posed.size(); ++i) {
      char id[16];
      std::snprintf(id, sizeof id, "p%04zu", i);
      items.push_back(posed_eval_item(
          id, posed[i], *eval_pols[e],
          derive_seed(cfg.seed, "xdet:eval:" + std::to_string(i) + ":" + eval_pols[e]->name),
          cfg.match_threshold));
    }
    for (int m = 0; m < 2; ++m) {
      EvalProtocol proto = cfg.protocol;
      proto.seed = derive_seed(cfg.seed, "xdet:ransac:" + out.model_names[static_cast<std::size_t>(m)] +
                                             ":" + eval_pols[e]->name);
      out.cells[static_cast<std::size_t>(m)][static_cast<std::size_t>(e)] =
          run_eval(*models[m], items, proto, eval_pols[e]->name, out.model_names[static_cast<std::size_t>(m)]);
    }
  }
  return out;
}

// --- ensemble ablation: singles vs 2-detector merge at matched budgets ---

struct EnsembleAblationResult {
  struct Cell {
    std::string config;
    int total_budget = 0;
    EvalReport report;
  };
  std::vector<Cell> cells;
  std::vector<double> auc_taus{5.0, 10.0, 20.0};

  // One row per (config, budget) cell.
  std::string curve_csv() const {
    std::string out = "config,total_budget," + detail::agg_header(auc_taus) + "\n";
    for (const Cell& c : cells)
      out += c.config + "," + std::to_string(c.total_budget) + "," + detail::agg_fields(c.report) + "\n";
    return out;
  }

  std::string curve_svg() const {
    std::map<std::string, ChartSeries> by_config;
    for (const Cell& c : cells) {
      ChartSeries& s = by_config[c.config];
      s.name = c.config;
      s.points.push_back({static_cast<double>(c.total_budget), c.report.aucs().front()});
    }
    std::vector<ChartSeries> series;
    for (auto& [name, s] : by_config) series.push_back(std::move(s));
    return svg_line_chart("pose AUC vs keypoint budget", "total keypoint budget",
                          "auc" + std::to_string(static_cast<int>(auc_taus.front())), series);
  }
};

inline EnsembleAblationResult run_ensemble_ablation(const MatcherParams& params, const SuiteConfig& cfg) {
  validate(cfg.protocol);
  const std::vector<PosedPair> posed = make_posed_corpus(cfg.eval_pairs, cfg.seed, "ens-eval");
  const std::vector<int> totals = {cfg.budget, 2 * cfg.budget};

  EnsembleAblationResult out;
  out.auc_taus = cfg.protocol.auc_taus;
  for (int total : totals) {
    std::vector<DetectPolicy> pols = {
        single_detector_policy("corner", DetectorConfig::corner_defaults(), total),
        single_detector_policy("blob", DetectorConfig::blob_defaults(), total),
        two_detector_policy("ensemble", DetectorConfig::corner_defaults(), DetectorConfig::blob_defaults(),
                            total)};
    for (const DetectPolicy& pol : pols) {
      std::vector<EvalItem> items;
      items.reserve(posed.size());
      for (std::size_t i = 0; i < posed.size(); ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "p%04zu", i);
        items.push_back(posed_eval_item(
            id, posed[i], pol,
            derive_seed(cfg.seed,
                        "ens:eval:" + pol.name + ":" + std::to_string(total) + ":" + std::to_string(i)),
            cfg.match_threshold));
      }
      EvalProtocol proto = cfg.protocol;
      proto.seed = derive_seed(cfg.seed, "ens:ransac:" + pol.name + ":" + std::to_string(total));
      EnsembleAblationResult::Cell cell;
      cell.config = pol.name;
      cell.total_budget = total;
      cell.report = run_eval(params, items, proto, pol.name, "attn");
      out.cells.push_back(std::move(cell));
    }
  }
  return out;
}

}  // namespace matchkit
