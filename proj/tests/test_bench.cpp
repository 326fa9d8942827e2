// Experiment harness: AUC metric against a numeric-integration oracle,
// config parsing, report roundtrips with aggregate self-checks, SVG chart
// structure, worker-pool determinism, and micro-size ablation drivers.
#include "matchkit/bench.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <string>
#include <vector>

using namespace matchkit;

namespace {

// Independent oracle: midpoint-rule integration of the empirical CDF.
double auc_numeric(const std::vector<double>& errors, double tau, int steps = 200000) {
  double area = 0.0;
  const double dt = tau / steps;
  for (int k = 0; k < steps; ++k) {
    const double t = (k + 0.5) * dt;
    int below = 0;
    for (double e : errors)
      if (e <= t) ++below;
    area += dt * below / static_cast<double>(errors.size());
  }
  return area / tau;
}

EvalRow make_row(const std::string& id, int matches, int inliers, double rot, double trans) {
  EvalRow r;
  r.pair_id = id;
  r.detector = "corner";
  r.descriptor = "dense_sift";
  r.matcher = "attn";
  r.num_matches = matches;
  r.num_inliers = inliers;
  r.rot_deg = rot;
  r.trans_deg = trans;
  r.max_deg = std::max(rot, trans);
  return r;
}

int count_occurrences(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (std::size_t pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("pose auc matches the hand value and the integration oracle") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(pose_auc({1.0, 3.0, inf}, 5.0) == 0.4);
  CHECK(pose_auc({0.0, 0.0}, 5.0) == 1.0);
  CHECK(pose_auc({7.0, 9.0, inf}, 5.0) == 0.0);

  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 30.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> errors;
    for (int i = 0; i < 40; ++i) errors.push_back(trial % 3 == 0 && i % 7 == 0 ? inf : u(rng));
    const double tau = 1.0 + (trial % 4) * 6.0;
    CHECK(std::abs(pose_auc(errors, tau) - auc_numeric(errors, tau)) < 1e-4);
  }
}

TEST_CASE("pose auc is monotone in the threshold and bounded") {
  std::mt19937_64 rng(78);
  std::uniform_real_distribution<double> u(0.0, 40.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> errors;
    const int n = 1 + static_cast<int>(rng() % 30);
    for (int i = 0; i < n; ++i) errors.push_back(u(rng));
    double prev = 0.0;
    for (double tau : {2.0, 5.0, 10.0, 20.0, 50.0}) {
      const double a = pose_auc(errors, tau);
      CHECK(a >= prev - 1e-12);
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
      prev = a;
    }
  }
}

TEST_CASE("pose auc rejects bad input") {
  CHECK_THROWS_AS(pose_auc({}, 5.0), EmptyInput);
  CHECK_THROWS_AS(pose_auc({1.0}, 0.0), Error);
  CHECK_THROWS_AS(pose_auc({1.0}, -2.0), Error);
  CHECK_THROWS_AS(pose_auc({-0.5}, 5.0), Error);
}

TEST_CASE("run config parses, types, and rejects unknown keys") {
  RunConfig cfg = parse_run_config(
      "# suite settings\n"
      "pairs = 12\n"
      "  noise =  0.25  # trailing comment\n"
      "name= quick run\n"
      "flag = true\n"
      "seed = 99\n"
      "grid = 0.5,1.0,2.0\n"
      "\n");
  CHECK(cfg.get_int("pairs", 0) == 12);
  CHECK(cfg.get_double("noise", 0.0) == 0.25);
  CHECK(cfg.get_str("name", "") == "quick run");
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_u64("seed", 0) == 99);
  const std::vector<double> grid = cfg.get_doubles("grid", {});
  REQUIRE(grid.size() == 3);
  CHECK(grid[1] == 1.0);
  CHECK(cfg.get_int("missing", 7) == 7);
  CHECK_NOTHROW(cfg.finish());
}

TEST_CASE("run config errors are loud") {
  CHECK_THROWS_AS(parse_run_config("a = 1\na = 2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("just words\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("bad key = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("= 3\n"), ConfigError);

  RunConfig cfg = parse_run_config("n = 5\nextra = 1\n");
  CHECK(cfg.get_int("n", 0) == 5);
  CHECK_THROWS_AS(cfg.finish(), ConfigError);

  RunConfig bad = parse_run_config("n = 5x\nf = 1.2.3\nb = maybe\nu = -4\n");
  CHECK_THROWS_AS(bad.get_int("n", 0), ConfigError);
  CHECK_THROWS_AS(bad.get_double("f", 0.0), ConfigError);
  CHECK_THROWS_AS(bad.get_bool("b", false), ConfigError);
  CHECK_THROWS_AS(bad.get_u64("u", 0), ConfigError);
  CHECK_THROWS_AS(bad.require_str("absent"), ConfigError);
}

TEST_CASE("report roundtrips and recomputes its aggregates") {
  EvalReport rep;
  rep.rows.push_back(make_row("p0000", 80, 60, 0.5, 1.25));
  rep.rows.push_back(make_row("p0001", 70, 40, 2.0, 4.0));
  rep.rows.push_back(make_row("p0002", 5, 0, std::numeric_limits<double>::infinity(),
                              std::numeric_limits<double>::infinity()));
  rep.tp = 90;
  rep.pred = 140;
  rep.gt = 120;

  const std::string text = write_report(rep);
  CHECK(text == write_report(rep));  // writer is deterministic

  EvalReport back = read_report(text);
  REQUIRE(back.rows.size() == 3);
  CHECK(back.rows[0].pair_id == "p0000");
  CHECK(back.rows[1].num_inliers == 40);
  CHECK(back.rows[1].max_deg == 4.0);
  CHECK(std::isinf(back.rows[2].max_deg));
  CHECK(back.tp == 90);
  CHECK(back.pred == 140);
  CHECK(back.gt == 120);
  REQUIRE(back.auc_taus.size() == 3);
  CHECK(back.aucs() == rep.aucs());
  CHECK(back.mean_inliers() == rep.mean_inliers());
  CHECK(write_report(back) == text);
}

TEST_CASE("report loader rejects drifted or malformed files") {
  EvalReport rep;
  rep.rows.push_back(make_row("p0000", 10, 8, 1.0, 2.0));
  rep.tp = 5;
  rep.pred = 10;
  rep.gt = 9;
  const std::string good = write_report(rep);

  std::string tampered = good;
  const std::size_t pos = tampered.find("# auc 5.000000 ");
  REQUIRE(pos != std::string::npos);
  tampered[pos + 17] = tampered[pos + 17] == '9' ? '8' : '9';
  CHECK_THROWS_AS(read_report(tampered), ReportError);

  CHECK_THROWS_AS(read_report("wrong,header\n"), ReportError);
  CHECK_THROWS_AS(read_report(std::string(report_header()) + "\na,b,c\n"), ReportError);
  CHECK_THROWS_AS(read_report(std::string(report_header()) + "\n"), ReportError);  // no footer
  CHECK_THROWS_AS(read_report(""), ReportError);
}

TEST_CASE("f1 aggregates come from the stored match counts") {
  EvalReport rep;
  rep.tp = 30;
  rep.pred = 60;
  rep.gt = 40;
  CHECK(rep.precision() == 0.5);
  CHECK(rep.recall() == 0.75);
  CHECK(std::abs(rep.f1() - 0.6) < 1e-12);
  EvalReport empty;
  CHECK(empty.f1() == 0.0);
  CHECK(empty.mean_inliers() == 0.0);
  CHECK(empty.aucs() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("line chart emits one polyline per series and a legend") {
  std::vector<ChartSeries> series(2);
  series[0].name = "corner";
  series[0].points = {{64.0, 0.2}, {128.0, 0.35}, {256.0, 0.4}};
  series[1].name = "ensemble";
  series[1].points = {{64.0, 0.25}, {128.0, 0.36}, {256.0, 0.45}};
  const std::string svg = svg_line_chart("auc vs budget", "budget", "auc5", series);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(count_occurrences(svg, "</svg>") == 1);
  CHECK(count_occurrences(svg, "<polyline") == 2);
  CHECK(count_occurrences(svg, "<circle") == 6);
  CHECK(svg.find("corner") != std::string::npos);
  CHECK(svg.find("ensemble") != std::string::npos);
  CHECK(svg == svg_line_chart("auc vs budget", "budget", "auc5", series));
  CHECK_THROWS_AS(svg_line_chart("t", "x", "y", {}), EmptyInput);
}

TEST_CASE("heatmap emits one cell per value and escapes labels") {
  Mat v(2, 3);
  v << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  const std::string svg = svg_heatmap("grid <check>", {"r0", "r1"}, {"c0", "c1", "c2"}, v);
  CHECK(count_occurrences(svg, "<rect") == 7);  // 6 cells + background
  CHECK(svg.find("grid &lt;check&gt;") != std::string::npos);
  CHECK(svg.find("0.600") != std::string::npos);
  Mat bad(1, 2);
  CHECK_THROWS_AS(svg_heatmap("t", {"a"}, {"x"}, bad), DimensionMismatch);
}

TEST_CASE("clean and cluttered policies produce the intended keypoint fields") {
  TextureConfig tc;
  const ImageGray img = gen_texture(tc, 90210);

  FeatureSet clean = features_for(img, clean_policy(96), 4);
  CHECK(clean.count() > 0);
  CHECK(clean.count() <= 96);
  CHECK(count_nearby_pairs(clean.keypoints, 3.0) == 0);

  FeatureSet cluttered = features_for(img, clutter_policy(96), 4);
  CHECK(cluttered.count() > clean.count() / 2);
  CHECK(cluttered.count() <= 96);
  CHECK(count_nearby_pairs(cluttered.keypoints, 1.6) >= cluttered.count() / 4);
}

TEST_CASE("corpora are deterministic per seed and vary per index") {
  const auto a = make_planar_corpus(3, 11, "t");
  const auto b = make_planar_corpus(3, 11, "t");
  REQUIRE(a.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(a[i].a.px == b[i].a.px);
    CHECK((a[i].h.h - b[i].h.h).norm() == 0.0);
  }
  CHECK(a[0].a.px != a[1].a.px);
  CHECK_THROWS_AS(make_planar_corpus(0, 1, "t"), Error);

  const auto p = make_posed_corpus(2, 13, "t");
  const auto q = make_posed_corpus(2, 13, "t");
  CHECK(p[0].a.px == q[0].a.px);
  CHECK((p[0].pose.R - q[0].pose.R).norm() == 0.0);
}

TEST_CASE("train pairs and eval items carry labels and ground truth") {
  const auto planar = make_planar_corpus(1, 21, "tp");
  const TrainPair tp = planar_train_pair(planar[0], clean_policy(128), 5, 3.0);
  CHECK(tp.a.count() > 20);
  CHECK(tp.labels.matches.size() > 10);

  const auto posed = make_posed_corpus(1, 22, "ev");
  const EvalItem it = posed_eval_item("p0000", posed[0], clean_policy(128), 6, 3.0);
  CHECK(it.id == "p0000");
  CHECK(it.fa.count() > 20);
  CHECK(!it.labels.matches.empty());
  CHECK((it.pose.R - posed[0].pose.R).norm() == 0.0);
}

TEST_CASE("ablation arms never share derived seeds") {
  const std::uint64_t s = 1234;
  CHECK(derive_seed(s, "nearby:train:clean") != derive_seed(s, "nearby:train:cluttered"));
  CHECK(derive_seed(s, "xdet:train:base") != derive_seed(s, "xdet:train:ft"));
  CHECK(derive_seed(s, "a") != derive_seed(s, "b"));
}

TEST_CASE("evaluation reports are identical for any worker count") {
  const auto posed = make_posed_corpus(5, 31, "par");
  const DetectPolicy pol = clean_policy(64);
  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < posed.size(); ++i)
    items.push_back(posed_eval_item("p" + std::to_string(i), posed[i], pol, derive_seed(31, std::to_string(i)), 3.0));

  MatcherInit arch;
  arch.dim = 32;
  arch.num_layers = 1;
  arch.num_heads = 2;
  arch.sources[static_cast<int>(SourceId::dense_sift)] = static_cast<int>(items[0].fa.real_desc.cols());
  arch.seed = 44;
  const MatcherParams params = init_matcher_params(arch);

  EvalProtocol proto;
  proto.seed = 8;
  EvalReport serial = run_eval(params, items, proto, "clean", "attn");
  proto.jobs = 3;
  EvalReport parallel = run_eval(params, items, proto, "clean", "attn");
  CHECK(write_report(serial) == write_report(parallel));
  REQUIRE(serial.rows.size() == items.size());
  CHECK(serial.rows[2].pair_id == "p2");

  EvalProtocol bad = proto;
  bad.auc_taus = {10.0, 5.0};
  CHECK_THROWS_AS(run_eval(params, items, bad, "clean", "attn"), Error);
}

TEST_CASE("micro nearby ablation produces a full 2x2 grid") {
  SuiteConfig cfg;
  cfg.train_pairs = 6;
  cfg.eval_pairs = 3;
  cfg.budget = 48;
  cfg.arch.dim = 32;
  cfg.arch.num_layers = 1;
  cfg.arch.num_heads = 2;
  cfg.train.epochs = 1;
  cfg.finetune.epochs = 1;
  cfg.seed = 555;

  const NearbyAblationResult res = run_nearby_ablation(cfg);
  CHECK(res.arm_names[0] == "clean");
  CHECK(res.arm_names[1] == "cluttered");
  for (int t = 0; t < 2; ++t)
    for (int e = 0; e < 2; ++e) {
      CHECK(res.cells[t][e].rows.size() == 3);
      CHECK(res.cells[t][e].gt > 0);
    }
  const std::string csv = res.summary_csv();
  CHECK(count_occurrences(csv, "\n") == 5);  // header + 4 cells
  CHECK(csv.find("clean,cluttered") != std::string::npos);
  CHECK(res.heatmap_svg().rfind("<svg", 0) == 0);
}

TEST_CASE("micro cross-detector ablation fills the model-by-detector matrix") {
  SuiteConfig cfg;
  cfg.train_pairs = 4;
  cfg.eval_pairs = 2;
  cfg.budget = 48;
  cfg.arch.dim = 32;
  cfg.arch.num_layers = 1;
  cfg.arch.num_heads = 2;
  cfg.train.epochs = 1;
  cfg.finetune.epochs = 1;
  cfg.seed = 777;

  const CrossDetectorResult res = run_cross_detector_ablation(cfg);
  REQUIRE(res.cells.size() == 2);
  REQUIRE(res.cells[0].size() == 3);
  CHECK(res.model_names[0] == "specialist-corner");
  CHECK(res.eval_names == std::vector<std::string>{"corner", "blob", "ensemble"});
  for (const auto& row : res.cells)
    for (const EvalReport& rep : row) CHECK(rep.rows.size() == 2);
  CHECK(count_occurrences(res.summary_csv(), "\n") == 7);  // header + 6 cells
  CHECK(res.heatmap_svg().rfind("<svg", 0) == 0);
}

TEST_CASE("micro ensemble ablation emits one cell per config and budget") {
  SuiteConfig cfg;
  cfg.eval_pairs = 2;
  cfg.budget = 32;
  cfg.seed = 999;

  MatcherInit arch;
  arch.dim = 32;
  arch.num_layers = 1;
  arch.num_heads = 2;
  arch.sources[static_cast<int>(SourceId::dense_sift)] = 128;
  arch.seed = 3;
  const MatcherParams params = init_matcher_params(arch);

  const EnsembleAblationResult res = run_ensemble_ablation(params, cfg);
  REQUIRE(res.cells.size() == 6);  // {corner, blob, ensemble} x {budget, 2x budget}
  CHECK(res.cells[0].config == "corner");
  CHECK(res.cells[0].total_budget == 32);
  CHECK(res.cells[5].config == "ensemble");
  CHECK(res.cells[5].total_budget == 64);
  for (const auto& cell : res.cells) CHECK(cell.report.rows.size() == 2);
  CHECK(count_occurrences(res.curve_csv(), "\n") == 7);
  const std::string svg = res.curve_svg();
  CHECK(count_occurrences(svg, "<polyline") == 3);
}
