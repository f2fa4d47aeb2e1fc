// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "mptf/cli.hpp"
#include "mptf/gradcheck.hpp"
#include "mptf/ndt_bev_encoder.hpp"
#include "mptf/ops.hpp"
#include "mptf/place_index.hpp"
#include "mptf/synth.hpp"
#include "mptf/trainer.hpp"
#include "oracles.hpp"
#include "toy_benchmark.hpp"

namespace {

using namespace mptf;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Outcome ndt_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> n(2, 50);
  std::vector<std::vector<Point>> cells;
  for (int i = 0; i < 1000; ++i) cells.push_back(fixture::random_cell(rng, n(rng)));

  const auto t0 = Clock::now();
  std::vector<std::optional<CellStats>> fitted;
  for (const auto& c : cells) fitted.push_back(fit_cell(c, 1e-6, 2));
  const double elapsed = seconds_since(t0);

  double worst = 0.0;
  bool all_fitted = true;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& s = fitted[i];
    if (!s) {
      all_fitted = false;
      continue;
    }
    const auto o = oracle::fit(cells[i], 1e-6);
    for (int a = 0; a < 3; ++a) {
      worst = std::max(worst, oracle::rel_error(s->mu[a], o.mu[a]));
      for (int b = 0; b < 3; ++b) worst = std::max(worst, oracle::rel_error(s->sigma(a, b), o.sigma[a][b]));
    }
    for (auto [x, y] : {std::pair{s->entropy_p, o.entropy}, {s->pds_p, o.pds}, {s->entropy_it, o.entropy_it},
                        {s->pds_it, o.pds_it}}) {
      worst = std::max(worst, oracle::rel_error(x, y));
    }
  }
  return {all_fitted && worst <= 1e-10 && elapsed < 5.0,
          "max rel error " + fmt("%.3g", worst) + ", fit time " + fmt("%.3f", elapsed) + " s"};
}

Outcome analytic_values() {
  const double e1 = entropy_gauss(Eigen::Matrix3d::Identity());
  const double e2 = entropy_gauss(Eigen::Vector3d(4, 1, 1).asDiagonal().toDenseMatrix());
  const Eigen::Vector3d mu(1.5, -2.0, 0.25);
  const std::vector<Eigen::Vector3d> pts{mu + Eigen::Vector3d(1, 0, 0), mu - Eigen::Vector3d(1, 0, 0)};
  const double p = pds(pts, mu, Eigen::Matrix3d::Identity());
  // 1.2130613 is 2 exp(-1/2) rounded to 7 places; the 1e-9 bound applies to
  // the closed form, the rounded figure is checked to its printed digits.
  const double p_exact = 2.0 * std::exp(-0.5);
  const bool ok = std::abs(e1 - 4.2568156) <= 1e-6 && std::abs(e2 - 4.9499628) <= 1e-6 &&
                  std::abs(p - p_exact) <= 1e-9 && std::abs(p - 1.2130613) <= 5e-8;
  return {ok, "H(I)=" + fmt("%.9f", e1) + " H(diag(4,1,1))=" + fmt("%.9f", e2) + " pds=" + fmt("%.12f", p) +
                  " (2exp(-1/2) off by " + fmt("%.2g", std::abs(p - p_exact)) + ")"};
}

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

std::vector<double> values(ad::Tensor t) { return {t.value().begin(), t.value().end()}; }

Outcome layer_equivariance() {
  using ad::Shape;
  using ad::Tape;
  using ad::Tensor;
  std::mt19937_64 rng(77);
  int failures = 0;
  auto check = [&](const std::string& name, const std::function<Tensor(Tape&, Tensor, std::uint64_t)>& layer) {
    for (int trial = 0; trial < 50; ++trial) {
      const int c = 2 + trial % 3, h = 2 + trial % 4, w = 5 + trial % 11;
      const Shape s = Shape::chw(c, h, w);
      const auto x = random_values(rng, s.size());
      const long k = std::uniform_int_distribution<long>(-2 * w, 2 * w)(rng);
      const auto wseed = rng();
      Tape t;
      const Tensor fx = layer(t, t.constant(s, x), wseed);
      const Tensor fs = layer(t, t.constant(s, ad::shift_width(x, s, k)), wseed);
      if (values(fs) != ad::shift_width(values(fx), fx.shape(), k)) {
        ++failures;
        std::cout << "  " << name << " trial " << trial << " k=" << k << " not equivariant\n";
      }
    }
  };
  check("conv2d_circular", [](Tape& t, Tensor x, std::uint64_t seed) {
    std::mt19937_64 wr(seed);
    const int c = x.shape().c;
    return ad::conv2d_circular(x, t.constant(Shape::kernel(3, c, 3, 3), random_values(wr, static_cast<std::size_t>(27 * c))),
                               t.constant(Shape::flat(3), random_values(wr, 3)), 1, 1);
  });
  check("instance_norm_affine", [](Tape& t, Tensor x, std::uint64_t seed) {
    std::mt19937_64 wr(seed);
    const auto c = static_cast<std::size_t>(x.shape().c);
    return ad::instance_norm_affine(x, t.constant(Shape::flat(x.shape().c), random_values(wr, c, 0.5, 2.0)),
                                    t.constant(Shape::flat(x.shape().c), random_values(wr, c)));
  });
  check("relu", [](Tape&, Tensor x, std::uint64_t) { return ad::relu(x); });

  for (int trial = 0; trial < 50; ++trial) {
    const int c = 2 * (1 + trial % 2), hq = 1 + trial % 3, hk = 1 + trial % 4, w = 4 + trial % 9;
    const Shape qs = Shape::chw(c, hq, w), ks = Shape::chw(c, hk, w);
    const auto q = random_values(rng, qs.size()), k = random_values(rng, ks.size()), v = random_values(rng, ks.size());
    const long sh = std::uniform_int_distribution<long>(0, 3 * w)(rng);
    const int heads = 1 + trial % 2;
    Tape t;
    const auto ref = ad::azimuth_attention(t.constant(qs, q), t.constant(ks, k), t.constant(ks, v), heads);
    const auto shifted = ad::azimuth_attention(t.constant(qs, ad::shift_width(q, qs, sh)),
                                               t.constant(ks, ad::shift_width(k, ks, sh)),
                                               t.constant(ks, ad::shift_width(v, ks, sh)), heads);
    if (values(shifted) != ad::shift_width(values(ref), qs, sh)) {
      ++failures;
      std::cout << "  azimuth_attention trial " << trial << " k=" << sh << " not equivariant\n";
    }
  }
  return {failures == 0, std::to_string(failures) + " mismatches over 4 x 50 pairs"};
}

Outcome yaw_invariance() {
  RunConfig cfg;
  cfg.seed = 5;
  cfg.sync();
  // Rays sit at bin centers of the default 32 x 1056 grids, so a rotation by
  // a whole number of bins moves every point into the matching bin.
  const PointCloud cloud = render_scan(synth_world(5, 200.0, 0.6), FrameMeta{"acc", 100.0, 100.0, 0.0}, cfg.scan);
  const int w = cfg.riv.width;
  const std::vector<long> shifts{1, 7, 264, 528, 1055};
  std::vector<double> bin_angles;
  for (long k : shifts) bin_angles.push_back(360.0 * static_cast<double>(k) / w);

  bool ok = true;
  double worst_image = 0.0, worst_cloud = 0.0;
  const auto weights = init_weights(cfg.net);
  for (const auto& r : yaw_drift(cloud, weights, cfg, bin_angles, shifts)) {
    if (r.kind == "image") {
      worst_image = std::max(worst_image, r.drift);
      ok = ok && r.drift <= 1e-9;
    } else {
      worst_cloud = std::max(worst_cloud, r.drift);
      ok = ok && r.drift <= 1e-6;
    }
    std::cout << "  default " << r.kind << " " << fmt("%.4f", r.angle_deg) << " deg drift " << fmt("%.3g", r.drift) << '\n';
  }

  RunConfig speed = cfg;
  speed.net = NetConfig::speed_profile();
  speed.sync();
  double worst_speed = 0.0;
  for (const auto& r : yaw_drift(cloud, init_weights(speed.net), speed, {}, {8, 264, 528})) {
    worst_speed = std::max(worst_speed, r.drift);
    ok = ok && r.drift <= 1e-9;
    std::cout << "  speed image shift " << r.bins << " drift " << fmt("%.3g", r.drift) << '\n';
  }

  // Rotation study on a cloud whose rays do not line up with the grid:
  // reported, not asserted.
  ScanPattern dense = cfg.scan;
  dense.beams = 64;
  dense.azimuth_steps = 2000;
  const PointCloud off_grid = render_scan(synth_world(5, 200.0, 0.6), FrameMeta{"acc", 100.0, 100.0, 0.0}, dense);
  for (const auto& r : yaw_drift(off_grid, weights, cfg, {55.0, 110.0, 180.0, 250.0, 305.0}, {})) {
    std::cout << "  record " << fmt("%.0f", r.angle_deg) << " deg drift " << fmt("%.4g", r.drift) << '\n';
  }
  return {ok, "image " + fmt("%.3g", worst_image) + ", speed " + fmt("%.3g", worst_speed) + ", cloud " +
                  fmt("%.3g", worst_cloud)};
}

Outcome gradients() {
  double worst_prim = 0.0, worst_e2e = 0.0;
  bool ok = true;
  for (const auto& c : primitive_cases()) {
    const auto r = check_primitive(c, 20, 0, 1e-6);
    worst_prim = std::max(worst_prim, r.max_rel_error);
    ok = ok && r.passed();
    if (!r.passed()) std::cout << "  " << r.name << " " << fmt("%.3g", r.max_rel_error) << '\n';
  }
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto r = end_to_end_gradcheck(seed, 24, 1e-5);
    worst_e2e = std::max(worst_e2e, r.max_rel_error);
    ok = ok && r.passed();
  }
  return {ok, "primitives " + fmt("%.3g", worst_prim) + ", end-to-end " + fmt("%.3g", worst_e2e)};
}

struct ToyRun {
  double baseline_r1 = 0.0;
  double trained_r1 = 0.0;
  double f1 = 0.0;
  double seconds = 0.0;
};

ToyRun toy_run(std::uint64_t seed, BevKind kind) {
  const auto t0 = Clock::now();
  const toy::Setup s = toy::setup(seed, kind);
  const toy::Data d = toy::build(s, seed);
  ToyRun r;
  r.baseline_r1 = toy::evaluate(d, init_weights(s.net), s.net).recall_at.at(1);
  const TrainResult tr = train(d.train, s.net, s.mining, s.train);
  const auto rep = toy::evaluate(d, tr.weights, s.net);
  r.trained_r1 = rep.recall_at.at(1);
  r.f1 = rep.max_f1;
  r.seconds = seconds_since(t0);
  std::cout << "  seed " << seed << (kind == BevKind::kNdt ? " ndt" : " max-height") << " baseline R@1 "
            << r.baseline_r1 << " trained R@1 " << r.trained_r1 << " F1 " << fmt("%.3f", r.f1) << " in "
            << fmt("%.0f", r.seconds) << " s\n";
  return r;
}

std::optional<ToyRun> seed0_ndt;

Outcome toy_training() {
  seed0_ndt = toy_run(0, BevKind::kNdt);
  const auto& r = *seed0_ndt;
  return {r.trained_r1 >= 0.90 && r.trained_r1 > r.baseline_r1 && r.seconds <= 600.0,
          "R@1 " + fmt("%.2f", r.trained_r1) + " vs baseline " + fmt("%.2f", r.baseline_r1) + ", " +
              fmt("%.0f", r.seconds) + " s"};
}

Outcome ablation() {
  if (!seed0_ndt) seed0_ndt = toy_run(0, BevKind::kNdt);
  double ndt = seed0_ndt->trained_r1, height = 0.0;
  for (std::uint64_t seed = 1; seed < 3; ++seed) ndt += toy_run(seed, BevKind::kNdt).trained_r1;
  for (std::uint64_t seed = 0; seed < 3; ++seed) height += toy_run(seed, BevKind::kMaxHeight).trained_r1;
  ndt /= 3.0;
  height /= 3.0;
  return {ndt >= height, "mean R@1 ndt " + fmt("%.3f", ndt) + " vs max-height " + fmt("%.3f", height)};
}

Outcome metric_exactness() {
  int mismatches = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = fixture::random_instance(seed);
    const DescriptorIndex idx(inst.db);
    for (const auto& q : inst.queries) {
      const auto ref = oracle::full_sort(inst.db, q.descriptor.values);
      const auto top = query_topk(idx, q.descriptor, inst.db.size());
      for (std::size_t i = 0; i < top.size(); ++i) {
        mismatches += top[i].index != ref[i].index || top[i].distance != ref[i].distance;
      }
    }
    const auto rec = recall_at_k(idx, inst.queries, {1, 2, 5, 10});
    for (int k : {1, 2, 5, 10}) mismatches += rec.recall_at.at(k) != oracle::recall_at(inst.db, inst.queries, k, 9.0);
    const auto pr = pr_curve_max_f1_auc(idx, inst.queries);
    const auto ref = oracle::pr(inst.db, inst.queries, 9.0);
    mismatches += pr.max_f1 != ref.max_f1;
    mismatches += pr.pr_auc != ref.auc;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches over 100 instances"};
}

Outcome triplet_rules() {
  auto at = [](const std::string& id, double east) { return FrameMeta{id, east, 0.0, std::nullopt}; };
  // Descriptors on a line at dyadic offsets, so every distance is exact.
  auto on_line = [](double x) { return Descriptor{{x, 0.0}}; };
  std::vector<std::string> failed;
  std::mt19937_64 rng(0);

  // Two positives within 9 m: the nearer descriptor wins. Of the frames at
  // or past 18 m only those below the margin are negatives; 12 m is neither.
  {
    const std::vector<FrameMeta> f{at("q", 0), at("p1", 3), at("p2", 9), at("n1", 18), at("n2", 40), at("band", 12)};
    const std::vector<Descriptor> d{on_line(0), on_line(0.375), on_line(0.125), on_line(0.25), on_line(0.75),
                                    on_line(0.0625)};
    const auto b = mine_triplet(0, f, d, MiningConfig{}, rng);
    if (!b || b->positive != 2 || b->negatives != std::vector<std::size_t>{3}) failed.push_back("argmin/filter");
  }
  {
    const std::vector<FrameMeta> f{at("q", 0), at("p", 3), at("n", 40)};
    const std::vector<Descriptor> d{on_line(0), on_line(0.125), on_line(0.5)};
    if (mine_triplet(0, f, d, MiningConfig{}, rng)) failed.push_back("d = m must not be a negative");
  }
  {
    const std::vector<FrameMeta> f{at("q", 0), at("far", 12), at("n", 40)};
    const std::vector<Descriptor> d{on_line(0), on_line(0.125), on_line(0.25)};
    if (mine_triplet(0, f, d, MiningConfig{}, rng)) failed.push_back("no positive");
  }
  if (triplet_loss(0.2, std::vector<double>{0.9}, 0.5) != 0.0) failed.push_back("hinge zero");
  if (triplet_loss(0.25, std::vector<double>{0.5}, 0.5) != 0.25) failed.push_back("hinge 0.25");
  if (triplet_loss(0.25, std::vector<double>{0.5, 1.0}, 0.5) != 0.125) failed.push_back("hinge mean");

  std::string detail = failed.empty() ? "all fixtures exact" : "failed:";
  for (const auto& s : failed) detail += " " + s;
  return {failed.empty(), detail};
}

Outcome performance() {
  RunConfig cfg;
  cfg.sync();
  BenchOptions opt;
  opt.points = 100000;
  opt.encode_reps = 100;
  opt.forward_reps = 5;
  double encode = -1.0;
  std::string detail;
  for (const auto& t : cmd_bench(cfg, opt)) {
    std::cout << "  " << t.stage << " mean " << fmt("%.2f", t.mean_ms) << " ms p95 " << fmt("%.2f", t.p95_ms) << " ms over "
              << t.reps << '\n';
    if (t.stage == "encode_total") encode = t.mean_ms;
    if (t.stage == "forward") detail = ", forward " + fmt("%.1f", t.mean_ms) + " ms";
  }
  return {encode >= 0.0 && encode <= 150.0, "encode " + fmt("%.2f", encode) + " ms" + detail};
}

}  // namespace

// Arguments select criteria by number; none runs all of them.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"ndt oracle equivalence", ndt_oracle},
      {"analytic entropy and pds", analytic_values},
      {"layer shift equivariance", layer_equivariance},
      {"yaw invariance", yaw_invariance},
      {"gradient checks", gradients},
      {"toy training efficacy", toy_training},
      {"ndt vs max-height ablation", ablation},
      {"retrieval metric exactness", metric_exactness},
      {"triplet rules", triplet_rules},
      {"encode performance", performance},
  };
  int failed = 0;
  std::vector<std::string> lines;
  std::vector<bool> selected(criteria.size(), argc <= 1);
  for (int a = 1; a < argc; ++a) {
    const int n = std::atoi(argv[a]);
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "no criterion " << argv[a] << '\n';
      return 2;
    }
    selected[static_cast<std::size_t>(n - 1)] = true;
  }
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected[i]) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::ostringstream line;
    line << "criterion " << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << o.detail;
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << '\n';
  return failed == 0 ? 0 : 1;
}
