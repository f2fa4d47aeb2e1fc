#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mptf/cloud_io.hpp"
#include "mptf/dataset.hpp"
#include "mptf/fusion_net.hpp"
#include "mptf/gradcheck.hpp"
#include "mptf/manifest.hpp"
#include "mptf/ndt_bev_encoder.hpp"
#include "mptf/place_index.hpp"
#include "mptf/riv_encoder.hpp"
#include "mptf/synth.hpp"
#include "mptf/trainer.hpp"

namespace mptf {

namespace fs = std::filesystem;

/// Everything a run depends on. One seed feeds the world, init and mining
/// streams.
struct RunConfig {
  RivConfig riv;
  BevConfig bev;
  NetConfig net;
  MiningConfig mining;
  TrainConfig train;
  ScanPattern scan;
  IntensityScale intensity = IntensityScale::kUnit;
  double eval_radius = 9.0;
  std::uint64_t seed = 0;
  fs::path out_dir = "out";

  /// Propagates the run seed and the BEV channel count.
  void sync() {
    net.seed = seed;
    train.seed = seed;
    net.bev_channels = bev.channels();
  }

  void validate() const {
    riv.validate();
    bev.validate();
    net.validate();
    mining.validate();
    if (riv.width != bev.width) {
      throw Error("RunConfig: range image width " + std::to_string(riv.width) + " differs from BEV width " +
                  std::to_string(bev.width));
    }
    if (net.bev_channels != bev.channels()) throw Error("RunConfig: network BEV channels do not match the encoder");
    net.validate_width(riv.width);
    if (!(eval_radius > 0.0)) throw Error("RunConfig: eval radius must be positive");
  }

  std::uint64_t encoder_hash() const {
    Fnv1a h;
    h.update("encoders-v1");
    h.update_pod(riv.height);
    h.update_pod(riv.width);
    h.update_pod(riv.fov_up_deg);
    h.update_pod(riv.fov_down_deg);
    h.update_pod(riv.max_range);
    h.update_pod(bev.height);
    h.update_pod(bev.width);
    h.update_pod(bev.r_max);
    h.update_pod(bev.eps);
    h.update_pod(bev.min_points);
    h.update_pod(bev.kind);
    if (bev.kind == BevKind::kMaxHeight) {
      h.update_pod(bev.z_lo);
      h.update_pod(bev.z_hi);
      h.update_pod(bev.occupancy_saturation);
    }
    h.update_pod(intensity);
    return h.digest();
  }

  /// Stamp written into every output.
  std::uint64_t hash() const {
    Fnv1a h;
    h.update_pod(encoder_hash());
    h.update_pod(net.hash());
    h.update_pod(mining.pos_radius);
    h.update_pod(mining.neg_radius);
    h.update_pod(mining.n_neg);
    h.update_pod(mining.margin);
    h.update_pod(train.epochs);
    h.update_pod(train.lr);
    h.update_pod(train.lr_decay_every);
    h.update_pod(train.lr_decay_factor);
    h.update_pod(train.batch_size);
    h.update_pod(eval_radius);
    h.update_pod(seed);
    return h.digest();
  }

  std::string stamp() const { return "config_hash=" + hex64(hash()) + " seed=" + std::to_string(seed); }
};

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodedFrame {
  FrameMeta meta;
  Grid riv;
  Grid bev;
};

inline EncodedFrame encode_cloud(const PointCloud& cloud, const FrameMeta& meta, const RunConfig& cfg) {
  return {meta, project_riv(cloud, cfg.riv).grid, build_bev(cloud, cfg.bev).grid};
}

inline PointCloud load_scan(const ManifestEntry& e, const RunConfig& cfg) {
  if (!fs::exists(e.scan)) throw Error("frame " + e.meta.frame_id + ": scan file " + e.scan.string() + " not found");
  try {
    return load_kitti_bin(e.scan, cfg.intensity);
  } catch (const Error& err) {
    throw Error("frame " + e.meta.frame_id + ": " + err.what());
  }
}

inline std::vector<EncodedFrame> encode_entries(const std::vector<const ManifestEntry*>& entries, const RunConfig& cfg) {
  std::vector<EncodedFrame> out(entries.size());
  parallel_for(entries.size(),
               [&](std::size_t i) { out[i] = encode_cloud(load_scan(*entries[i], cfg), entries[i]->meta, cfg); },
               cfg.train.threads);
  return out;
}

inline fs::path riv_path(const fs::path& dir, const std::string& id) { return dir / (id + ".riv.mptf"); }
inline fs::path bev_path(const fs::path& dir, const std::string& id) { return dir / (id + ".bev.mptf"); }

namespace detail {

inline void check_existing(const fs::path& p, std::uint64_t hash) {
  if (!fs::exists(p)) return;
  const GridFile f = load_grid(p);
  if (f.config_hash != hash) {
    throw Error(p.string() + " was written with config " + hex64(f.config_hash) + ", current config is " + hex64(hash));
  }
}

inline std::string csv_header(const RunConfig& cfg) { return "# " + cfg.stamp() + "\n"; }

inline Manifest require_manifest(const fs::path& path) {
  if (path.empty()) throw Error("--manifest is required");
  Manifest m = load_manifest(path);
  if (m.entries.empty()) throw Error("manifest " + path.string() + " lists no frames");
  return m;
}

}  // namespace detail

/// Writes one range image and one BEV tensor per manifest frame. Refuses to
/// overwrite files produced under a different encoder config.
inline std::size_t cmd_encode(const Manifest& m, const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  const std::uint64_t hash = cfg.encoder_hash();
  for (const auto& e : m.entries) {
    detail::check_existing(riv_path(out_dir, e.meta.frame_id), hash);
    detail::check_existing(bev_path(out_dir, e.meta.frame_id), hash);
  }
  std::vector<const ManifestEntry*> all;
  for (const auto& e : m.entries) all.push_back(&e);
  const auto frames = encode_entries(all, cfg);
  for (const auto& f : frames) {
    save_grid(riv_path(out_dir, f.meta.frame_id), f.riv, hash);
    save_grid(bev_path(out_dir, f.meta.frame_id), f.bev, hash);
  }
  write_text(out_dir / "encode.stamp", cfg.stamp() + " encoder_hash=" + hex64(hash) + "\n");
  return 2 * frames.size();
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Renders every frame of `opt` as a KITTI-layout scan plus a manifest.
inline Manifest cmd_synth(const SynthOptions& opt, const RunConfig& cfg, const fs::path& out_dir) {
  const SynthDataset ds = synth_dataset(opt);
  fs::create_directories(out_dir / "scans");
  Manifest m;
  for (const auto& f : ds.frames) m.entries.push_back({f.meta, out_dir / "scans" / (f.meta.frame_id + ".bin"), f.split});
  parallel_for(ds.frames.size(),
               [&](std::size_t i) { save_kitti_bin(m.entries[i].scan, render_frame(ds, ds.frames[i], cfg.scan, opt.seed)); },
               cfg.train.threads);
  save_manifest(out_dir / "manifest.txt", m,
                cfg.stamp() + " synth_seed=" + std::to_string(opt.seed) + " world_primitives=" +
                    std::to_string(ds.world.primitives.size()));
  return m;
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

inline std::vector<TrainingFrame> to_training(std::vector<EncodedFrame> frames) {
  std::vector<TrainingFrame> out;
  for (auto& f : frames) out.push_back({std::move(f.meta), std::move(f.riv), std::move(f.bev)});
  return out;
}

inline std::string loss_csv(const std::vector<EpochLog>& log, const RunConfig& cfg) {
  std::ostringstream out;
  out << detail::csv_header(cfg) << "epoch,mean_loss,lr,batches_used,batches_skipped\n";
  out << std::setprecision(17);
  for (const auto& l : log)
    out << l.epoch << ',' << l.mean_loss << ',' << l.lr << ',' << l.batches_used << ',' << l.batches_skipped << '\n';
  return out.str();
}

/// Trains on the manifest's train split. Writes checkpoint.mptf after every
/// epoch and loss.csv at the end.
inline TrainResult cmd_train(const Manifest& m, const RunConfig& cfg, const fs::path& out_dir, bool verbose = false) {
  cfg.validate();
  const auto entries = m.with_split(Split::kTrain);
  if (entries.empty()) throw Error("manifest has no frames in the train split");
  fs::create_directories(out_dir);
  const auto frames = to_training(encode_entries(entries, cfg));
  const fs::path ckpt = out_dir / "checkpoint.mptf";
  if (cfg.train.epochs == 0) save_checkpoint(ckpt, init_weights(cfg.net), cfg.net);
  TrainResult res = train(frames, cfg.net, cfg.mining, cfg.train, [&](const EpochLog& l, const NetworkWeights& w) {
    save_checkpoint(ckpt, w, cfg.net);
    if (verbose) {
      std::cerr << "epoch " << l.epoch << " loss " << l.mean_loss << " lr " << l.lr << " used " << l.batches_used
                << " skipped " << l.batches_skipped << "\n";
    }
  });
  write_text(out_dir / "loss.csv", loss_csv(res.log, cfg));
  return res;
}

struct Split2 {
  std::vector<IndexEntry> database;
  std::vector<EvalQuery> queries;
};

inline Split2 describe_splits(const std::vector<EncodedFrame>& db, const std::vector<EncodedFrame>& qs,
                              const NetworkWeights& w, const RunConfig& cfg) {
  Split2 s;
  s.database.resize(db.size());
  s.queries.resize(qs.size());
  parallel_for(db.size(), [&](std::size_t i) {
    s.database[i] = {db[i].meta.frame_id, describe(db[i].riv, db[i].bev, w, cfg.net), db[i].meta.east, db[i].meta.north};
  }, cfg.train.threads);
  parallel_for(qs.size(), [&](std::size_t i) {
    s.queries[i] = {qs[i].meta.frame_id, describe(qs[i].riv, qs[i].bev, w, cfg.net), qs[i].meta.east, qs[i].meta.north};
  }, cfg.train.threads);
  return s;
}

inline nlohmann::json report_json(const EvalReport& rep, const RunConfig& cfg) {
  nlohmann::json j;
  j["config_hash"] = hex64(cfg.hash());
  j["seed"] = cfg.seed;
  j["pos_radius_m"] = cfg.eval_radius;
  for (const auto& [k, v] : rep.recall_at) j["recall_at"][std::to_string(k)] = v;
  j["max_f1"] = rep.max_f1;
  j["pr_auc"] = rep.pr_auc;
  j["queries"] = rep.queries;
  j["revisit_queries"] = rep.revisit_queries;
  return j;
}

inline std::string pr_csv(const EvalReport& rep, const RunConfig& cfg) {
  std::ostringstream out;
  out << detail::csv_header(cfg) << "tau,precision,recall\n" << std::setprecision(17);
  for (const auto& p : rep.pr_points) out << p.tau << ',' << p.precision << ',' << p.recall << '\n';
  return out.str();
}

/// Describes the database and query splits with the given checkpoint and
/// writes report.json, pr_curve.csv and both descriptor files.
inline EvalReport cmd_eval(const Manifest& m, const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out_dir) {
  cfg.validate();
  if (checkpoint.empty() || !fs::exists(checkpoint)) throw Error("checkpoint " + checkpoint.string() + " not found");
  const NetworkWeights w = load_checkpoint(checkpoint, cfg.net);
  const auto db_entries = m.with_split(Split::kDatabase);
  const auto q_entries = m.with_split(Split::kQuery);
  if (db_entries.empty() || q_entries.empty()) throw Error("manifest needs frames in both database and query splits");
  const Split2 s = describe_splits(encode_entries(db_entries, cfg), encode_entries(q_entries, cfg), w, cfg);
  const DescriptorIndex index(s.database);
  const std::uint64_t before = index.fingerprint();
  const EvalReport rep = evaluate(index, s.queries, {1, 5, 10}, cfg.eval_radius);
  if (index.fingerprint() != before) throw Error("eval: index changed during evaluation");

  fs::create_directories(out_dir);
  write_text(out_dir / "report.json", report_json(rep, cfg).dump(2) + "\n");
  write_text(out_dir / "pr_curve.csv", pr_csv(rep, cfg));
  std::vector<DescriptorRecord> db_recs, q_recs;
  for (const auto& e : s.database) db_recs.push_back({e.frame_id, e.east, e.north, e.descriptor});
  for (const auto& q : s.queries) q_recs.push_back({q.frame_id, q.east, q.north, q.descriptor});
  save_descriptors(out_dir / "database.desc", db_recs, cfg.hash());
  save_descriptors(out_dir / "query.desc", q_recs, cfg.hash());
  return rep;
}

// ---------------------------------------------------------------------------
// Invariance
// ---------------------------------------------------------------------------

struct InvarianceRow {
  std::string kind;  ///< "cloud" (apply_yaw) or "image" (cyclic column shift)
  double angle_deg = 0.0;
  double bins = 0.0;
  bool exact = false;  ///< whether exact invariance is claimed at this angle
  double drift = 0.0;
  bool passed = true;
};

/// Descriptor drift under yaw. Cloud rows rotate the points by each angle
/// and re-encode; exact rows (360 degrees, and image shifts that are
/// multiples of the total azimuth stride) must stay within `tol`.
inline std::vector<InvarianceRow> yaw_drift(const PointCloud& cloud, const NetworkWeights& w, const RunConfig& cfg,
                                            const std::vector<double>& angles_deg, const std::vector<long>& shifts,
                                            double tol = 1e-9) {
  cfg.validate();
  const RivImage riv = project_riv(cloud, cfg.riv);
  const BevMap bev = build_bev(cloud, cfg.bev);
  const Descriptor ref = describe(riv, bev, w, cfg.net);
  const int width = cfg.riv.width;
  const long s_tot = cfg.net.azimuth_stride_total();
  std::vector<InvarianceRow> rows;
  for (double a : angles_deg) {
    const PointCloud rotated = apply_yaw(cloud, a * kPi / 180.0);
    const Descriptor d = describe(project_riv(rotated, cfg.riv), build_bev(rotated, cfg.bev), w, cfg.net);
    InvarianceRow r{"cloud", a, a / 360.0 * width, std::fmod(a, 360.0) == 0.0, descriptor_distance(ref, d), true};
    r.passed = !r.exact || r.drift <= tol;
    rows.push_back(r);
  }
  for (long k : shifts) {
    const Descriptor d = describe(shift_azimuth(riv, k), shift_azimuth(bev, k), w, cfg.net);
    InvarianceRow r{"image", 360.0 * static_cast<double>(k) / width, static_cast<double>(k), k % s_tot == 0,
                    descriptor_distance(ref, d), true};
    r.passed = !r.exact || r.drift <= tol;
    rows.push_back(r);
  }
  return rows;
}

inline std::string invariance_csv(const std::vector<InvarianceRow>& rows, const RunConfig& cfg) {
  std::ostringstream out;
  out << detail::csv_header(cfg) << "kind,angle_deg,bins,exact,drift,pass\n" << std::setprecision(17);
  for (const auto& r : rows)
    out << r.kind << ',' << r.angle_deg << ',' << r.bins << ',' << (r.exact ? 1 : 0) << ',' << r.drift << ','
        << (r.passed ? 1 : 0) << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct StageTiming {
  std::string stage;
  int reps = 0;
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

template <class Fn>
StageTiming time_stage(const std::string& name, int reps, Fn&& fn) {
  std::vector<double> ms;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  StageTiming t{name, reps, 0.0, 0.0};
  if (ms.empty()) return t;
  for (double v : ms) t.mean_ms += v;
  t.mean_ms /= static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  const auto idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ms.size()))) - 1;
  t.p95_ms = ms[std::min(idx, ms.size() - 1)];
  return t;
}

/// Dense synthetic sweep with exactly `n_points` returns: a fine scan of a
/// city block world, subsampled (or jittered and repeated) to the target.
inline PointCloud bench_cloud(std::size_t n_points, std::uint64_t seed) {
  const SyntheticWorld world = synth_world(seed, 200.0, 1.0);
  ScanPattern pat;
  pat.beams = 64;
  pat.azimuth_steps = 2048;
  PointCloud full = render_scan(world, FrameMeta{"bench", 0.0, 0.0, 0.0}, pat);
  if (full.empty()) throw Error("bench_cloud: empty render");
  std::mt19937_64 rng(sub_seed(seed, "bench"));
  std::shuffle(full.points.begin(), full.points.end(), rng);
  PointCloud out{"bench", {}};
  std::normal_distribution<double> jitter(0.0, 0.01);
  for (std::size_t i = 0; i < n_points; ++i) {
    Point p = full.points[i % full.points.size()];
    if (i >= full.points.size()) {
      p.x += jitter(rng);
      p.y += jitter(rng);
      p.z += jitter(rng);
    }
    out.points.push_back(p);
  }
  return out;
}

struct BenchOptions {
  std::size_t points = 100000;
  int encode_reps = 100;
  int forward_reps = 5;
  int query_reps = 100;
  std::size_t index_size = 1000;
};

inline std::vector<StageTiming> cmd_bench(const RunConfig& cfg, const BenchOptions& opt) {
  cfg.validate();
  const PointCloud cloud = bench_cloud(opt.points, cfg.seed);
  RivImage riv;
  BevMap bev;
  std::vector<StageTiming> out;
  out.push_back(time_stage("encode_riv", opt.encode_reps, [&] { riv = project_riv(cloud, cfg.riv); }));
  out.push_back(time_stage("encode_bev", opt.encode_reps, [&] { bev = build_bev(cloud, cfg.bev); }));
  out.push_back(time_stage("encode_total", opt.encode_reps, [&] {
    riv = project_riv(cloud, cfg.riv);
    bev = build_bev(cloud, cfg.bev);
  }));
  const NetworkWeights w = init_weights(cfg.net);
  Descriptor d;
  out.push_back(time_stage("forward", opt.forward_reps, [&] { d = describe(riv, bev, w, cfg.net); }));

  std::mt19937_64 rng(sub_seed(cfg.seed, "bench-index"));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_unit = [&] {
    Descriptor r{std::vector<double>(static_cast<std::size_t>(cfg.net.descriptor_dim))};
    double n = 0.0;
    for (double& v : r.values) {
      v = normal(rng);
      n += v * v;
    }
    for (double& v : r.values) v /= std::sqrt(n);
    return r;
  };
  std::vector<IndexEntry> entries;
  for (std::size_t i = 0; i < opt.index_size; ++i) entries.push_back({"e" + std::to_string(i), random_unit(), 0.0, 0.0});
  const DescriptorIndex index(std::move(entries));
  out.push_back(time_stage("query_top20", opt.query_reps, [&] { (void)query_topk(index, d, 20); }));
  return out;
}

inline std::string bench_csv(const std::vector<StageTiming>& t, const RunConfig& cfg, std::size_t points) {
  std::ostringstream out;
  out << detail::csv_header(cfg) << "# points=" << points << "\nstage,reps,mean_ms,p95_ms\n" << std::setprecision(6);
  for (const auto& s : t) out << s.stage << ',' << s.reps << ',' << s.mean_ms << ',' << s.p95_ms << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

namespace detail {

inline void add_run_options(CLI::App& app, RunConfig& cfg, std::string& bev_kind, std::string& intensity) {
  app.add_option("--seed", cfg.seed, "run seed (world, init and mining streams)");
  app.add_option("--out", cfg.out_dir, "output directory");
  app.add_option("--riv-height", cfg.riv.height, "range image rows");
  app.add_option("--width", cfg.riv.width, "azimuth bins shared by both views");
  app.add_option("--fov-up", cfg.riv.fov_up_deg, "upper vertical FOV, degrees");
  app.add_option("--fov-down", cfg.riv.fov_down_deg, "lower vertical FOV, degrees");
  app.add_option("--max-range", cfg.riv.max_range, "range image max range, meters");
  app.add_option("--bev-height", cfg.bev.height, "BEV radial bins");
  app.add_option("--r-max", cfg.bev.r_max, "BEV max radius, meters");
  app.add_option("--bev-eps", cfg.bev.eps, "covariance regularizer, m^2");
  app.add_option("--min-points", cfg.bev.min_points, "points per valid BEV cell");
  app.add_option("--bev-kind", bev_kind, "ndt or maxheight")->check(CLI::IsMember({"ndt", "maxheight"}));
  app.add_option("--intensity-scale", intensity, "unit or byte (0..255)")->check(CLI::IsMember({"unit", "byte"}));
  app.add_option("--levels", cfg.net.levels, "pyramid levels");
  app.add_option("--channels", cfg.net.channels, "channels per level")->delimiter(',');
  app.add_option("--vertical-strides", cfg.net.vertical_strides, "vertical stride per level")->delimiter(',');
  app.add_option("--azimuth-strides", cfg.net.azimuth_strides, "azimuth stride per level")->delimiter(',');
  app.add_option("--heads", cfg.net.heads, "attention heads");
  app.add_option("--clusters", cfg.net.clusters, "NetVLAD clusters");
  app.add_option("--descriptor-dim", cfg.net.descriptor_dim, "descriptor length");
  app.add_option("--kernel-size", cfg.net.kernel_size, "backbone kernel side");
  app.add_option("--ffn-expansion", cfg.net.ffn_expansion, "FFN hidden width factor");
  app.add_option("--pos-radius", cfg.mining.pos_radius, "positive radius, meters");
  app.add_option("--neg-radius", cfg.mining.neg_radius, "negative radius, meters");
  app.add_option("--n-neg", cfg.mining.n_neg, "negatives sampled per query");
  app.add_option("--margin", cfg.mining.margin, "triplet margin");
  app.add_option("--epochs", cfg.train.epochs, "training epochs");
  app.add_option("--lr", cfg.train.lr, "initial learning rate");
  app.add_option("--lr-decay-every", cfg.train.lr_decay_every, "epochs per learning-rate decay");
  app.add_option("--batch-size", cfg.train.batch_size, "triplets per Adam step");
  app.add_option("--threads", cfg.train.threads, "worker threads (0 = all cores)");
  app.add_option("--eval-radius", cfg.eval_radius, "evaluation positive radius, meters");
  app.add_option("--beams", cfg.scan.beams, "synthetic scan beams");
  app.add_option("--azimuth-steps", cfg.scan.azimuth_steps, "synthetic scan rays per beam");
  app.add_option("--scan-range", cfg.scan.max_range, "synthetic scan max range, meters");
}

}  // namespace detail

/// Entry point of the `mptf` tool. Exit codes: 0 success, 1 a check failed,
/// 2 usage or runtime error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"LiDAR place recognition: encode, synthesize, train, evaluate and verify"};
  app.set_config("--config", "", "TOML/INI file with run options; flags override it");
  app.require_subcommand(1);
  app.fallthrough();
  RunConfig cfg;
  std::string bev_kind = "ndt", intensity = "unit";
  detail::add_run_options(app, cfg, bev_kind, intensity);

  fs::path manifest_path, checkpoint_path, encoded_dir;
  auto* encode = app.add_subcommand("encode", "write range image and BEV tensors per frame");
  encode->add_option("--manifest", manifest_path)->required();
  encode->add_option("--encoded", encoded_dir, "tensor directory (default <out>/encoded)");

  SynthOptions synth_opt;
  auto* synth = app.add_subcommand("synth", "generate a looping synthetic dataset");
  synth->add_option("--frames", synth_opt.n_frames, "database plus query frames");
  synth->add_option("--revisit-fraction", synth_opt.revisit_fraction, "share of frames that revisit");
  synth->add_option("--train-frames", synth_opt.train_frames, "additional training frames (even)");
  synth->add_option("--spacing", synth_opt.spacing, "first-pass spacing, meters");
  synth->add_option("--density", synth_opt.density, "primitives per 100 m^2");

  auto* trn = app.add_subcommand("train", "train on the train split");
  trn->add_option("--manifest", manifest_path)->required();
  bool verbose = false;
  trn->add_flag("--verbose", verbose, "print per-epoch progress");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on database/query splits");
  ev->add_option("--manifest", manifest_path)->required();
  ev->add_option("--checkpoint", checkpoint_path)->required();

  std::vector<double> angles{55, 110, 180, 250, 305, 360};
  std::vector<long> shifts{1, 7, 264, 528, 1055};
  std::string frame_id;
  auto* inv = app.add_subcommand("invariance", "descriptor drift under yaw rotation");
  inv->add_option("--manifest", manifest_path, "take the scan from this manifest");
  inv->add_option("--frame", frame_id, "frame id (default: first frame)");
  inv->add_option("--checkpoint", checkpoint_path, "weights (default: seeded init)");
  inv->add_option("--angles", angles, "rotation angles, degrees")->delimiter(',');
  inv->add_option("--shifts", shifts, "exact cyclic column shifts")->delimiter(',');

  int grad_seeds = 20;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  grad->add_option("--seeds", grad_seeds, "random instances per primitive");

  BenchOptions bench_opt;
  auto* bench = app.add_subcommand("bench", "per-stage latency");
  bench->add_option("--points", bench_opt.points, "points in the benchmark cloud");
  bench->add_option("--reps", bench_opt.encode_reps, "encode and query repetitions");
  bench->add_option("--forward-reps", bench_opt.forward_reps, "forward repetitions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    cfg.bev.kind = bev_kind == "maxheight" ? BevKind::kMaxHeight : BevKind::kNdt;
    cfg.intensity = intensity == "byte" ? IntensityScale::kByte : IntensityScale::kUnit;
    cfg.bev.width = cfg.riv.width;
    // Per-level vectors not given explicitly follow --levels.
    const auto levels = static_cast<std::size_t>(std::max(cfg.net.levels, 1));
    if (app.count("--channels") == 0 && cfg.net.channels.size() != levels) {
      cfg.net.channels.clear();
      for (std::size_t i = 0; i < levels; ++i) cfg.net.channels.push_back(16 << i);
    }
    if (app.count("--vertical-strides") == 0) cfg.net.vertical_strides.resize(levels, 2);
    if (app.count("--azimuth-strides") == 0) cfg.net.azimuth_strides.resize(levels, 1);
    cfg.sync();
    cfg.validate();
    const fs::path out_dir = cfg.out_dir;

    if (*encode) {
      const Manifest m = detail::require_manifest(manifest_path);
      const fs::path dir = encoded_dir.empty() ? out_dir / "encoded" : encoded_dir;
      const std::size_t n = cmd_encode(m, cfg, dir);
      out << "wrote " << n << " tensors to " << dir.string() << "\n";
      return 0;
    }
    if (*synth) {
      synth_opt.seed = cfg.seed;
      const Manifest m = cmd_synth(synth_opt, cfg, out_dir);
      out << "wrote " << m.entries.size() << " scans and " << (out_dir / "manifest.txt").string() << "\n";
      return 0;
    }
    if (*trn) {
      const TrainResult r = cmd_train(detail::require_manifest(manifest_path), cfg, out_dir, verbose);
      out << "trained " << r.log.size() << " epochs; checkpoint " << (out_dir / "checkpoint.mptf").string() << "\n";
      if (!r.log.empty()) out << "final mean loss " << r.log.back().mean_loss << "\n";
      return 0;
    }
    if (*ev) {
      const EvalReport rep = cmd_eval(detail::require_manifest(manifest_path), cfg, checkpoint_path, out_dir);
      out << report_json(rep, cfg).dump(2) << "\n";
      return 0;
    }
    if (*inv) {
      PointCloud cloud;
      if (!manifest_path.empty()) {
        const Manifest m = detail::require_manifest(manifest_path);
        const ManifestEntry* pick = &m.entries.front();
        if (!frame_id.empty()) {
          auto it = std::find_if(m.entries.begin(), m.entries.end(),
                                 [&](const ManifestEntry& e) { return e.meta.frame_id == frame_id; });
          if (it == m.entries.end()) throw Error("frame " + frame_id + " not in manifest");
          pick = &*it;
        }
        cloud = load_scan(*pick, cfg);
      } else {
        cloud = render_scan(synth_world(sub_seed(cfg.seed, "world"), 200.0, 0.6), FrameMeta{"synthetic", 0.0, 0.0, 0.0},
                            cfg.scan);
      }
      const NetworkWeights w = checkpoint_path.empty() ? init_weights(cfg.net) : load_checkpoint(checkpoint_path, cfg.net);
      const auto rows = yaw_drift(cloud, w, cfg, angles, shifts);
      fs::create_directories(out_dir);
      const std::string csv = invariance_csv(rows, cfg);
      write_text(out_dir / "invariance.csv", csv);
      out << csv;
      return std::all_of(rows.begin(), rows.end(), [](const InvarianceRow& r) { return r.passed; }) ? 0 : 1;
    }
    if (*grad) {
      std::ostringstream csv;
      csv << detail::csv_header(cfg) << "primitive,checked,max_rel_error,tolerance,pass\n" << std::setprecision(6);
      bool ok = true;
      std::vector<GradCheckReport> reps;
      for (const auto& c : primitive_cases()) reps.push_back(check_primitive(c, grad_seeds, cfg.seed));
      reps.push_back(end_to_end_gradcheck(cfg.seed));
      for (const auto& r : reps) {
        ok = ok && r.passed();
        csv << r.name << ',' << r.checked << ',' << r.max_rel_error << ',' << r.tolerance << ','
            << (r.passed() ? "PASS" : "FAIL") << '\n';
      }
      fs::create_directories(out_dir);
      write_text(out_dir / "gradcheck.csv", csv.str());
      out << csv.str();
      return ok ? 0 : 1;
    }
    if (*bench) {
      const auto t = cmd_bench(cfg, bench_opt);
      fs::create_directories(out_dir);
      const std::string csv = bench_csv(t, cfg, bench_opt.points);
      write_text(out_dir / "bench.csv", csv);
      out << csv;
      return 0;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}

}  // namespace mptf
