#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/common.hpp"
#include "mptf/synth.hpp"

namespace mptf {

enum class Split { kDatabase, kQuery, kTrain };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::kDatabase: return "database";
    case Split::kQuery: return "query";
    case Split::kTrain: return "train";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "database") return Split::kDatabase;
  if (s == "query") return Split::kQuery;
  if (s == "train") return Split::kTrain;
  return std::nullopt;
}

/// Point on a route: position, heading, and arclength.
struct RouteSample {
  double east = 0.0;
  double north = 0.0;
  double heading = 0.0;
  double s = 0.0;
};

/// Polyline along road centerlines, parametrized by arclength.
class Route {
 public:
  explicit Route(std::vector<std::array<double, 2>> vertices) : v_(std::move(vertices)) {
    if (v_.size() < 2) throw Error("Route: need at least two vertices");
    cum_.push_back(0.0);
    for (std::size_t i = 1; i < v_.size(); ++i) {
      cum_.push_back(cum_.back() + std::hypot(v_[i][0] - v_[i - 1][0], v_[i][1] - v_[i - 1][1]));
    }
  }

  double length() const { return cum_.back(); }

  /// Clamped to [0, length].
  RouteSample at(double s) const {
    s = std::clamp(s, 0.0, length());
    std::size_t seg = 1;
    while (seg + 1 < v_.size() && cum_[seg] < s) ++seg;
    const auto& a = v_[seg - 1];
    const auto& b = v_[seg];
    const double len = cum_[seg] - cum_[seg - 1];
    const double t = len > 0.0 ? (s - cum_[seg - 1]) / len : 0.0;
    return {a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), std::atan2(b[1] - a[1], b[0] - a[0]), s};
  }

 private:
  std::vector<std::array<double, 2>> v_;
  std::vector<double> cum_;
};

/// Boustrophedon over the east-west roads, joined by the outer north-south
/// roads. Frames spaced >= 13 m along it are pairwise > 9 m apart, corners
/// included (13 / sqrt 2 > 9).
inline Route serpentine_route(const SyntheticWorld& world) {
  const auto lines = world.road_lines();
  if (lines.size() < 2) throw Error("serpentine_route: world has fewer than two road lines");
  const double lo = lines.front(), hi = lines.back();
  std::vector<std::array<double, 2>> v;
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const bool eastward = r % 2 == 0;
    v.push_back({eastward ? lo : hi, lines[r]});
    v.push_back({eastward ? hi : lo, lines[r]});
  }
  return Route(std::move(v));
}

/// Per-frame nuisance applied at render time.
struct Perturbation {
  double dropout = 0.0;         ///< probability of dropping each return
  double noise_sigma = 0.0;     ///< meters, isotropic Gaussian on x, y, z
  int dynamic_objects = 0;      ///< car-sized boxes placed on the road nearby
  double yaw_jitter = 0.0;      ///< radians; heading + U(-j, j), or any yaw if >= pi
};

struct SynthFrame {
  FrameMeta meta;
  Split split = Split::kDatabase;
  double route_s = 0.0;
  Perturbation perturbation;
};

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_frames = 200;             ///< database + query frames
  double revisit_fraction = 0.3;  ///< share of n_frames that are revisits (queries)
  int train_frames = 0;           ///< extra frames, two passes over a separate stretch
  double spacing = 13.0;          ///< meters between first-pass frames
  double density = 0.6;           ///< primitives per 100 m^2
  double block_size = 40.0;
  double road_width = 12.0;
  double max_along = 3.0;         ///< revisit offset along the road
  double max_lateral = 1.5;       ///< revisit offset across the road
  Perturbation revisit{0.1, 0.02, 2, kPi};
  Perturbation first_pass{0.0, 0.0, 0, 0.0};
};

struct SynthDataset {
  SyntheticWorld world;
  std::vector<SynthFrame> frames;
};

namespace detail {

/// Smallest world whose serpentine is at least `need` meters long.
inline double extent_for(double need, double block) {
  for (int nb = 2;; ++nb) {
    const double extent = nb * block;
    const double len = (nb + 1) * extent + nb * block;
    if (len >= need) return extent;
  }
}

inline std::string frame_name(std::string_view prefix, int i) {
  std::string num = std::to_string(i);
  return std::string(prefix) + std::string(num.size() < 5 ? 5 - num.size() : 0, '0') + num;
}

inline double draw_yaw(double heading, double jitter, std::mt19937_64& rng) {
  if (jitter >= kPi) return std::uniform_real_distribution<double>(-kPi, kPi)(rng);
  if (jitter <= 0.0) return heading;
  return heading + std::uniform_real_distribution<double>(-jitter, jitter)(rng);
}

}  // namespace detail

/// Looping-trajectory dataset. The first pass walks the serpentine at
/// `spacing` (database split); revisits re-enter earlier first-pass
/// positions with small along/lateral offsets (query split). Training
/// frames, when requested, are two further traversals of the same stretch,
/// sampled halfway between first-pass positions, so every one of them has a
/// partner within 9 m while sharing no frame with the evaluation splits.
inline SynthDataset synth_dataset(const SynthOptions& o) {
  if (o.n_frames < 1) throw Error("synth_dataset: n_frames must be >= 1");
  if (!(o.revisit_fraction >= 0.0 && o.revisit_fraction < 1.0)) throw Error("synth_dataset: revisit_fraction must be in [0,1)");
  if (o.train_frames < 0 || o.train_frames % 2 != 0) throw Error("synth_dataset: train_frames must be even and >= 0");
  if (!(o.spacing > 0.0)) throw Error("synth_dataset: spacing must be positive");

  const int n_rev = static_cast<int>(std::lround(o.revisit_fraction * o.n_frames));
  const int n_first = o.n_frames - n_rev;
  if (n_rev > 0 && n_first < 1) throw Error("synth_dataset: no first-pass frame to revisit");
  const int n_train_pos = o.train_frames / 2;
  const double need = o.spacing * (std::max(n_first, n_train_pos) + 1) + o.block_size;
  SynthDataset ds;
  ds.world = synth_world(sub_seed(o.seed, "world"), detail::extent_for(need, o.block_size), o.density, o.block_size,
                         o.road_width);
  const Route route = serpentine_route(ds.world);
  const double s0 = o.block_size / 2.0;

  std::mt19937_64 rng(sub_seed(o.seed, "trajectory"));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto place = [&](const RouteSample& base, double along, double lateral, const std::string& id, Split split,
                   const Perturbation& p) {
    const RouteSample c = route.at(base.s + along);
    SynthFrame f;
    f.meta.frame_id = id;
    f.meta.east = c.east - std::sin(c.heading) * lateral;
    f.meta.north = c.north + std::cos(c.heading) * lateral;
    f.meta.yaw = detail::draw_yaw(c.heading, p.yaw_jitter, rng);
    f.split = split;
    f.route_s = c.s;
    f.perturbation = p;
    return f;
  };

  for (int i = 0; i < n_first; ++i) {
    ds.frames.push_back(place(route.at(s0 + i * o.spacing), 0.0, 0.0, detail::frame_name("db", i), Split::kDatabase,
                              o.first_pass));
  }
  std::vector<int> sources(static_cast<std::size_t>(n_first));
  std::iota(sources.begin(), sources.end(), 0);
  std::shuffle(sources.begin(), sources.end(), rng);
  for (int j = 0; j < n_rev; ++j) {
    const int src = sources[static_cast<std::size_t>(j % n_first)];
    ds.frames.push_back(place(route.at(ds.frames[static_cast<std::size_t>(src)].route_s), o.max_along * unit(rng),
                              o.max_lateral * unit(rng), detail::frame_name("q", j), Split::kQuery, o.revisit));
  }
  const double t0 = s0 + 0.5 * o.spacing;
  for (int pass = 0; pass < 2; ++pass) {
    for (int i = 0; i < n_train_pos; ++i) {
      const double along = pass == 0 ? 0.0 : o.max_along * unit(rng);
      const double lateral = pass == 0 ? 0.0 : o.max_lateral * unit(rng);
      Perturbation p = pass == 0 ? o.first_pass : o.revisit;
      p.yaw_jitter = kPi;
      ds.frames.push_back(place(route.at(t0 + i * o.spacing), along, lateral,
                                detail::frame_name("tr", pass * n_train_pos + i), Split::kTrain, p));
    }
  }
  return ds;
}

/// Copies `world` and drops `count` car-sized boxes on the road within
/// 5..25 m of the frame along the route.
inline SyntheticWorld with_dynamic_objects(const SyntheticWorld& world, const Route& route, const SynthFrame& f,
                                           std::mt19937_64& rng) {
  SyntheticWorld out = world;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < f.perturbation.dynamic_objects; ++i) {
    const double dist = 5.0 + 20.0 * unit(rng);
    const double s = f.route_s + (unit(rng) < 0.5 ? -dist : dist);
    const RouteSample c = route.at(s);
    const double lateral = (unit(rng) < 0.5 ? -1.0 : 1.0) * (1.5 + 2.5 * unit(rng));
    Box car;
    car.cx = c.east - std::sin(c.heading) * lateral;
    car.cy = c.north + std::cos(c.heading) * lateral;
    car.half_x = 2.2;
    car.half_y = 0.9;
    car.yaw = c.heading;
    car.z_min = 0.0;
    car.z_max = 1.5;
    car.reflectance = 0.1 + 0.8 * unit(rng);
    if (std::hypot(car.cx - f.meta.east, car.cy - f.meta.north) < 4.0) continue;
    out.primitives.emplace_back(car);
  }
  return out;
}

/// Random return dropout and Gaussian range noise.
inline PointCloud perturb_cloud(const PointCloud& cloud, double dropout, double noise_sigma, std::mt19937_64& rng) {
  PointCloud out;
  out.frame_id = cloud.frame_id;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const Point& p : cloud.points) {
    if (dropout > 0.0 && unit(rng) < dropout) continue;
    Point q = p;
    if (noise_sigma > 0.0) {
      q.x += noise_sigma * normal(rng);
      q.y += noise_sigma * normal(rng);
      q.z += noise_sigma * normal(rng);
    }
    out.points.push_back(q);
  }
  return out;
}

/// Renders one frame with its perturbation; seeded per frame id so the
/// result does not depend on rendering order.
inline PointCloud render_frame(const SynthDataset& ds, const SynthFrame& f, const ScanPattern& pattern,
                               std::uint64_t seed) {
  std::mt19937_64 rng(sub_seed(seed, "frame:" + f.meta.frame_id));
  const Perturbation& p = f.perturbation;
  PointCloud cloud;
  if (p.dynamic_objects > 0) {
    cloud = render_scan(with_dynamic_objects(ds.world, serpentine_route(ds.world), f, rng), f.meta, pattern);
  } else {
    cloud = render_scan(ds.world, f.meta, pattern);
  }
  return perturb_cloud(cloud, p.dropout, p.noise_sigma, rng);
}

}  // namespace mptf
