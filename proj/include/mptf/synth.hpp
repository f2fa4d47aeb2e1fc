#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/common.hpp"

namespace mptf {

/// Horizontal plane z = height extending to infinity.
struct GroundPlane {
  double height = 0.0;
  double reflectance = 0.2;
  friend bool operator==(const GroundPlane&, const GroundPlane&) = default;
};

/// Box rotated about z by `yaw`, spanning [z_min, z_max] vertically.
struct Box {
  double cx = 0.0, cy = 0.0;
  double half_x = 1.0, half_y = 1.0;
  double yaw = 0.0;
  double z_min = 0.0, z_max = 1.0;
  double reflectance = 0.5;
  friend bool operator==(const Box&, const Box&) = default;
};

/// Vertical cylinder standing on the ground.
struct Pole {
  double cx = 0.0, cy = 0.0;
  double radius = 0.2;
  double height = 5.0;
  double reflectance = 0.5;
  friend bool operator==(const Pole&, const Pole&) = default;
};

using Primitive = std::variant<GroundPlane, Box, Pole>;

/// City-block world: a square of side `extent` centered on the origin, with
/// roads every `block_size` meters along both axes and primitives confined to
/// the block interiors. Primitive order is creation order (ray-tie priority).
struct SyntheticWorld {
  std::uint64_t seed = 0;
  double extent = 0.0;
  double density = 0.0;
  double block_size = 40.0;
  double road_width = 12.0;
  std::vector<Primitive> primitives;

  friend bool operator==(const SyntheticWorld&, const SyntheticWorld&) = default;

  /// Road centerline coordinates (shared by x and y).
  std::vector<double> road_lines() const {
    std::vector<double> lines;
    const int n = static_cast<int>(std::floor(extent / block_size + 1e-9));
    for (int k = 0; k <= n; ++k) lines.push_back(-extent / 2.0 + k * block_size);
    return lines;
  }
};

/// Generates a deterministic world. `density` counts primitives per 100 m^2
/// of total area; density 0 yields only the ground plane.
inline SyntheticWorld synth_world(std::uint64_t seed, double extent, double density,
                                  double block_size = 40.0, double road_width = 12.0) {
  if (!(extent > 0.0)) throw Error("synth_world: extent must be positive");
  if (!(block_size > road_width)) throw Error("synth_world: block_size must exceed road_width");
  SyntheticWorld world;
  world.seed = seed;
  world.extent = extent;
  world.density = density;
  world.block_size = block_size;
  world.road_width = road_width;
  world.primitives.emplace_back(GroundPlane{0.0, 0.2});

  const auto lines = world.road_lines();
  if (lines.size() < 2 || density <= 0.0) return world;

  std::mt19937_64 rng(sub_seed(seed, "world"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  const auto count = static_cast<std::size_t>(std::llround(density * extent * extent / 100.0));
  const std::size_t blocks_per_axis = lines.size() - 1;
  const double margin = road_width / 2.0;
  for (std::size_t i = 0; i < count; ++i) {
    const auto bx = static_cast<std::size_t>(unit(rng) * static_cast<double>(blocks_per_axis));
    const auto by = static_cast<std::size_t>(unit(rng) * static_cast<double>(blocks_per_axis));
    const double x0 = lines[std::min(bx, blocks_per_axis - 1)] + margin;
    const double y0 = lines[std::min(by, blocks_per_axis - 1)] + margin;
    const double span = block_size - 2.0 * margin;
    const double kind = unit(rng);
    const double refl = uniform(0.05, 0.95);
    if (kind < 0.55) {
      Box b;
      b.half_x = uniform(1.5, 7.0);
      b.half_y = uniform(1.5, 7.0);
      b.yaw = uniform(-0.4, 0.4);
      const double reach = std::hypot(b.half_x, b.half_y);
      const double free = std::max(0.0, span - 2.0 * reach);
      b.cx = x0 + reach + uniform(0.0, free);
      b.cy = y0 + reach + uniform(0.0, free);
      b.z_min = 0.0;
      b.z_max = uniform(2.5, 18.0);
      b.reflectance = refl;
      world.primitives.emplace_back(b);
    } else if (kind < 0.85) {
      Pole p;
      p.radius = uniform(0.1, 0.5);
      p.height = uniform(3.0, 9.0);
      p.cx = x0 + uniform(0.5, span - 0.5);
      p.cy = y0 + uniform(0.5, span - 0.5);
      p.reflectance = refl;
      world.primitives.emplace_back(p);
    } else {
      Box w;
      const bool along_x = unit(rng) < 0.5;
      const double len = uniform(2.5, span / 2.0);
      w.half_x = along_x ? len : 0.15;
      w.half_y = along_x ? 0.15 : len;
      w.cx = x0 + (along_x ? len + uniform(0.0, std::max(0.0, span - 2 * len)) : uniform(0.3, span - 0.3));
      w.cy = y0 + (along_x ? uniform(0.3, span - 0.3) : len + uniform(0.0, std::max(0.0, span - 2 * len)));
      w.z_min = 0.0;
      w.z_max = uniform(1.0, 3.0);
      w.reflectance = refl;
      world.primitives.emplace_back(w);
    }
  }
  return world;
}

/// Spinning-sensor scan geometry. Beam elevations sit at the centers of
/// `beams` equal slices of [fov_down, fov_up]; azimuth rays sit at the
/// centers of `azimuth_steps` equal slices of the full turn.
struct ScanPattern {
  int beams = 32;
  int azimuth_steps = 1056;
  double max_range = 80.0;
  double fov_up_deg = 10.0;
  double fov_down_deg = -30.0;
  double sensor_height = 1.8;
};

namespace detail {

struct Ray {
  double ox, oy, oz;
  double dx, dy, dz;
};

inline std::optional<double> intersect(const Ray& r, const GroundPlane& g) {
  if (r.dz == 0.0) return std::nullopt;
  const double t = (g.height - r.oz) / r.dz;
  if (t > 1e-9) return t;
  return std::nullopt;
}

inline std::optional<double> intersect(const Ray& r, const Box& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double px = r.ox - b.cx, py = r.oy - b.cy;
  // Ray expressed in the box frame.
  const double o[3] = {c * px + s * py, -s * px + c * py, r.oz};
  const double d[3] = {c * r.dx + s * r.dy, -s * r.dx + c * r.dy, r.dz};
  const double lo[3] = {-b.half_x, -b.half_y, b.z_min};
  const double hi[3] = {b.half_x, b.half_y, b.z_max};
  double t_near = -1e300, t_far = 1e300;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double t1 = (lo[a] - o[a]) / d[a];
    double t2 = (hi[a] - o[a]) / d[a];
    if (t1 > t2) std::swap(t1, t2);
    t_near = std::max(t_near, t1);
    t_far = std::min(t_far, t2);
    if (t_near > t_far) return std::nullopt;
  }
  if (t_near > 1e-9) return t_near;
  return std::nullopt;  // sensor inside the box: treated as transparent
}

inline std::optional<double> intersect(const Ray& r, const Pole& p) {
  std::optional<double> best;
  const double px = r.ox - p.cx, py = r.oy - p.cy;
  const double a = r.dx * r.dx + r.dy * r.dy;
  if (a > 0.0) {
    const double b = 2.0 * (px * r.dx + py * r.dy);
    const double c = px * px + py * py - p.radius * p.radius;
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0 && c > 0.0) {
      const double t = (-b - std::sqrt(disc)) / (2.0 * a);
      const double z = r.oz + t * r.dz;
      if (t > 1e-9 && z >= 0.0 && z <= p.height) best = t;
    }
  }
  if (r.dz < 0.0 && r.oz > p.height) {
    const double t = (p.height - r.oz) / r.dz;
    const double x = px + t * r.dx, y = py + t * r.dy;
    if (x * x + y * y <= p.radius * p.radius && (!best || t < *best)) best = t;
  }
  return best;
}

inline bool within_reach(const Primitive& prim, double sx, double sy, double max_range) {
  return std::visit(
      [&](const auto& q) -> bool {
        using T = std::decay_t<decltype(q)>;
        if constexpr (std::is_same_v<T, GroundPlane>) {
          return true;
        } else if constexpr (std::is_same_v<T, Box>) {
          return std::hypot(q.cx - sx, q.cy - sy) - std::hypot(q.half_x, q.half_y) <= max_range;
        } else {
          return std::hypot(q.cx - sx, q.cy - sy) - q.radius <= max_range;
        }
      },
      prim);
}

}  // namespace detail

/// Ray-casts one sweep from `pose` (sensor `pattern.sensor_height` above the
/// ground). Points are returned in the sensor frame; the nearest hit wins and
/// exact distance ties go to the earlier primitive.
inline PointCloud render_scan(const SyntheticWorld& world, const FrameMeta& pose,
                              const ScanPattern& pattern) {
  if (pattern.beams < 1 || pattern.azimuth_steps < 1 || !(pattern.max_range > 0.0)) {
    throw Error("render_scan: invalid scan pattern");
  }
  const double yaw = pose.yaw.value_or(0.0);
  std::vector<const Primitive*> nearby;
  for (const auto& prim : world.primitives) {
    if (detail::within_reach(prim, pose.east, pose.north, pattern.max_range)) nearby.push_back(&prim);
  }

  PointCloud cloud;
  cloud.frame_id = pose.frame_id;
  cloud.points.reserve(static_cast<std::size_t>(pattern.beams) *
                       static_cast<std::size_t>(pattern.azimuth_steps));
  const double deg = kPi / 180.0;
  const double fov = pattern.fov_up_deg - pattern.fov_down_deg;
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  for (int b = 0; b < pattern.beams; ++b) {
    const double elev = (pattern.fov_down_deg + fov * (b + 0.5) / pattern.beams) * deg;
    const double ce = std::cos(elev), se = std::sin(elev);
    for (int a = 0; a < pattern.azimuth_steps; ++a) {
      const double az = kTwoPi * (a + 0.5) / pattern.azimuth_steps;
      // Sensor-frame direction, then world-frame direction.
      const double lx = ce * std::cos(az), ly = ce * std::sin(az), lz = se;
      detail::Ray ray{pose.east, pose.north, pattern.sensor_height,
                      cy * lx - sy * ly, sy * lx + cy * ly, lz};
      double best_t = 0.0;
      const Primitive* hit = nullptr;
      for (const Primitive* prim : nearby) {
        const auto t = std::visit([&](const auto& q) { return detail::intersect(ray, q); }, *prim);
        if (t && *t <= pattern.max_range && (!hit || *t < best_t)) {
          best_t = *t;
          hit = prim;
        }
      }
      if (!hit) continue;
      const double refl = std::visit([](const auto& q) { return q.reflectance; }, *hit);
      cloud.points.push_back({best_t * lx, best_t * ly, best_t * lz, refl});
    }
  }
  return cloud;
}

}  // namespace mptf
