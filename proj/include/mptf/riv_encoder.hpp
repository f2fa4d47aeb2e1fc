#pragma once

#include <cmath>
#include <tuple>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/grid.hpp"

namespace mptf {

struct RivConfig {
  int height = 32;
  int width = 1056;
  double fov_up_deg = 10.0;
  double fov_down_deg = -30.0;
  double max_range = 80.0;

  void validate() const {
    if (height < 1 || width < 1) throw Error("RivConfig: height and width must be >= 1");
    if (!(fov_up_deg > fov_down_deg)) throw Error("RivConfig: fov_up must exceed fov_down");
    if (!(max_range > 0.0)) throw Error("RivConfig: max_range must be positive");
  }
};

/// Spherical projection with depth priority: per pixel the nearest return
/// wins; exact range ties keep the lexicographically smaller
/// (r, x, y, z, intensity).
/// Returns outside (0, max_range] or outside the vertical FOV are dropped.
inline RivImage project_riv(const PointCloud& cloud, const RivConfig& cfg) {
  cfg.validate();
  RivImage img{Grid(2, cfg.height, cfg.width, {"range", "intensity"})};
  const std::size_t pixels = static_cast<std::size_t>(cfg.height) * cfg.width;
  std::vector<const Point*> winner(pixels, nullptr);
  std::vector<double> winner_r(pixels, 0.0);
  const double fov = cfg.fov_up_deg - cfg.fov_down_deg;

  for (const Point& p : cloud.points) {
    const double r = std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z);
    if (!(r > 0.0) || r > cfg.max_range) continue;
    const double elev_deg = std::asin(std::clamp(p.z / r, -1.0, 1.0)) * 180.0 / kPi;
    const double row = std::floor(cfg.height * (cfg.fov_up_deg - elev_deg) / fov);
    if (row < 0.0 || row >= cfg.height) continue;
    const int v = static_cast<int>(row);
    const int u = azimuth_column(p.x, p.y, cfg.width);
    const std::size_t pix = static_cast<std::size_t>(v) * cfg.width + u;
    const Point* cur = winner[pix];
    if (cur == nullptr || std::tie(r, p.x, p.y, p.z, p.intensity) <
                              std::tie(winner_r[pix], cur->x, cur->y, cur->z, cur->intensity)) {
      winner[pix] = &p;
      winner_r[pix] = r;
    }
  }

  for (std::size_t pix = 0; pix < pixels; ++pix) {
    if (winner[pix] == nullptr) continue;
    const int v = static_cast<int>(pix / cfg.width);
    const int u = static_cast<int>(pix % cfg.width);
    img.grid.at(0, v, u) = static_cast<float>(winner_r[pix] / cfg.max_range);
    img.grid.at(1, v, u) = static_cast<float>(std::clamp(winner[pix]->intensity, 0.0, 1.0));
    img.grid.mask[pix] = 1;
  }
  return img;
}

}  // namespace mptf
