#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/grid.hpp"

namespace mptf {

enum class BevKind {
  kNdt,       ///< [PDS_p, EN_p, PDS_it, EN_it]
  kMaxHeight  ///< baseline [max_height, occupancy]
};

struct BevConfig {
  int height = 32;  ///< radial bins
  int width = 1056; ///< azimuth bins, shared with the range image
  double r_max = 80.0;
  double eps = 1e-6;
  int min_points = 2;
  BevKind kind = BevKind::kNdt;
  // Baseline encoder only.
  double z_lo = -3.0;
  double z_hi = 12.0;
  int occupancy_saturation = 16;

  void validate() const {
    if (height < 1 || width < 1) throw Error("BevConfig: height and width must be >= 1");
    if (!(r_max > 0.0)) throw Error("BevConfig: r_max must be positive");
    if (!(eps > 0.0)) throw Error("BevConfig: eps must be positive");
    if (min_points < 2) throw Error("BevConfig: min_points must be >= 2");
    if (!(z_hi > z_lo) || occupancy_saturation < 1) throw Error("BevConfig: invalid baseline bounds");
  }
  int channels() const { return kind == BevKind::kNdt ? 4 : 2; }
};

/// Points of one polar cell in canonical (x, y, z, intensity) order.
struct PolarCell {
  int ring = 0;
  int column = 0;
  std::vector<Point> points;
};

/// Buckets points into polar cells: radial bin floor(H * rho / r_max) with the
/// top edge clamped into the last ring, azimuth bin shared with the range
/// image. rho = 0 and rho > r_max are dropped. Cells are ordered by
/// (ring, column); empty cells are omitted.
inline std::vector<PolarCell> assign_polar_cells(const PointCloud& cloud, const BevConfig& cfg) {
  cfg.validate();
  struct Keyed {
    int ring, column;
    Point p;
  };
  std::vector<Keyed> keyed;
  keyed.reserve(cloud.size());
  for (const Point& p : cloud.points) {
    const double rho = std::sqrt(p.x * p.x + p.y * p.y);
    if (!(rho > 0.0) || rho > cfg.r_max) continue;
    const int ring = std::min(cfg.height - 1, static_cast<int>(std::floor(cfg.height * rho / cfg.r_max)));
    keyed.push_back({ring, azimuth_column(p.x, p.y, cfg.width), p});
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return std::tie(a.ring, a.column, a.p.x, a.p.y, a.p.z, a.p.intensity) <
           std::tie(b.ring, b.column, b.p.x, b.p.y, b.p.z, b.p.intensity);
  });
  std::vector<PolarCell> cells;
  for (const Keyed& k : keyed) {
    if (cells.empty() || cells.back().ring != k.ring || cells.back().column != k.column) {
      cells.push_back({k.ring, k.column, {}});
    }
    cells.back().points.push_back(k.p);
  }
  return cells;
}

/// Differential entropy of a Gaussian, 0.5 * (d ln(2 pi e) + ln|sigma|),
/// with the log-determinant taken from a Cholesky factor.
template <class Derived>
double entropy_gauss(const Eigen::MatrixBase<Derived>& sigma) {
  using Matrix = typename Derived::PlainObject;
  if (sigma.rows() != sigma.cols() || sigma.rows() < 1) throw Error("entropy_gauss: sigma must be square");
  Eigen::LLT<Matrix> llt(sigma.derived());
  if (llt.info() != Eigen::Success) throw Error("entropy_gauss: covariance is not positive definite");
  double log_det = 0.0;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < sigma.rows(); ++i) log_det += 2.0 * std::log(l(i, i));
  const double d = static_cast<double>(sigma.rows());
  return 0.5 * (d * std::log(kTwoPi * std::exp(1.0)) + log_det);
}

inline double entropy_gauss_1d(double variance) {
  if (!(variance > 0.0)) throw Error("entropy_gauss: variance must be positive");
  return 0.5 * (std::log(kTwoPi * std::exp(1.0)) + std::log(variance));
}

/// Probability density score: sum of unnormalized Gaussian responses of the
/// points under N(mu, sigma). The Mahalanobis term uses a triangular solve.
inline double pds(std::span<const Eigen::Vector3d> points, const Eigen::Vector3d& mu,
                  const Eigen::Matrix3d& sigma) {
  Eigen::LLT<Eigen::Matrix3d> llt(sigma);
  if (llt.info() != Eigen::Success) throw Error("pds: covariance is singular");
  const auto lower = llt.matrixL();
  double total = 0.0;
  for (const auto& p : points) {
    const Eigen::Vector3d z = lower.solve(p - mu);
    total += std::exp(-0.5 * z.squaredNorm());
  }
  return total;
}

inline double pds_1d(std::span<const double> values, double mu, double variance) {
  if (!(variance > 0.0)) throw Error("pds: variance must be positive");
  double total = 0.0;
  for (double v : values) total += std::exp(-0.5 * (v - mu) * (v - mu) / variance);
  return total;
}

struct CellStats {
  int n = 0;
  Eigen::Vector3d mu = Eigen::Vector3d::Zero();
  Eigen::Matrix3d sigma = Eigen::Matrix3d::Zero();
  double entropy_p = 0.0;
  double pds_p = 0.0;
  double mu_it = 0.0;
  double var_it = 0.0;
  double entropy_it = 0.0;
  double pds_it = 0.0;
};

/// Fits the cell Gaussian (N-1 divisor, sigma += eps * I) and the 1-D
/// intensity Gaussian (var += eps), then derives entropy and PDS for both.
/// Returns nullopt below `min_points`. Sums run in the given point order.
inline std::optional<CellStats> fit_cell(std::span<const Point> points, double eps, int min_points) {
  const int n = static_cast<int>(points.size());
  if (n < min_points || n < 2) return std::nullopt;
  CellStats s;
  s.n = n;
  for (const Point& p : points) {
    s.mu += Eigen::Vector3d(p.x, p.y, p.z);
    s.mu_it += p.intensity;
  }
  s.mu /= n;
  s.mu_it /= n;
  std::vector<Eigen::Vector3d> xyz;
  std::vector<double> it;
  xyz.reserve(points.size());
  it.reserve(points.size());
  for (const Point& p : points) {
    const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - s.mu;
    s.sigma += d * d.transpose();
    s.var_it += (p.intensity - s.mu_it) * (p.intensity - s.mu_it);
    xyz.emplace_back(p.x, p.y, p.z);
    it.push_back(p.intensity);
  }
  s.sigma /= (n - 1);
  s.sigma += eps * Eigen::Matrix3d::Identity();
  s.var_it = s.var_it / (n - 1) + eps;

  s.entropy_p = entropy_gauss(s.sigma);
  s.pds_p = pds(xyz, s.mu, s.sigma);
  s.entropy_it = entropy_gauss_1d(s.var_it);
  s.pds_it = pds_1d(it, s.mu_it, s.var_it);
  return s;
}

/// Fixed entropy bounds used to map entropies into [0,1]. Fixed per config
/// (never per frame) so normalization commutes with azimuth shifts.
struct EntropyBounds {
  double geo_lo, geo_hi, it_lo, it_hi;

  static EntropyBounds from(const BevConfig& cfg) {
    EntropyBounds b;
    b.geo_lo = entropy_gauss(Eigen::Matrix3d(cfg.eps * Eigen::Matrix3d::Identity()));
    b.geo_hi = entropy_gauss(Eigen::Matrix3d(cfg.r_max * cfg.r_max / 4.0 * Eigen::Matrix3d::Identity()));
    b.it_lo = entropy_gauss_1d(cfg.eps);
    b.it_hi = entropy_gauss_1d(0.25);
    return b;
  }
};

inline double normalize_entropy(double h, double lo, double hi) {
  return std::clamp((h - lo) / (hi - lo), 0.0, 1.0);
}

struct CellRecord {
  int ring = 0;
  int column = 0;
  CellStats stats;
};

/// Encoded map plus the raw per-cell statistics behind it.
struct BevBuild {
  BevMap map;
  std::vector<CellRecord> cells;
};

inline BevBuild build_bev_detailed(const PointCloud& cloud, const BevConfig& cfg) {
  cfg.validate();
  if (cfg.kind != BevKind::kNdt) throw Error("build_bev_detailed: NDT encoder required");
  BevBuild out{BevMap{Grid(4, cfg.height, cfg.width, {"PDS_p", "EN_p", "PDS_it", "EN_it"})}, {}};
  const EntropyBounds bounds = EntropyBounds::from(cfg);
  for (const PolarCell& cell : assign_polar_cells(cloud, cfg)) {
    auto stats = fit_cell(cell.points, cfg.eps, cfg.min_points);
    if (!stats) continue;
    Grid& g = out.map.grid;
    g.at(0, cell.ring, cell.column) = static_cast<float>(stats->pds_p / stats->n);
    g.at(1, cell.ring, cell.column) =
        static_cast<float>(normalize_entropy(stats->entropy_p, bounds.geo_lo, bounds.geo_hi));
    g.at(2, cell.ring, cell.column) = static_cast<float>(stats->pds_it / stats->n);
    g.at(3, cell.ring, cell.column) =
        static_cast<float>(normalize_entropy(stats->entropy_it, bounds.it_lo, bounds.it_hi));
    g.mask[static_cast<std::size_t>(cell.ring) * cfg.width + cell.column] = 1;
    out.cells.push_back({cell.ring, cell.column, *stats});
  }
  return out;
}

/// Baseline polar BEV: normalized max height and saturating point count.
inline BevMap build_max_height_bev(const PointCloud& cloud, const BevConfig& cfg) {
  cfg.validate();
  BevMap map{Grid(2, cfg.height, cfg.width, {"max_height", "occupancy"})};
  for (const PolarCell& cell : assign_polar_cells(cloud, cfg)) {
    double z_max = cell.points.front().z;
    for (const Point& p : cell.points) z_max = std::max(z_max, p.z);
    const auto n = static_cast<double>(cell.points.size());
    map.grid.at(0, cell.ring, cell.column) =
        static_cast<float>(std::clamp((z_max - cfg.z_lo) / (cfg.z_hi - cfg.z_lo), 0.0, 1.0));
    map.grid.at(1, cell.ring, cell.column) =
        static_cast<float>(std::min(1.0, n / cfg.occupancy_saturation));
    map.grid.mask[static_cast<std::size_t>(cell.ring) * cfg.width + cell.column] = 1;
  }
  return map;
}

/// Encodes with the encoder selected by `cfg.kind`.
inline BevMap build_bev(const PointCloud& cloud, const BevConfig& cfg) {
  if (cfg.kind == BevKind::kMaxHeight) return build_max_height_bev(cloud, cfg);
  return build_bev_detailed(cloud, cfg).map;
}

}  // namespace mptf
