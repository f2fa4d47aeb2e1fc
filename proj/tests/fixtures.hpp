#pragma once

// Random inputs shared by the unit tests and the acceptance binary.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/place_index.hpp"

namespace fixture {

using mptf::Descriptor;
using mptf::EvalQuery;
using mptf::IndexEntry;

inline Descriptor unit(std::vector<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  for (double& x : v) x /= std::sqrt(s);
  return {v};
}

inline Descriptor random_unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(d));
  for (double& x : v) x = n(rng);
  return unit(v);
}

// Queries whose descriptors are noisy copies of database entries, placed
// near or far from them; ties in distance are produced on purpose by
// duplicating descriptors.
struct Instance {
  std::vector<IndexEntry> db;
  std::vector<EvalQuery> queries;
};

inline Instance random_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_db(3, 25), n_q(1, 15), dim(2, 8);
  std::uniform_real_distribution<double> pos(0.0, 60.0), u(0.0, 1.0);
  const int d = dim(rng);
  Instance inst;
  const int n = n_db(rng);
  for (int i = 0; i < n; ++i) {
    Descriptor desc = (i > 0 && u(rng) < 0.15) ? inst.db[static_cast<std::size_t>(i - 1)].descriptor : random_unit(rng, d);
    inst.db.push_back({"db" + std::to_string(100 + i), desc, pos(rng), pos(rng)});
  }
  const int m = n_q(rng);
  for (int j = 0; j < m; ++j) {
    const auto& src = inst.db[std::uniform_int_distribution<std::size_t>(0, inst.db.size() - 1)(rng)];
    EvalQuery q;
    q.frame_id = "q" + std::to_string(j);
    if (u(rng) < 0.3) {
      q.descriptor = src.descriptor;
    } else {
      std::vector<double> v = src.descriptor.values;
      const auto noise = random_unit(rng, d);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += u(rng) * noise.values[i];
      q.descriptor = unit(v);
    }
    const bool close = u(rng) < 0.7;
    q.east = close ? src.east + 4.0 * (u(rng) - 0.5) : pos(rng);
    q.north = close ? src.north + 4.0 * (u(rng) - 0.5) : pos(rng);
    inst.queries.push_back(q);
  }
  // At least one revisit so recall is defined.
  inst.queries.front().east = inst.db.front().east;
  inst.queries.front().north = inst.db.front().north;
  return inst;
}

/// Points of one cell: a random anisotropic blob around (20, -7, 0).
inline std::vector<mptf::Point> random_cell(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), scale(0.05, 0.8), it(0.0, 1.0);
  const double sx = scale(rng), sy = scale(rng), sz = scale(rng);
  const double cx = 20.0 + u(rng), cy = -7.0 + u(rng);
  std::vector<mptf::Point> pts;
  for (int i = 0; i < n; ++i) pts.push_back({cx + sx * u(rng), cy + sy * u(rng), sz * u(rng), it(rng)});
  return pts;
}

}  // namespace fixture
