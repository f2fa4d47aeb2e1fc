#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "mptf/common.hpp"

namespace mptf {

/// Sensor-frame return: meters with z up, intensity normalized to [0,1].
struct Point {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double intensity = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

/// Ordering carries no meaning; every encoder is order-independent.
struct PointCloud {
  std::string frame_id;
  std::vector<Point> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Capture location of a frame in the shared map frame.
struct FrameMeta {
  std::string frame_id;
  double east = 0.0;
  double north = 0.0;
  std::optional<double> yaw;
};

inline double planar_distance(const FrameMeta& a, const FrameMeta& b) {
  return std::hypot(a.east - b.east, a.north - b.north);
}

/// Scale of the raw intensity column in a scan file.
enum class IntensityScale {
  kUnit,   ///< already in [0,1] (KITTI)
  kByte,   ///< 0..255, divided by 255 at load
};

namespace detail {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

inline float load_le_f32(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                       (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) |
                       (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline void store_le_f32(float v, unsigned char* p) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  p[0] = static_cast<unsigned char>(bits & 0xFF);
  p[1] = static_cast<unsigned char>((bits >> 8) & 0xFF);
  p[2] = static_cast<unsigned char>((bits >> 16) & 0xFF);
  p[3] = static_cast<unsigned char>((bits >> 24) & 0xFF);
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw Error("read failure on " + path.string());
  return bytes;
}

}  // namespace detail

/// Decodes a KITTI velodyne scan: consecutive records of four little-endian
/// float32 values (x, y, z, intensity). Intensity is clamped into [0,1].
inline PointCloud decode_kitti_bin(const std::vector<unsigned char>& bytes,
                                   IntensityScale scale = IntensityScale::kUnit) {
  if (bytes.size() % 16 != 0) {
    throw Error("malformed KITTI scan: " + std::to_string(bytes.size()) +
                " bytes is not a multiple of 16");
  }
  PointCloud cloud;
  cloud.points.reserve(bytes.size() / 16);
  const double divisor = scale == IntensityScale::kByte ? 255.0 : 1.0;
  for (std::size_t off = 0; off < bytes.size(); off += 16) {
    const unsigned char* rec = bytes.data() + off;
    Point p;
    p.x = detail::load_le_f32(rec);
    p.y = detail::load_le_f32(rec + 4);
    p.z = detail::load_le_f32(rec + 8);
    const double raw = detail::load_le_f32(rec + 12);
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw Error("non-finite coordinate in record " + std::to_string(off / 16));
    }
    p.intensity = std::isfinite(raw) ? std::clamp(raw / divisor, 0.0, 1.0) : 0.0;
    cloud.points.push_back(p);
  }
  return cloud;
}

inline PointCloud load_kitti_bin(const std::filesystem::path& path,
                                 IntensityScale scale = IntensityScale::kUnit) {
  auto bytes = detail::read_file_bytes(path);
  try {
    PointCloud cloud = decode_kitti_bin(bytes, scale);
    cloud.frame_id = path.stem().string();
    return cloud;
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

inline std::vector<unsigned char> encode_kitti_bin(const PointCloud& cloud) {
  std::vector<unsigned char> bytes(cloud.size() * 16);
  unsigned char* out = bytes.data();
  for (const Point& p : cloud.points) {
    detail::store_le_f32(static_cast<float>(p.x), out);
    detail::store_le_f32(static_cast<float>(p.y), out + 4);
    detail::store_le_f32(static_cast<float>(p.z), out + 8);
    detail::store_le_f32(static_cast<float>(p.intensity), out + 12);
    out += 16;
  }
  return bytes;
}

inline void save_kitti_bin(const std::filesystem::path& path, const PointCloud& cloud) {
  const auto bytes = encode_kitti_bin(cloud);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failure on " + path.string());
}

/// Rotates every point about the sensor z axis by theta (counter-clockwise).
inline PointCloud apply_yaw(const PointCloud& cloud, double theta) {
  // Reduce first so whole turns are exact identities.
  const double reduced = std::remainder(theta, kTwoPi);
  PointCloud out;
  out.frame_id = cloud.frame_id;
  if (reduced == 0.0) {
    out.points = cloud.points;
    return out;
  }
  const double c = std::cos(reduced);
  const double s = std::sin(reduced);
  out.points.reserve(cloud.size());
  for (const Point& p : cloud.points) {
    out.points.push_back({p.x * c - p.y * s, p.x * s + p.y * c, p.z, p.intensity});
  }
  return out;
}

}  // namespace mptf
