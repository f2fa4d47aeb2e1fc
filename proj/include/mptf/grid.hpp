#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/common.hpp"

namespace mptf {

/// Azimuth column shared by every encoder: phi = 0 (sensor forward) lands at
/// column W/2 and counter-clockwise azimuth decreases the column index.
inline int azimuth_column(double x, double y, int width) {
  const double phi = std::atan2(y, x);
  const double u = std::floor(static_cast<double>(width) * (0.5 - phi / kTwoPi));
  long col = static_cast<long>(u) % width;
  if (col < 0) col += width;
  return static_cast<int>(col);
}

/// Dense channels x height x width grid of encoded features with a per-pixel
/// validity mask. Values are stored at float32, the precision of the on-disk
/// format.
struct Grid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<std::string> channel_names;
  std::vector<float> values;          // [c][h][w]
  std::vector<std::uint8_t> mask;     // [h][w]

  Grid() = default;
  Grid(int c, int h, int w, std::vector<std::string> names)
      : channels(c), height(h), width(w), channel_names(std::move(names)),
        values(static_cast<std::size_t>(c) * h * w, 0.0f),
        mask(static_cast<std::size_t>(h) * w, 0) {
    if (c < 1 || h < 1 || w < 1) throw Error("Grid: dimensions must be positive");
    if (static_cast<int>(channel_names.size()) != c) throw Error("Grid: channel name count mismatch");
  }

  std::size_t index(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * height + h) * width + w;
  }
  float& at(int c, int h, int w) { return values[index(c, h, w)]; }
  float at(int c, int h, int w) const { return values[index(c, h, w)]; }
  bool valid(int h, int w) const { return mask[static_cast<std::size_t>(h) * width + w] != 0; }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
  }

  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Cyclic column shift: output column u holds input column (u - k) mod W.
inline Grid shift_azimuth(const Grid& in, long k) {
  Grid out = in;
  const long w = in.width;
  const long s = ((k % w) + w) % w;
  if (s == 0) return out;
  for (int c = 0; c < in.channels; ++c) {
    for (int h = 0; h < in.height; ++h) {
      for (long u = 0; u < w; ++u) {
        out.at(c, h, static_cast<int>(u)) = in.at(c, h, static_cast<int>((u - s + w) % w));
      }
    }
  }
  for (int h = 0; h < in.height; ++h) {
    for (long u = 0; u < w; ++u) {
      out.mask[static_cast<std::size_t>(h) * w + u] =
          in.mask[static_cast<std::size_t>(h) * w + (u - s + w) % w];
    }
  }
  return out;
}

/// Range-image view: channel 0 normalized range, channel 1 intensity.
struct RivImage {
  Grid grid;
  friend bool operator==(const RivImage&, const RivImage&) = default;
};

/// Polar bird's-eye view: [PDS_p, EN_p, PDS_it, EN_it] (or a baseline layout).
struct BevMap {
  Grid grid;
  friend bool operator==(const BevMap&, const BevMap&) = default;
};

inline RivImage shift_azimuth(const RivImage& img, long k) { return {shift_azimuth(img.grid, k)}; }
inline BevMap shift_azimuth(const BevMap& map, long k) { return {shift_azimuth(map.grid, k)}; }

// ---------------------------------------------------------------------------
// Dense tensor file
//
//   "MPTFGRD1"                  8 bytes
//   version                     u32 (= 1)
//   channels, height, width     u32 x 3
//   config hash                 u64
//   channel names               per channel: u16 length + UTF-8 bytes
//   mask                        height*width bytes (0/1)
//   values                      channels*height*width float32, [c][h][w]
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr char kGridMagic[8] = {'M', 'P', 'T', 'F', 'G', 'R', 'D', '1'};

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xFF));
  b.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<unsigned char>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& b, std::string what) : b_(b), what_(std::move(what)) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error(what_ + ": truncated file");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  const unsigned char* take(std::size_t n) {
    need(n);
    const unsigned char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<unsigned char>& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_grid(const Grid& g, std::uint64_t config_hash) {
  std::vector<unsigned char> b(kGridMagic, kGridMagic + 8);
  detail::put_u32(b, 1);
  detail::put_u32(b, static_cast<std::uint32_t>(g.channels));
  detail::put_u32(b, static_cast<std::uint32_t>(g.height));
  detail::put_u32(b, static_cast<std::uint32_t>(g.width));
  detail::put_u64(b, config_hash);
  for (const auto& name : g.channel_names) {
    detail::put_u16(b, static_cast<std::uint16_t>(name.size()));
    b.insert(b.end(), name.begin(), name.end());
  }
  b.insert(b.end(), g.mask.begin(), g.mask.end());
  const std::size_t off = b.size();
  b.resize(off + g.values.size() * 4);
  for (std::size_t i = 0; i < g.values.size(); ++i) detail::store_le_f32(g.values[i], b.data() + off + 4 * i);
  return b;
}

struct GridFile {
  Grid grid;
  std::uint64_t config_hash = 0;
};

inline GridFile decode_grid(const std::vector<unsigned char>& bytes, const std::string& what = "grid") {
  detail::ByteReader r(bytes, what);
  if (r.str(8) != std::string(kGridMagic, 8)) throw Error(what + ": bad magic");
  if (r.uint(4) != 1) throw Error(what + ": unsupported version");
  const auto c = static_cast<int>(r.uint(4));
  const auto h = static_cast<int>(r.uint(4));
  const auto w = static_cast<int>(r.uint(4));
  GridFile f;
  f.config_hash = r.uint(8);
  std::vector<std::string> names;
  for (int i = 0; i < c; ++i) names.push_back(r.str(static_cast<std::size_t>(r.uint(2))));
  f.grid = Grid(c, h, w, std::move(names));
  const unsigned char* m = r.take(f.grid.mask.size());
  std::memcpy(f.grid.mask.data(), m, f.grid.mask.size());
  const unsigned char* v = r.take(f.grid.values.size() * 4);
  for (std::size_t i = 0; i < f.grid.values.size(); ++i) f.grid.values[i] = detail::load_le_f32(v + 4 * i);
  if (!r.done()) throw Error(what + ": trailing bytes");
  return f;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failure on " + path.string());
}

inline void save_grid(const std::filesystem::path& path, const Grid& g, std::uint64_t config_hash) {
  write_bytes(path, encode_grid(g, config_hash));
}

inline GridFile load_grid(const std::filesystem::path& path) {
  return decode_grid(detail::read_file_bytes(path), path.string());
}

}  // namespace mptf
