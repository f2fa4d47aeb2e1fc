#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mptf/common.hpp"
#include "mptf/grid.hpp"
#include "mptf/tape.hpp"

namespace mptf {

/// Architecture of the fusion network. Per-level vectors have `levels`
/// entries.
struct NetConfig {
  int levels = 4;
  std::vector<int> channels{16, 32, 64, 128};
  std::vector<int> vertical_strides{2, 2, 2, 2};
  std::vector<int> azimuth_strides{1, 1, 1, 1};
  int heads = 1;
  int clusters = 8;
  int descriptor_dim = 256;
  int kernel_size = 3;
  int ffn_expansion = 2;
  int riv_channels = 2;
  int bev_channels = 4;
  std::uint64_t seed = 0;

  /// Azimuth stride 2 at levels 2..4, so invariance holds for shifts that
  /// are multiples of 8 bins.
  static NetConfig speed_profile() {
    NetConfig cfg;
    cfg.azimuth_strides = {1, 2, 2, 2};
    return cfg;
  }

  int shared_dim() const { return descriptor_dim / clusters; }

  int azimuth_stride_total() const {
    int s = 1;
    for (int v : azimuth_strides) s *= v;
    return s;
  }

  void validate() const {
    if (levels < 1) throw Error("NetConfig: levels must be >= 1");
    const auto l = static_cast<std::size_t>(levels);
    if (channels.size() != l || vertical_strides.size() != l || azimuth_strides.size() != l) {
      throw Error("NetConfig: per-level vectors must have `levels` entries");
    }
    for (std::size_t i = 0; i < l; ++i) {
      if (channels[i] < 1 || vertical_strides[i] < 1 || azimuth_strides[i] < 1) {
        throw Error("NetConfig: channels and strides must be positive");
      }
      if (channels[i] % heads != 0) throw Error("NetConfig: channels must be divisible by heads");
    }
    if (heads < 1 || clusters < 1 || descriptor_dim < 1) throw Error("NetConfig: invalid head/cluster/dim counts");
    if (descriptor_dim % clusters != 0) throw Error("NetConfig: descriptor_dim must equal clusters x shared dim");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw Error("NetConfig: kernel_size must be odd");
    if (ffn_expansion < 1 || riv_channels < 1 || bev_channels < 1) throw Error("NetConfig: invalid channel counts");
  }

  /// Checks the input width against the azimuth strides.
  void validate_width(int width) const {
    if (width % azimuth_stride_total() != 0) {
      throw Error("NetConfig: width " + std::to_string(width) + " not divisible by total azimuth stride " +
                  std::to_string(azimuth_stride_total()));
    }
  }

  /// Fingerprint of everything that determines parameter shapes and the
  /// forward computation (the seed is excluded).
  std::uint64_t hash() const {
    Fnv1a h;
    h.update("netconfig-v1");
    h.update_pod(levels);
    for (int v : channels) h.update_pod(v);
    for (int v : vertical_strides) h.update_pod(v);
    for (int v : azimuth_strides) h.update_pod(v);
    h.update_pod(heads);
    h.update_pod(clusters);
    h.update_pod(descriptor_dim);
    h.update_pod(kernel_size);
    h.update_pod(ffn_expansion);
    h.update_pod(riv_channels);
    h.update_pod(bev_channels);
    return h.digest();
  }
};

struct Param {
  ad::Shape shape;
  std::vector<double> values;
  friend bool operator==(const Param&, const Param&) = default;
};

/// Learnable parameters keyed by name; iteration order is the name order.
struct NetworkWeights {
  std::map<std::string, Param> params;

  const Param& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error("missing parameter " + name);
    return it->second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params) n += p.values.size();
    return n;
  }
  friend bool operator==(const NetworkWeights&, const NetworkWeights&) = default;
};

namespace detail {

inline std::vector<double> uniform_values(std::mt19937_64& rng, std::size_t n, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

}  // namespace detail

/// Seeded initialization. Kernels and projections are uniform in
/// +-1/sqrt(fan_in); norm scales 1; biases 0; NetVLAD centers N(0, 0.1^2).
inline NetworkWeights init_weights(const NetConfig& cfg) {
  cfg.validate();
  NetworkWeights w;
  std::mt19937_64 rng(sub_seed(cfg.seed, "init"));
  auto add_kernel = [&](const std::string& name, int out, int in, int k) {
    const ad::Shape s = ad::Shape::kernel(out, in, k, k);
    w.params[name] = {s, detail::uniform_values(rng, s.size(), 1.0 / std::sqrt(static_cast<double>(in * k * k)))};
  };
  auto add_const = [&](const std::string& name, int n, double value) {
    w.params[name] = {ad::Shape::flat(n), std::vector<double>(static_cast<std::size_t>(n), value)};
  };
  auto add_conv1x1 = [&](const std::string& prefix, int out, int in) {
    add_kernel(prefix + ".weight", out, in, 1);
    add_const(prefix + ".bias", out, 0.0);
  };

  for (const char* branch : {"riv", "bev"}) {
    int in = std::string(branch) == "riv" ? cfg.riv_channels : cfg.bev_channels;
    for (int i = 0; i < cfg.levels; ++i) {
      const std::string p = std::string(branch) + ".l" + std::to_string(i);
      const int out = cfg.channels[static_cast<std::size_t>(i)];
      add_kernel(p + ".conv.weight", out, in, cfg.kernel_size);
      add_const(p + ".norm.gamma", out, 1.0);
      add_const(p + ".norm.beta", out, 0.0);
      in = out;
    }
  }
  const int s = cfg.shared_dim();
  for (int i = 0; i < cfg.levels; ++i) {
    const int c = cfg.channels[static_cast<std::size_t>(i)];
    for (const char* dir : {"r", "b"}) {
      const std::string p = "fuse.l" + std::to_string(i) + "." + dir;
      add_conv1x1(p + ".q", c, c);
      add_conv1x1(p + ".k", c, c);
      add_conv1x1(p + ".v", c, c);
      add_conv1x1(p + ".ffn1", c * cfg.ffn_expansion, c);
      add_conv1x1(p + ".ffn2", c, c * cfg.ffn_expansion);
      add_conv1x1("pool.l" + std::to_string(i) + "." + dir, s, c);
    }
  }
  const int k = cfg.clusters;
  w.params["vlad.assign.weight"] = {ad::Shape::matrix(k, s),
                                    detail::uniform_values(rng, static_cast<std::size_t>(k) * s, 1.0 / std::sqrt(double(s)))};
  add_const("vlad.assign.bias", k, 0.0);
  {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> centers(static_cast<std::size_t>(k) * s);
    for (double& v : centers) v = 0.1 * normal(rng);
    w.params["vlad.centers"] = {ad::Shape::matrix(k, s), std::move(centers)};
  }
  const int d = cfg.descriptor_dim;
  w.params["gate.weight"] = {ad::Shape::matrix(d, d),
                             detail::uniform_values(rng, static_cast<std::size_t>(d) * d, 1.0 / std::sqrt(double(d)))};
  add_const("gate.bias", d, 0.0);
  return w;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "MPTFCKP1"        8 bytes
//   version           u32 (= 1)
//   config hash       u64 (NetConfig::hash)
//   parameter count   u32
//   per parameter:    u16 name length, name bytes, shape as u32 x 4,
//                     values as little-endian float64
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'M', 'P', 'T', 'F', 'C', 'K', 'P', '1'};

inline std::vector<unsigned char> encode_checkpoint(const NetworkWeights& w, std::uint64_t config_hash) {
  std::vector<unsigned char> b(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(b, 1);
  detail::put_u64(b, config_hash);
  detail::put_u32(b, static_cast<std::uint32_t>(w.params.size()));
  for (const auto& [name, p] : w.params) {
    detail::put_u16(b, static_cast<std::uint16_t>(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    for (int dim : {p.shape.n, p.shape.c, p.shape.h, p.shape.w}) detail::put_u32(b, static_cast<std::uint32_t>(dim));
    for (double v : p.values) detail::put_u64(b, std::bit_cast<std::uint64_t>(v));
  }
  return b;
}

inline NetworkWeights decode_checkpoint(const std::vector<unsigned char>& bytes, std::uint64_t expected_hash,
                                        const std::string& what = "checkpoint") {
  detail::ByteReader r(bytes, what);
  if (r.str(8) != std::string(kCheckpointMagic, 8)) throw Error(what + ": bad magic");
  if (r.uint(4) != 1) throw Error(what + ": unsupported version");
  const std::uint64_t hash = r.uint(8);
  if (hash != expected_hash) {
    throw Error(what + ": config hash " + hex64(hash) + " does not match expected " + hex64(expected_hash));
  }
  NetworkWeights w;
  const auto count = r.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str(static_cast<std::size_t>(r.uint(2)));
    Param p;
    p.shape.n = static_cast<int>(r.uint(4));
    p.shape.c = static_cast<int>(r.uint(4));
    p.shape.h = static_cast<int>(r.uint(4));
    p.shape.w = static_cast<int>(r.uint(4));
    p.values.resize(p.shape.size());
    for (double& v : p.values) v = std::bit_cast<double>(r.uint(8));
    w.params.emplace(std::move(name), std::move(p));
  }
  if (!r.done()) throw Error(what + ": trailing bytes");
  return w;
}

inline void save_checkpoint(const std::filesystem::path& path, const NetworkWeights& w, const NetConfig& cfg) {
  write_bytes(path, encode_checkpoint(w, cfg.hash()));
}

inline NetworkWeights load_checkpoint(const std::filesystem::path& path, const NetConfig& cfg) {
  NetworkWeights w = decode_checkpoint(detail::read_file_bytes(path), cfg.hash(), path.string());
  const NetworkWeights expected = init_weights(cfg);
  for (const auto& [name, p] : expected.params) {
    auto it = w.params.find(name);
    if (it == w.params.end() || !(it->second.shape == p.shape)) {
      throw Error(path.string() + ": parameter " + name + " missing or misshapen");
    }
  }
  return w;
}

}  // namespace mptf
