#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mptf/grid.hpp"
#include "mptf/ops.hpp"
#include "mptf/weights.hpp"

namespace mptf {

/// Unit-norm global descriptor.
struct Descriptor {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

/// Euclidean distance; lies in [0, 2] for unit descriptors.
inline double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  if (a.size() != b.size()) throw Error("descriptor_distance: dimension mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return std::sqrt(ss);
}

/// Network parameters bound as tensors on one tape.
class BoundWeights {
 public:
  BoundWeights(ad::Tape& tape, const NetworkWeights& w, bool requires_grad) {
    for (const auto& [name, p] : w.params) {
      tensors_.emplace(name, requires_grad ? tape.parameter(p.shape, p.values) : tape.constant(p.shape, p.values));
    }
  }
  ad::Tensor operator[](const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("missing parameter " + name);
    return it->second;
  }
  /// Copies accumulated gradients into a weights-shaped container.
  NetworkWeights gradients(const NetworkWeights& like) const {
    NetworkWeights g;
    for (const auto& [name, p] : like.params) {
      auto grad = (*this)[name].grad();
      Param q{p.shape, std::vector<double>(p.values.size(), 0.0)};
      if (!grad.empty()) std::copy(grad.begin(), grad.end(), q.values.begin());
      g.params.emplace(name, std::move(q));
    }
    return g;
  }

 private:
  std::unordered_map<std::string, ad::Tensor> tensors_;
};

/// Intermediate tensors of one forward pass.
struct ForwardTrace {
  std::vector<ad::Tensor> riv_levels;   ///< backbone outputs
  std::vector<ad::Tensor> bev_levels;
  std::vector<ad::Tensor> riv_fused;    ///< after cross-view refinement
  std::vector<ad::Tensor> bev_fused;
  ad::Tensor columns;                   ///< pooled columns of all levels and views
  ad::Tensor pre_gate;                  ///< intra-normalized, flattened NetVLAD
  ad::Tensor gated;
  ad::Tensor descriptor;
};

inline ad::Tensor grid_tensor(ad::Tape& tape, const Grid& g) {
  return tape.constant(ad::Shape::chw(g.channels, g.height, g.width),
                       std::vector<double>(g.values.begin(), g.values.end()));
}

namespace detail {

inline ad::Tensor conv1x1(ad::Tensor x, const BoundWeights& w, const std::string& prefix) {
  return ad::conv2d_circular(x, w[prefix + ".weight"], w[prefix + ".bias"], 1, 1);
}

/// Queries from `self`, keys and values from `other`, then the residual FFN.
inline ad::Tensor cross_view_refine(ad::Tensor self, ad::Tensor other, const BoundWeights& w,
                                    const std::string& prefix, int heads) {
  const ad::Tensor q = conv1x1(self, w, prefix + ".q");
  const ad::Tensor k = conv1x1(other, w, prefix + ".k");
  const ad::Tensor v = conv1x1(other, w, prefix + ".v");
  const ad::Tensor attended = ad::azimuth_attention(q, k, v, heads);
  const ad::Tensor hidden = ad::relu(conv1x1(attended, w, prefix + ".ffn1"));
  return ad::add(self, conv1x1(hidden, w, prefix + ".ffn2"));
}

}  // namespace detail

/// Full forward pass on already-bound inputs:
///   backbones (conv -> instance norm -> relu per level),
///   per-level azimuth-aligned cross attention in both directions with
///   residual FFN refinement, vertical mean pooling plus per-column
///   projection to the shared dimension, one NetVLAD over the union of all
///   columns, intra-normalization, context gating and a final L2 norm.
inline ForwardTrace forward(ad::Tensor riv, ad::Tensor bev, const BoundWeights& w, const NetConfig& cfg) {
  cfg.validate();
  const ad::Shape rs = riv.shape(), bs = bev.shape();
  if (rs.w != bs.w) {
    throw Error("forward: range image width " + std::to_string(rs.w) + " differs from BEV width " + std::to_string(bs.w));
  }
  if (rs.c != cfg.riv_channels || bs.c != cfg.bev_channels) throw Error("forward: input channel count mismatch");
  cfg.validate_width(rs.w);

  ForwardTrace tr;
  ad::Tensor r = riv, b = bev;
  for (int i = 0; i < cfg.levels; ++i) {
    const std::string li = ".l" + std::to_string(i);
    const int sh = cfg.vertical_strides[static_cast<std::size_t>(i)];
    const int sw = cfg.azimuth_strides[static_cast<std::size_t>(i)];
    r = ad::relu(ad::instance_norm_affine(ad::conv2d_circular(r, w["riv" + li + ".conv.weight"], sh, sw),
                                          w["riv" + li + ".norm.gamma"], w["riv" + li + ".norm.beta"]));
    b = ad::relu(ad::instance_norm_affine(ad::conv2d_circular(b, w["bev" + li + ".conv.weight"], sh, sw),
                                          w["bev" + li + ".norm.gamma"], w["bev" + li + ".norm.beta"]));
    tr.riv_levels.push_back(r);
    tr.bev_levels.push_back(b);
  }

  std::vector<ad::Tensor> pooled;
  for (int i = 0; i < cfg.levels; ++i) {
    const std::string li = "l" + std::to_string(i);
    const ad::Tensor fr = tr.riv_levels[static_cast<std::size_t>(i)];
    const ad::Tensor fb = tr.bev_levels[static_cast<std::size_t>(i)];
    const ad::Tensor fused_r = detail::cross_view_refine(fr, fb, w, "fuse." + li + ".r", cfg.heads);
    const ad::Tensor fused_b = detail::cross_view_refine(fb, fr, w, "fuse." + li + ".b", cfg.heads);
    tr.riv_fused.push_back(fused_r);
    tr.bev_fused.push_back(fused_b);
    pooled.push_back(detail::conv1x1(ad::mean_pool_height(fused_r), w, "pool." + li + ".r"));
    pooled.push_back(detail::conv1x1(ad::mean_pool_height(fused_b), w, "pool." + li + ".b"));
  }

  tr.columns = ad::concat_width(pooled);
  const ad::Tensor vlad =
      ad::netvlad_aggregate(tr.columns, w["vlad.assign.weight"], w["vlad.assign.bias"], w["vlad.centers"]);
  tr.pre_gate = ad::flatten(ad::l2_normalize_rows(vlad));
  const ad::Tensor gate = ad::sigmoid(ad::linear(tr.pre_gate, w["gate.weight"], w["gate.bias"]));
  tr.gated = ad::mul(tr.pre_gate, gate);
  tr.descriptor = ad::l2_normalize(tr.gated);
  return tr;
}

/// Inference: one descriptor from a range image and a BEV map.
inline Descriptor describe(const Grid& riv, const Grid& bev, const NetworkWeights& weights, const NetConfig& cfg) {
  ad::Tape tape;
  const BoundWeights w(tape, weights, false);
  const ForwardTrace tr = forward(grid_tensor(tape, riv), grid_tensor(tape, bev), w, cfg);
  auto v = tr.descriptor.value();
  return Descriptor{{v.begin(), v.end()}};
}

inline Descriptor describe(const RivImage& riv, const BevMap& bev, const NetworkWeights& weights,
                           const NetConfig& cfg) {
  return describe(riv.grid, bev.grid, weights, cfg);
}

}  // namespace mptf
