#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mptf/fusion_net.hpp"
#include "mptf/ops.hpp"

namespace mptf {

struct GradInput {
  ad::Shape shape;
  std::vector<double> values;
};

using GradBuilder = std::function<ad::Tensor(ad::Tape&, std::span<const ad::Tensor>)>;

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

/// Gradients below this magnitude are compared in absolute terms.
inline constexpr double kGradScaleFloor = 1e-3;

/// Central-difference step for primitives. Smaller steps let roundoff in
/// the projected sum dominate on the larger convolution cases.
inline constexpr double kPrimitiveStep = 3e-5;

inline double grad_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradScaleFloor});
}

/// Central finite differences on the scalar <r, f(inputs)>, with r a fixed
/// random projection so every output element contributes.
inline double max_grad_error(const GradBuilder& f, const std::vector<GradInput>& inputs, std::uint64_t seed,
                             double step = kPrimitiveStep, std::size_t* checked = nullptr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> r;
  auto evaluate = [&](const std::vector<GradInput>& in) {
    ad::Tape tape;
    std::vector<ad::Tensor> ts;
    for (const auto& g : in) ts.push_back(tape.constant(g.shape, g.values));
    const ad::Tensor y = f(tape, ts);
    auto yv = y.value();
    if (r.empty()) {
      r.resize(yv.size());
      for (double& v : r) v = normal(rng);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < yv.size(); ++i) s += r[i] * yv[i];
    return s;
  };
  evaluate(inputs);

  ad::Tape tape;
  std::vector<ad::Tensor> ts;
  for (const auto& g : inputs) ts.push_back(tape.parameter(g.shape, g.values));
  const ad::Tensor y = f(tape, ts);
  const ad::Tensor loss = ad::sum(ad::mul(y, tape.constant(y.shape(), r)));
  tape.backward(loss);

  double worst = 0.0;
  std::size_t n = 0;
  std::vector<GradInput> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto analytic = ts[i].grad();
    for (std::size_t j = 0; j < inputs[i].values.size(); ++j) {
      const double x0 = inputs[i].values[j];
      probe[i].values[j] = x0 + step;
      const double up = evaluate(probe);
      probe[i].values[j] = x0 - step;
      const double down = evaluate(probe);
      probe[i].values[j] = x0;
      const double a = analytic.empty() ? 0.0 : analytic[j];
      worst = std::max(worst, grad_rel_error(a, (up - down) / (2.0 * step)));
      ++n;
    }
  }
  if (checked) *checked += n;
  return worst;
}

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<GradInput>(std::mt19937_64&)> inputs;
  GradBuilder fn;
};

namespace detail {

inline GradInput random_input(std::mt19937_64& rng, ad::Shape s, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  GradInput g{s, std::vector<double>(s.size())};
  for (double& v : g.values) v = u(rng);
  return g;
}

/// Values bounded away from zero, for inputs that meet a kink at 0.
inline GradInput kink_safe_input(std::mt19937_64& rng, ad::Shape s) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  GradInput g{s, std::vector<double>(s.size())};
  for (double& v : g.values) v = sign(rng) ? u(rng) : -u(rng);
  return g;
}

}  // namespace detail

/// Every differentiable primitive of the engine on small random inputs.
inline std::vector<PrimitiveCase> primitive_cases() {
  using ad::Shape;
  using ad::Tensor;
  using detail::random_input;
  using Inputs = std::vector<GradInput>;
  using Ts = std::span<const Tensor>;
  const Shape map = Shape::chw(3, 4, 5);
  std::vector<PrimitiveCase> cases;
  auto add_case = [&](std::string name, std::function<Inputs(std::mt19937_64&)> in, GradBuilder fn) {
    cases.push_back({std::move(name), std::move(in), std::move(fn)});
  };
  add_case("add", [=](auto& g) { return Inputs{random_input(g, map), random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::add(t[0], t[1]); });
  add_case("sub", [=](auto& g) { return Inputs{random_input(g, map), random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::sub(t[0], t[1]); });
  add_case("mul", [=](auto& g) { return Inputs{random_input(g, map), random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::mul(t[0], t[1]); });
  add_case("add_scalar", [=](auto& g) { return Inputs{random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::add_scalar(t[0], 0.7); });
  add_case("scale", [=](auto& g) { return Inputs{random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::scale(t[0], -1.3); });
  add_case("relu", [=](auto& g) { return Inputs{detail::kink_safe_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::relu(t[0]); });
  add_case("sigmoid", [=](auto& g) { return Inputs{random_input(g, map, -4.0, 4.0)}; },
           [](ad::Tape&, Ts t) { return ad::sigmoid(t[0]); });
  add_case("sum", [=](auto& g) { return Inputs{random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::sum(t[0]); });
  add_case("reshape", [=](auto& g) { return Inputs{random_input(g, map)}; },
           [](ad::Tape&, Ts t) { return ad::reshape(t[0], Shape::matrix(12, 5)); });
  add_case("softmax_rows", [](auto& g) { return Inputs{random_input(g, Shape::matrix(4, 6), -3.0, 3.0)}; },
           [](ad::Tape&, Ts t) { return ad::softmax_rows(t[0]); });
  add_case("linear",
           [](auto& g) {
             return Inputs{random_input(g, Shape::flat(6)), random_input(g, Shape::matrix(5, 6)),
                           random_input(g, Shape::flat(5))};
           },
           [](ad::Tape&, Ts t) { return ad::linear(t[0], t[1], t[2]); });
  add_case("l2_normalize", [](auto& g) { return Inputs{random_input(g, Shape::flat(7))}; },
           [](ad::Tape&, Ts t) { return ad::l2_normalize(t[0]); });
  add_case("l2_normalize_rows", [](auto& g) { return Inputs{random_input(g, Shape::matrix(4, 6))}; },
           [](ad::Tape&, Ts t) { return ad::l2_normalize_rows(t[0]); });
  add_case("euclidean_distance",
           [](auto& g) { return Inputs{random_input(g, Shape::flat(6)), random_input(g, Shape::flat(6))}; },
           [](ad::Tape&, Ts t) { return ad::euclidean_distance(t[0], t[1]); });
  add_case("conv2d_circular",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(3, 6, 8)), random_input(g, Shape::kernel(4, 3, 3, 3)),
                           random_input(g, Shape::flat(4))};
           },
           [](ad::Tape&, Ts t) { return ad::conv2d_circular(t[0], t[1], t[2], 1, 1); });
  add_case("conv2d_circular_strided",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(3, 5, 8)), random_input(g, Shape::kernel(4, 3, 3, 3))};
           },
           [](ad::Tape&, Ts t) { return ad::conv2d_circular(t[0], t[1], 2, 2); });
  add_case("instance_norm_affine",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(4, 6, 8)), random_input(g, Shape::flat(4), 0.5, 1.5),
                           random_input(g, Shape::flat(4))};
           },
           [](ad::Tape&, Ts t) { return ad::instance_norm_affine(t[0], t[1], t[2]); });
  add_case("azimuth_attention",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(4, 3, 8)), random_input(g, Shape::chw(4, 5, 8)),
                           random_input(g, Shape::chw(4, 5, 8))};
           },
           [](ad::Tape&, Ts t) { return ad::azimuth_attention(t[0], t[1], t[2], 1); });
  add_case("azimuth_attention_2head",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(4, 3, 6)), random_input(g, Shape::chw(4, 4, 6)),
                           random_input(g, Shape::chw(4, 4, 6))};
           },
           [](ad::Tape&, Ts t) { return ad::azimuth_attention(t[0], t[1], t[2], 2); });
  add_case("mean_pool_height", [](auto& g) { return Inputs{random_input(g, Shape::chw(4, 6, 8))}; },
           [](ad::Tape&, Ts t) { return ad::mean_pool_height(t[0]); });
  add_case("concat_width",
           [](auto& g) { return Inputs{random_input(g, Shape::chw(3, 1, 5)), random_input(g, Shape::chw(3, 1, 4))}; },
           [](ad::Tape&, Ts t) { return ad::concat_width(t); });
  add_case("netvlad_aggregate",
           [](auto& g) {
             return Inputs{random_input(g, Shape::chw(4, 1, 10)), random_input(g, Shape::matrix(3, 4)),
                           random_input(g, Shape::flat(3)), random_input(g, Shape::matrix(3, 4))};
           },
           [](ad::Tape&, Ts t) { return ad::netvlad_aggregate(t[0], t[1], t[2], t[3]); });
  return cases;
}

/// Runs one primitive over `seeds` random instances.
inline GradCheckReport check_primitive(const PrimitiveCase& c, int seeds = 20, std::uint64_t base_seed = 0,
                                       double tolerance = 1e-6) {
  GradCheckReport rep{c.name, 0.0, 0, tolerance};
  for (int s = 0; s < seeds; ++s) {
    std::mt19937_64 rng(sub_seed(base_seed + static_cast<std::uint64_t>(s), "gradcheck:" + c.name));
    const auto inputs = c.inputs(rng);
    rep.max_rel_error = std::max(rep.max_rel_error, max_grad_error(c.fn, inputs, rng(), kPrimitiveStep, &rep.checked));
  }
  return rep;
}

/// Smallest network the end-to-end check runs on.
inline NetConfig tiny_net_config(std::uint64_t seed = 0) {
  NetConfig cfg;
  cfg.levels = 2;
  cfg.channels = {4, 8};
  cfg.vertical_strides = {2, 2};
  cfg.azimuth_strides = {1, 1};
  cfg.clusters = 4;
  cfg.descriptor_dim = 16;
  cfg.seed = seed;
  return cfg;
}

/// d(forward(riv, bev), target) differentiated with respect to `samples`
/// randomly chosen weights, against central differences.
inline GradCheckReport end_to_end_gradcheck(std::uint64_t seed, int samples = 24, double tolerance = 1e-5,
                                            int height = 8, int width = 32) {
  const NetConfig cfg = tiny_net_config(seed);
  const NetworkWeights weights = init_weights(cfg);
  std::mt19937_64 rng(sub_seed(seed, "gradcheck:end_to_end"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto random_grid = [&](int c) {
    Grid g(c, height, width, std::vector<std::string>(static_cast<std::size_t>(c), "x"));
    for (float& v : g.values) v = static_cast<float>(unit(rng));
    std::fill(g.mask.begin(), g.mask.end(), 1);
    return g;
  };
  const Grid riv = random_grid(cfg.riv_channels);
  const Grid bev = random_grid(cfg.bev_channels);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> target(static_cast<std::size_t>(cfg.descriptor_dim));
  double norm = 0.0;
  for (double& v : target) {
    v = normal(rng);
    norm += v * v;
  }
  for (double& v : target) v /= std::sqrt(norm);

  auto loss_of = [&](ad::Tape& tape, const BoundWeights& bw) {
    const ForwardTrace tr = forward(grid_tensor(tape, riv), grid_tensor(tape, bev), bw, cfg);
    return ad::euclidean_distance(tr.descriptor, tape.constant(ad::Shape::flat(cfg.descriptor_dim), target));
  };
  ad::Tape tape;
  const BoundWeights bw(tape, weights, true);
  tape.backward(loss_of(tape, bw));
  const NetworkWeights grads = bw.gradients(weights);

  std::vector<std::string> names;
  for (const auto& [name, _] : weights.params) names.push_back(name);
  GradCheckReport rep{"end_to_end", 0.0, 0, tolerance};
  const double step = 1e-5;
  for (int s = 0; s < samples; ++s) {
    const std::string& name = names[std::uniform_int_distribution<std::size_t>(0, names.size() - 1)(rng)];
    const std::size_t idx =
        std::uniform_int_distribution<std::size_t>(0, weights.at(name).values.size() - 1)(rng);
    NetworkWeights probe = weights;
    auto eval = [&](double delta) {
      probe.params.at(name).values[idx] = weights.at(name).values[idx] + delta;
      ad::Tape t;
      return loss_of(t, BoundWeights(t, probe, false)).item();
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    rep.max_rel_error = std::max(rep.max_rel_error, grad_rel_error(grads.at(name).values[idx], numeric));
    ++rep.checked;
  }
  return rep;
}

}  // namespace mptf
