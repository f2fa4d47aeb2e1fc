#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mptf/cloud_io.hpp"
#include "mptf/fusion_net.hpp"
#include "mptf/grid.hpp"

namespace mptf {

struct MiningConfig {
  double pos_radius = 9.0;
  double neg_radius = 18.0;
  int n_neg = 6;
  double margin = 0.5;

  void validate() const {
    if (!(pos_radius > 0.0 && pos_radius < neg_radius)) throw Error("MiningConfig: need 0 < pos_radius < neg_radius");
    if (n_neg < 1) throw Error("MiningConfig: n_neg must be >= 1");
    if (!(margin > 0.0)) throw Error("MiningConfig: margin must be positive");
  }
};

/// Indices into the training frame list.
struct TripletBatch {
  std::size_t query = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
};

/// Positive: the in-radius frame whose descriptor is closest to the query's
/// (ties go to the lower index). Negatives: a seeded uniform sample of up to
/// n_neg frames at least neg_radius away, keeping only those closer than the
/// margin in descriptor space. nullopt ("skip") when either set ends empty.
inline std::optional<TripletBatch> mine_triplet(std::size_t query, std::span<const FrameMeta> frames,
                                                std::span<const Descriptor> descriptors, const MiningConfig& cfg,
                                                std::mt19937_64& rng) {
  cfg.validate();
  if (descriptors.size() != frames.size()) throw Error("mine_triplet: one descriptor per frame required");
  const FrameMeta& q = frames[query];
  const Descriptor& fq = descriptors[query];

  std::optional<std::size_t> best;
  double best_d = 0.0;
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < frames.size(); ++j) {
    if (j == query) continue;
    const double metric = planar_distance(q, frames[j]);
    if (metric <= cfg.pos_radius) {
      const double d = descriptor_distance(fq, descriptors[j]);
      if (!best || d < best_d) {
        best = j;
        best_d = d;
      }
    } else if (metric >= cfg.neg_radius) {
      pool.push_back(j);
    }
  }
  if (!best || pool.empty()) return std::nullopt;

  // Partial Fisher-Yates: the first `take` slots become the sample.
  const std::size_t take = std::min(pool.size(), static_cast<std::size_t>(cfg.n_neg));
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  TripletBatch batch{query, *best, {}};
  for (std::size_t i = 0; i < take; ++i) {
    if (descriptor_distance(fq, descriptors[pool[i]]) < cfg.margin) batch.negatives.push_back(pool[i]);
  }
  if (batch.negatives.empty()) return std::nullopt;
  return batch;
}

/// Mean hinge over negatives: (1/N) sum_i [d_pos - d_neg_i + m]_+.
inline double triplet_loss(double d_pos, std::span<const double> d_negs, double margin) {
  if (d_negs.empty()) throw Error("triplet_loss: no negatives");
  double total = 0.0;
  for (double dn : d_negs) total += std::max(0.0, d_pos - dn + margin);
  return total / static_cast<double>(d_negs.size());
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  long step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

/// One bias-corrected Adam update of every parameter.
inline void adam_step(NetworkWeights& weights, const NetworkWeights& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : weights.params) {
    auto git = grads.params.find(name);
    if (git == grads.params.end() || git->second.values.size() != p.values.size()) {
      throw Error("adam_step: gradient shape mismatch for " + name);
    }
    const auto& g = git->second.values;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(p.values.size(), 0.0);
      v.assign(p.values.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p.values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

/// Step decay: lr0 / factor^floor(epoch / every).
inline double lr_schedule(int epoch, double lr0, int every = 10, double factor = 10.0) {
  if (epoch < 0) throw Error("lr_schedule: negative epoch");
  return lr0 / std::pow(factor, std::floor(static_cast<double>(epoch) / every));
}

struct TrainConfig {
  int epochs = 30;
  double lr = 1e-5;
  int lr_decay_every = 10;
  double lr_decay_factor = 10.0;
  int batch_size = 8;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

/// One encoded training frame.
struct TrainingFrame {
  FrameMeta meta;
  Grid riv;
  Grid bev;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  std::size_t batches_used = 0;
  std::size_t batches_skipped = 0;
};

struct TrainResult {
  NetworkWeights weights;
  std::vector<EpochLog> log;
};

inline std::vector<Descriptor> describe_all(std::span<const TrainingFrame> frames, const NetworkWeights& w,
                                            const NetConfig& cfg, unsigned threads = 0) {
  std::vector<Descriptor> out(frames.size());
  parallel_for(frames.size(), [&](std::size_t i) { out[i] = describe(frames[i].riv, frames[i].bev, w, cfg); }, threads);
  return out;
}

struct TripletStep {
  double loss = 0.0;
  NetworkWeights grads;
};

/// Loss of one triplet under the current weights, with its gradient.
inline TripletStep triplet_step(const TripletBatch& batch, std::span<const TrainingFrame> frames,
                                const NetworkWeights& weights, const NetConfig& cfg, double margin) {
  ad::Tape tape;
  const BoundWeights w(tape, weights, true);
  auto embed = [&](std::size_t i) {
    return forward(grid_tensor(tape, frames[i].riv), grid_tensor(tape, frames[i].bev), w, cfg).descriptor;
  };
  const ad::Tensor fq = embed(batch.query);
  const ad::Tensor d_pos = ad::euclidean_distance(fq, embed(batch.positive));
  ad::Tensor total;
  for (std::size_t n : batch.negatives) {
    const ad::Tensor hinge = ad::relu(ad::add_scalar(ad::sub(d_pos, ad::euclidean_distance(fq, embed(n))), margin));
    total = total.defined() ? ad::add(total, hinge) : hinge;
  }
  const ad::Tensor loss = ad::scale(total, 1.0 / static_cast<double>(batch.negatives.size()));
  tape.backward(loss);
  return {loss.item(), w.gradients(weights)};
}

/// Triplet training. Each epoch refreshes every descriptor with the current
/// weights, visits the frames in a seeded random order as queries, mines a
/// triplet per query and takes one Adam step per `batch_size` usable
/// triplets (gradients averaged). Skipped queries are excluded from the
/// epoch mean. `on_epoch` sees the weights after each epoch.
inline TrainResult train(std::span<const TrainingFrame> frames, const NetConfig& net, const MiningConfig& mining,
                         const TrainConfig& tc,
                         const std::function<void(const EpochLog&, const NetworkWeights&)>& on_epoch = {}) {
  net.validate();
  mining.validate();
  if (tc.batch_size < 1 || tc.epochs < 0) throw Error("train: invalid batch size or epoch count");
  std::vector<FrameMeta> metas;
  for (const auto& f : frames) metas.push_back(f.meta);
  bool any_positive = false;
  for (std::size_t i = 0; i < metas.size() && !any_positive; ++i)
    for (std::size_t j = 0; j < metas.size() && !any_positive; ++j)
      any_positive = i != j && planar_distance(metas[i], metas[j]) <= mining.pos_radius;
  if (!any_positive) throw Error("train: no frame has another frame within " + std::to_string(mining.pos_radius) + " m");

  TrainResult result{init_weights(net), {}};
  AdamState adam;
  std::mt19937_64 rng(sub_seed(tc.seed, "mining"));
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, tc.lr, tc.lr_decay_every, tc.lr_decay_factor);
    const auto descriptors = describe_all(frames, result.weights, net, tc.threads);
    std::vector<std::size_t> order(frames.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<TripletBatch> batches;
    EpochLog log{epoch, 0.0, lr, 0, 0};
    for (std::size_t q : order) {
      auto b = mine_triplet(q, metas, descriptors, mining, rng);
      if (b)
        batches.push_back(std::move(*b));
      else
        ++log.batches_skipped;
    }
    if (epoch == 0 && batches.empty()) {
      throw Error("train: no valid triplet at epoch 0 (every query lacks a positive or a negative closer than margin " +
                  std::to_string(mining.margin) + ")");
    }

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < batches.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end = std::min(batches.size(), start + static_cast<std::size_t>(tc.batch_size));
      std::vector<TripletStep> steps(end - start);
      parallel_for(
          steps.size(),
          [&](std::size_t i) { steps[i] = triplet_step(batches[start + i], frames, result.weights, net, mining.margin); },
          tc.threads);
      NetworkWeights grad = steps.front().grads;
      for (std::size_t i = 1; i < steps.size(); ++i)
        for (auto& [name, p] : grad.params) {
          const auto& other = steps[i].grads.params.at(name).values;
          for (std::size_t j = 0; j < p.values.size(); ++j) p.values[j] += other[j];
        }
      const double inv = 1.0 / static_cast<double>(steps.size());
      for (auto& [_, p] : grad.params)
        for (double& v : p.values) v *= inv;
      for (const auto& s : steps) loss_sum += s.loss;
      adam_step(result.weights, grad, adam, lr);
    }
    log.batches_used = batches.size();
    log.mean_loss = batches.empty() ? 0.0 : loss_sum / static_cast<double>(batches.size());
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, result.weights);
  }
  return result;
}

}  // namespace mptf
