#pragma once

// Seeded synthetic retrieval benchmark shared by the trainer tests and the
// acceptance binary: 200 training frames, 100 database frames and 50
// revisit queries rendered from one static synthetic city.

#include <vector>

#include "mptf/dataset.hpp"
#include "mptf/ndt_bev_encoder.hpp"
#include "mptf/place_index.hpp"
#include "mptf/riv_encoder.hpp"
#include "mptf/trainer.hpp"

namespace toy {

struct Setup {
  mptf::ScanPattern pattern;
  mptf::RivConfig riv;
  mptf::BevConfig bev;
  mptf::NetConfig net;
  mptf::MiningConfig mining;
  mptf::TrainConfig train;
};

inline Setup setup(std::uint64_t seed, mptf::BevKind kind = mptf::BevKind::kNdt) {
  Setup s;
  s.pattern.beams = 16;
  s.pattern.azimuth_steps = 512;
  s.pattern.max_range = 50.0;
  s.riv.height = 16;
  s.riv.width = 64;
  s.riv.max_range = 50.0;
  s.bev.height = 16;
  s.bev.width = 64;
  s.bev.r_max = 50.0;
  s.bev.kind = kind;
  s.net.levels = 2;
  s.net.channels = {8, 16};
  s.net.vertical_strides = {2, 2};
  s.net.azimuth_strides = {1, 1};
  s.net.clusters = 8;
  s.net.descriptor_dim = 64;
  s.net.bev_channels = s.bev.channels();
  s.net.seed = seed;
  s.mining.n_neg = 48;
  s.train.epochs = 30;
  s.train.lr = 1e-3;
  s.train.batch_size = 4;
  s.train.seed = seed;
  return s;
}

struct Data {
  std::vector<mptf::TrainingFrame> train, database, queries;
};

inline Data build(const Setup& s, std::uint64_t seed) {
  mptf::SynthOptions o;
  o.seed = seed;
  o.n_frames = 150;
  o.revisit_fraction = 1.0 / 3.0;
  o.train_frames = 200;
  o.revisit.dynamic_objects = 0;
  const auto ds = mptf::synth_dataset(o);
  Data d;
  for (const auto& f : ds.frames) {
    const auto cloud = mptf::render_frame(ds, f, s.pattern, seed);
    mptf::TrainingFrame tf{f.meta, mptf::project_riv(cloud, s.riv).grid, mptf::build_bev(cloud, s.bev).grid};
    auto& dst = f.split == mptf::Split::kTrain ? d.train : f.split == mptf::Split::kDatabase ? d.database : d.queries;
    dst.push_back(std::move(tf));
  }
  return d;
}

inline mptf::EvalReport evaluate(const Data& d, const mptf::NetworkWeights& w, const mptf::NetConfig& net) {
  const auto db_desc = mptf::describe_all(d.database, w, net);
  const auto q_desc = mptf::describe_all(d.queries, w, net);
  std::vector<mptf::IndexEntry> entries;
  for (std::size_t i = 0; i < d.database.size(); ++i) {
    const auto& m = d.database[i].meta;
    entries.push_back({m.frame_id, db_desc[i], m.east, m.north});
  }
  std::vector<mptf::EvalQuery> queries;
  for (std::size_t i = 0; i < d.queries.size(); ++i) {
    const auto& m = d.queries[i].meta;
    queries.push_back({m.frame_id, q_desc[i], m.east, m.north});
  }
  return mptf::evaluate(mptf::DescriptorIndex(std::move(entries)), queries);
}

}  // namespace toy
