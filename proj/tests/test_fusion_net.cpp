#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mptf/fusion_net.hpp"

namespace {

using namespace mptf;

Grid random_grid(std::mt19937_64& rng, int c, int h, int w, double valid_fraction = 0.8) {
  Grid g(c, h, w, std::vector<std::string>(static_cast<std::size_t>(c), "x"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (u(rng) >= valid_fraction) continue;
      g.mask[static_cast<std::size_t>(y * w + x)] = 1;
      for (int ch = 0; ch < c; ++ch) g.at(ch, y, x) = static_cast<float>(u(rng));
    }
  return g;
}

double max_abs_diff(const Descriptor& a, const Descriptor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

double norm(const Descriptor& d) {
  double s = 0.0;
  for (double v : d.values) s += v * v;
  return std::sqrt(s);
}

TEST(InitWeights, Deterministic) {
  NetConfig cfg;
  cfg.seed = 5;
  EXPECT_EQ(init_weights(cfg), init_weights(cfg));
}

TEST(InitWeights, SeedsDiffer) {
  NetConfig a, b;
  a.seed = 1;
  b.seed = 2;
  EXPECT_FALSE(init_weights(a) == init_weights(b));
}

TEST(InitWeights, FiniteAndBounded) {
  const NetworkWeights w = init_weights(NetConfig{});
  EXPECT_GT(w.count(), 0u);
  for (const auto& [name, p] : w.params) {
    ASSERT_EQ(p.values.size(), p.shape.size()) << name;
    for (double v : p.values) {
      ASSERT_TRUE(std::isfinite(v)) << name;
      ASSERT_LE(std::abs(v), 10.0) << name;
    }
  }
}

TEST(InitWeights, ShapesFollowConfig) {
  NetConfig cfg;
  const NetworkWeights w = init_weights(cfg);
  EXPECT_EQ(w.at("gate.weight").shape, ad::Shape::matrix(cfg.descriptor_dim, cfg.descriptor_dim));
  EXPECT_EQ(w.at("gate.bias").shape, ad::Shape::flat(cfg.descriptor_dim));
  EXPECT_THROW(w.at("no.such.param"), Error);
}

TEST(NetConfigTest, Validation) {
  NetConfig cfg;
  cfg.channels = {16, 32};
  EXPECT_THROW(cfg.validate(), Error);
  cfg = NetConfig{};
  cfg.descriptor_dim = 250;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = NetConfig{};
  cfg.kernel_size = 4;
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_THROW(NetConfig::speed_profile().validate_width(1052), Error);
  EXPECT_NO_THROW(NetConfig::speed_profile().validate_width(1056));
}

TEST(NetConfigTest, HashIgnoresSeed) {
  NetConfig a, b;
  b.seed = 99;
  EXPECT_EQ(a.hash(), b.hash());
  b.clusters = 16;
  EXPECT_NE(a.hash(), b.hash());
}

class ForwardTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::mt19937_64 rng(17);
    riv = random_grid(rng, 2, 16, 1056);
    bev = random_grid(rng, 4, 32, 1056);
  }
  Grid riv, bev;
};

TEST_F(ForwardTest, DeterministicUnitNorm) {
  NetConfig cfg;
  const NetworkWeights w = init_weights(cfg);
  const Descriptor a = describe(riv, bev, w, cfg);
  const Descriptor b = describe(riv, bev, w, cfg);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 256u);
  EXPECT_NEAR(norm(a), 1.0, 1e-9);
}

TEST_F(ForwardTest, ShiftInvariantDefaultProfile) {
  NetConfig cfg;
  const NetworkWeights w = init_weights(cfg);
  const Descriptor ref = describe(riv, bev, w, cfg);
  for (long k : {1L, 7L, 264L, 528L, 1055L}) {
    const Descriptor d = describe(shift_azimuth(riv, k), shift_azimuth(bev, k), w, cfg);
    EXPECT_LE(max_abs_diff(ref, d), 1e-9) << "k=" << k;
  }
}

TEST_F(ForwardTest, ShiftInvariantSpeedProfile) {
  const NetConfig cfg = NetConfig::speed_profile();
  const NetworkWeights w = init_weights(cfg);
  const Descriptor ref = describe(riv, bev, w, cfg);
  for (long k : {8L, 264L, 528L}) {
    const Descriptor d = describe(shift_azimuth(riv, k), shift_azimuth(bev, k), w, cfg);
    EXPECT_LE(max_abs_diff(ref, d), 1e-9) << "k=" << k;
  }
}

TEST_F(ForwardTest, DifferentInputsGiveDifferentDescriptors) {
  NetConfig cfg;
  const NetworkWeights w = init_weights(cfg);
  std::mt19937_64 rng(99);
  const Grid other = random_grid(rng, 2, 16, 1056);
  EXPECT_GT(descriptor_distance(describe(riv, bev, w, cfg), describe(other, bev, w, cfg)), 0.0);
}

TEST_F(ForwardTest, RejectsMismatchedInputs) {
  NetConfig cfg;
  const NetworkWeights w = init_weights(cfg);
  std::mt19937_64 rng(3);
  EXPECT_THROW(describe(random_grid(rng, 2, 16, 1024), bev, w, cfg), Error);
  EXPECT_THROW(describe(random_grid(rng, 3, 16, 1056), bev, w, cfg), Error);
  const NetConfig speed = NetConfig::speed_profile();
  EXPECT_THROW(describe(random_grid(rng, 2, 16, 1060), random_grid(rng, 4, 32, 1060), init_weights(speed), speed),
               Error);
}

TEST(DescriptorDistance, Properties) {
  const Descriptor a{{1, 0, 0}}, b{{0, 1, 0}};
  EXPECT_EQ(descriptor_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(descriptor_distance(a, b), std::sqrt(2.0));
  EXPECT_EQ(descriptor_distance(a, b), descriptor_distance(b, a));
  EXPECT_THROW(descriptor_distance(a, Descriptor{{1, 0}}), Error);
}

TEST(Checkpoint, RoundTrip) {
  NetConfig cfg;
  cfg.seed = 3;
  const NetworkWeights w = init_weights(cfg);
  const auto path = std::filesystem::temp_directory_path() / "mptf_test_ckpt.mptf";
  save_checkpoint(path, w, cfg);
  EXPECT_EQ(load_checkpoint(path, cfg), w);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsOtherConfig) {
  NetConfig cfg;
  const auto bytes = encode_checkpoint(init_weights(cfg), cfg.hash());
  NetConfig other = cfg;
  other.descriptor_dim = 128;
  EXPECT_THROW(decode_checkpoint(bytes, other.hash()), Error);
  EXPECT_NO_THROW(decode_checkpoint(bytes, cfg.hash()));
}

TEST(Checkpoint, RejectsCorruption) {
  NetConfig cfg;
  auto bytes = encode_checkpoint(init_weights(cfg), cfg.hash());
  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated, cfg.hash()), Error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes, cfg.hash()), Error);
}

}  // namespace
