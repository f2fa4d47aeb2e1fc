#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mptf/place_index.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

namespace {

using namespace mptf;

using fixture::random_instance;
using fixture::random_unit;
using fixture::unit;
using fixture::Instance;

TEST(QueryTopk, SpecExample) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}, {"b", unit({0, 1}), 0, 0}, {"c", unit({-1, 0}), 0, 0}});
  const auto top = query_topk(idx, unit({1, 0.1}), 2);
  ASSERT_EQ(top.size(), 2u);
  EXPECT_EQ(top[0].frame_id, "a");
  EXPECT_EQ(top[1].frame_id, "b");
  EXPECT_LE(top[0].distance, top[1].distance);
}

TEST(QueryTopk, TiesBrokenByFrameId) {
  const DescriptorIndex idx({{"z", unit({0, 1}), 0, 0}, {"m", unit({0, 1}), 0, 0}, {"a", unit({1, 0}), 0, 0}});
  const auto top = query_topk(idx, unit({0, 1}), 3);
  EXPECT_EQ(top[0].frame_id, "m");
  EXPECT_EQ(top[1].frame_id, "z");
  EXPECT_EQ(top[2].frame_id, "a");
}

TEST(QueryTopk, KLargerThanIndex) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}});
  EXPECT_EQ(query_topk(idx, unit({0, 1}), 5).size(), 1u);
  EXPECT_THROW(query_topk(idx, unit({0, 1}), 0), Error);
  EXPECT_THROW(query_topk(DescriptorIndex({}), unit({0, 1}), 1), Error);
}

TEST(QueryTopk, MatchesFullSortOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance inst = random_instance(seed);
    const DescriptorIndex idx(inst.db);
    for (const auto& q : inst.queries) {
      const auto ref = oracle::full_sort(inst.db, q.descriptor.values);
      for (std::size_t k : {std::size_t{1}, std::size_t{3}, inst.db.size()}) {
        const auto top = query_topk(idx, q.descriptor, k);
        ASSERT_EQ(top.size(), std::min(k, ref.size()));
        for (std::size_t i = 0; i < top.size(); ++i) {
          EXPECT_EQ(top[i].index, ref[i].index) << "seed " << seed;
          EXPECT_EQ(top[i].distance, ref[i].distance);
        }
      }
    }
  }
}

TEST(RecallAtK, SpecExamples) {
  const DescriptorIndex idx({{"near", unit({1, 0}), 0, 0}, {"far", unit({0, 1}), 100, 0}});
  // Top-1 is the in-radius entry.
  EXPECT_EQ(recall_at_k(idx, {{"q", unit({1, 0.1}), 3, 0}}, {1}).recall_at.at(1), 1.0);
  // Top-1 is out of radius, top-2 hits.
  const auto r = recall_at_k(idx, {{"q", unit({0.1, 1}), 3, 0}}, {1, 2});
  EXPECT_EQ(r.recall_at.at(1), 0.0);
  EXPECT_EQ(r.recall_at.at(2), 1.0);
}

TEST(RecallAtK, ExcludesQueriesWithoutRevisit) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}});
  const auto r = recall_at_k(idx, {{"q1", unit({1, 0}), 1, 0}, {"q2", unit({1, 0}), 500, 0}}, {1});
  EXPECT_EQ(r.evaluated, 1u);
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.recall_at.at(1), 1.0);
}

TEST(RecallAtK, RadiusBoundaryIsInclusive) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}});
  EXPECT_EQ(recall_at_k(idx, {{"q", unit({1, 0}), 9.0, 0}}, {1}).recall_at.at(1), 1.0);
}

TEST(RecallAtK, MatchesOracleAndIsMonotone) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance inst = random_instance(seed);
    const DescriptorIndex idx(inst.db);
    const std::vector<int> ks{1, 2, 5, 10};
    const auto r = recall_at_k(idx, inst.queries, ks);
    double prev = 0.0;
    for (int k : ks) {
      EXPECT_EQ(r.recall_at.at(k), oracle::recall_at(inst.db, inst.queries, k, 9.0)) << "seed " << seed << " k " << k;
      EXPECT_GE(r.recall_at.at(k), prev);
      prev = r.recall_at.at(k);
    }
  }
}

TEST(RecallAtK, RandomDescriptorsNearChance) {
  // 1 true match among 50 entries: recall@1 of random descriptors ~ 1/50.
  std::mt19937_64 rng(3);
  std::vector<IndexEntry> db;
  for (int i = 0; i < 50; ++i) db.push_back({"d" + std::to_string(i), random_unit(rng, 16), i * 100.0, 0});
  const DescriptorIndex idx(db);
  std::vector<EvalQuery> qs;
  for (int j = 0; j < 2000; ++j) qs.push_back({"q" + std::to_string(j), random_unit(rng, 16), (j % 50) * 100.0, 0});
  const double r1 = recall_at_k(idx, qs, {1}).recall_at.at(1);
  EXPECT_NEAR(r1, 1.0 / 50.0, 0.015);
}

TEST(RecallAtK, Errors) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}});
  EXPECT_THROW(recall_at_k(idx, {}, {1}), Error);
  EXPECT_THROW(recall_at_k(idx, {{"q", unit({1, 0}), 0, 0}}, {}), Error);
  EXPECT_THROW(recall_at_k(idx, {{"q", unit({1, 0}), 0, 0}}, {0}), Error);
}

TEST(PrCurve, PerfectSeparation) {
  const DescriptorIndex idx({{"a", unit({1, 0, 0}), 0, 0}, {"b", unit({0, 1, 0}), 100, 0}});
  const auto rep = pr_curve_max_f1_auc(idx, {{"q1", unit({1, 0.05, 0}), 1, 0}, {"q2", unit({0.05, 1, 0}), 101, 0}});
  EXPECT_EQ(rep.max_f1, 1.0);
  EXPECT_EQ(rep.pr_auc, 1.0);
}

TEST(PrCurve, AllWrong) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}, {"b", unit({0, 1}), 100, 0}});
  const auto rep = pr_curve_max_f1_auc(idx, {{"q1", unit({0, 1}), 1, 0}, {"q2", unit({1, 0}), 101, 0}});
  EXPECT_EQ(rep.max_f1, 0.0);
}

TEST(PrCurve, HandBuiltTenQueries) {
  // Query i is the basis vector e_2i; its top-1 entry lies at distance
  // 0.1 (i + 1) along e_2i+1, every other entry at sqrt(2). Correctness of
  // the top-1 in distance order: T T F T F T T F F T.
  const bool correct[10] = {true, true, false, true, false, true, true, false, false, true};
  std::vector<IndexEntry> db;
  std::vector<EvalQuery> qs;
  auto basis = [](int axis) {
    std::vector<double> v(21, 0.0);
    v[static_cast<std::size_t>(axis)] = 1.0;
    return v;
  };
  for (int i = 0; i < 10; ++i) {
    const double theta = 2.0 * std::asin(0.1 * (i + 1) / 2.0);
    std::vector<double> m(21, 0.0);
    m[static_cast<std::size_t>(2 * i)] = std::cos(theta);
    m[static_cast<std::size_t>(2 * i + 1)] = std::sin(theta);
    const double y = i * 1000.0;
    db.push_back({"m" + std::to_string(i), Descriptor{m}, correct[i] ? 0.0 : 50.0, y});
    if (!correct[i]) db.push_back({"t" + std::to_string(i), Descriptor{basis(20)}, 0.0, y});
    qs.push_back({"q" + std::to_string(i), Descriptor{basis(2 * i)}, 0.0, y});
  }
  const auto rep = pr_curve_max_f1_auc(DescriptorIndex(db), qs);
  EXPECT_EQ(rep.revisit_queries, 10u);
  EXPECT_NEAR(rep.max_f1, 0.6, 1e-15);
  EXPECT_NEAR(rep.pr_auc, 11617.0 / 25200.0, 1e-15);
  const auto ref = oracle::pr(db, qs, 9.0);
  EXPECT_EQ(rep.max_f1, ref.max_f1);
  EXPECT_EQ(rep.pr_auc, ref.auc);
}

TEST(PrCurve, MatchesOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Instance inst = random_instance(seed);
    const auto ref = oracle::pr(inst.db, inst.queries, 9.0);
    const auto rep = pr_curve_max_f1_auc(DescriptorIndex(inst.db), inst.queries);
    EXPECT_EQ(rep.max_f1, ref.max_f1) << "seed " << seed;
    EXPECT_EQ(rep.pr_auc, ref.auc) << "seed " << seed;
    ASSERT_EQ(rep.pr_points.size(), ref.points.size());
    EXPECT_GE(rep.max_f1, 0.0);
    EXPECT_LE(rep.max_f1, 1.0);
    EXPECT_GE(rep.pr_auc, 0.0);
    EXPECT_LE(rep.pr_auc, 1.0);
  }
}

TEST(PrCurve, NoRevisitThrows) {
  const DescriptorIndex idx({{"a", unit({1, 0}), 0, 0}});
  EXPECT_THROW(pr_curve_max_f1_auc(idx, {{"q", unit({1, 0}), 500, 0}}), Error);
  EXPECT_THROW(pr_curve_max_f1_auc(idx, {}), Error);
}

TEST(DescriptorIndexTest, Validation) {
  EXPECT_THROW(DescriptorIndex({{"a", unit({1, 0}), 0, 0}, {"a", unit({0, 1}), 0, 0}}), Error);
  EXPECT_THROW(DescriptorIndex({{"a", Descriptor{{1, 1}}, 0, 0}}), Error);
  EXPECT_THROW(DescriptorIndex({{"a", unit({1, 0}), 0, 0}, {"b", unit({0, 1, 0}), 0, 0}}), Error);
}

TEST(DescriptorIndexTest, FingerprintStableAndSensitive) {
  const std::vector<IndexEntry> e{{"a", unit({1, 0}), 0, 0}, {"b", unit({0, 1}), 5, 0}};
  const DescriptorIndex idx(e);
  const auto fp = idx.fingerprint();
  query_topk(idx, unit({1, 0}), 2);
  EXPECT_EQ(idx.fingerprint(), fp);
  EXPECT_EQ(DescriptorIndex(e).fingerprint(), fp);
  auto moved = e;
  moved[1].east = 5.5;
  EXPECT_NE(DescriptorIndex(moved).fingerprint(), fp);
}

}  // namespace
