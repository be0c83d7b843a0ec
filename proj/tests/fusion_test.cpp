// Copyright 2026 The lidarclip-cpp Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lidarclip/fusion.hpp"

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "retrieval_oracle.hpp"

namespace lidarclip {
namespace {

std::vector<std::string> ids_of(const RankedList& r) {
  std::vector<std::string> out;
  for (const auto& s : r) out.push_back(s.id);
  return out;
}

TEST(Strategy, NamesRoundTrip) {
  for (auto s : kAllStrategies) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_FALSE(parse_strategy("best"));
  EXPECT_FALSE(is_joint(FusionStrategy::kLidarOnly));
  EXPECT_TRUE(is_joint(FusionStrategy::kMeanRank));
}

TEST(DenseRanks, SharedAndConsecutive) {
  auto r = dense_ranks({{"a", 0.5}, {"b", 0.9}, {"c", 0.5}, {"d", 0.1}});
  EXPECT_EQ(r.at("b"), 1);
  EXPECT_EQ(r.at("a"), 2);
  EXPECT_EQ(r.at("c"), 2);
  EXPECT_EQ(r.at("d"), 3);
  EXPECT_THROW(dense_ranks({{"a", 1}, {"a", 2}}), Error);
}

TEST(FuseFeatures, MeanAndMeanNorm) {
  std::vector<double> a{2, 0}, b{0, 4};
  auto m = fuse_features(std::span<const double>(a), std::span<const double>(b));
  EXPECT_EQ(m, (std::vector<double>{1, 2}));
  auto n = fuse_features(std::span<const double>(a), std::span<const double>(b), FeatureFusion::kMeanNorm);
  EXPECT_EQ(n, (std::vector<double>{0.5, 0.5}));
}

class FusionOracle : public ::testing::Test {
 protected:
  std::mt19937_64 rng{77};
  oracle::Instance next(int trial) {
    std::uniform_int_distribution<std::size_t> n(1, 150);
    return oracle::random_corpus(rng, n(rng), 5, trial % 2 == 0);
  }
};

TEST_F(FusionOracle, MeanRankMatchesBruteForce) {
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = next(trial);
    const std::size_t k = 1 + rng() % 40;
    auto got = joint_query(FusionStrategy::kMeanRank, {inst.query, inst.query2}, inst.store, k);
    EXPECT_EQ(to_ranked_list(got), oracle::truncate(oracle::mean_rank(inst.store, inst.query, inst.query2), k));
  }
}

TEST_F(FusionOracle, ScoreFusionMatchesBruteForce) {
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = next(trial);
    const std::size_t k = 1 + rng() % 40;
    auto got = joint_query(FusionStrategy::kMeanScore, {inst.query, inst.query2}, inst.store, k);
    EXPECT_EQ(to_ranked_list(got), oracle::truncate(oracle::score_sum(inst.store, inst.query, inst.query2), k));
  }
}

TEST_F(FusionOracle, RerankBothDirectionsMatchBruteForce) {
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = next(trial);
    const std::size_t k = 1 + rng() % 20;
    const std::size_t cand = k + rng() % 60;
    auto img = joint_query(FusionStrategy::kRerankImageFirst, {inst.query, inst.query2}, inst.store, k, cand);
    EXPECT_EQ(to_ranked_list(img), oracle::rerank(inst.store, Modality::kImage, inst.query, inst.query2, cand, k));
    auto lid = joint_query(FusionStrategy::kRerankLidarFirst, {inst.query, inst.query2}, inst.store, k, cand);
    EXPECT_EQ(to_ranked_list(lid), oracle::rerank(inst.store, Modality::kLidar, inst.query2, inst.query, cand, k));
  }
}

TEST_F(FusionOracle, SumAndMeanFeatureFusionRankIdentically) {
  for (int trial = 0; trial < 100; ++trial) {
    auto inst = next(trial);
    auto jc = joint_corpus(inst.store);
    RankedList by_sum, by_mean;
    for (std::size_t i = 0; i < jc.image.size(); ++i) {
      auto mean = fuse_features(jc.image.entries[i].vector, jc.lidar.entries[i].vector);
      auto sum = mean;
      for (double& v : sum) v *= 2;
      by_mean.push_back({*jc.image.entries[i].id, score(std::span<const double>(inst.query), std::span<const double>(mean))});
      by_sum.push_back({*jc.image.entries[i].id, score(std::span<const double>(inst.query), std::span<const double>(sum))});
    }
    EXPECT_EQ(ids_of(oracle::full_sort(by_sum)), ids_of(oracle::full_sort(by_mean)));
    auto got = joint_query(FusionStrategy::kMeanFeature, {inst.query, std::nullopt}, inst.store, jc.image.size());
    EXPECT_EQ(ids_of(to_ranked_list(got)), ids_of(oracle::full_sort(by_mean)));
  }
}

TEST_F(FusionOracle, SingleModalityEqualsTopK) {
  for (int trial = 0; trial < 50; ++trial) {
    auto inst = next(trial);
    const std::size_t k = 1 + rng() % 40;
    auto img = joint_query(FusionStrategy::kImageOnly, {inst.query, std::nullopt}, inst.store, k);
    EXPECT_EQ(to_ranked_list(img), top_k(inst.query, inst.store.view(Modality::kImage), k));
    auto lid = joint_query(FusionStrategy::kLidarOnly, {std::nullopt, inst.query2}, inst.store, k);
    EXPECT_EQ(to_ranked_list(lid), top_k(inst.query2, inst.store.view(Modality::kLidar), k));
  }
}

TEST_F(FusionOracle, ResultsAreDistinctAndRanked) {
  for (int trial = 0; trial < 40; ++trial) {
    auto inst = next(trial);
    for (auto s : kAllStrategies) {
      auto r = joint_query(s, {inst.query, inst.query2}, inst.store, 25, 30);
      std::set<std::string> ids;
      for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_TRUE(ids.insert(r[i].id).second);
        EXPECT_EQ(r[i].rank, i + 1);
        EXPECT_TRUE(r[i].s_image && r[i].s_lidar);
      }
      EXPECT_EQ(r.size(), std::min<std::size_t>(25, inst.store.ids().size()));
    }
  }
}

TEST(JointQuery, MissingPromptsAndBadK) {
  EmbeddingStore s(2);
  s.put("a", Modality::kImage, std::vector<float>{1, 0});
  s.put("a", Modality::kLidar, std::vector<float>{0, 1});
  std::vector<double> q{1, 0};
  auto code = [&](FusionStrategy st, QueryVectors qv, std::size_t k, std::size_t cand) {
    try {
      joint_query(st, qv, s, k, cand);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  EXPECT_EQ(code(FusionStrategy::kImageOnly, {std::nullopt, q}, 1, 10), ErrorCode::kQuery);
  EXPECT_EQ(code(FusionStrategy::kLidarOnly, {q, std::nullopt}, 1, 10), ErrorCode::kQuery);
  EXPECT_EQ(code(FusionStrategy::kMeanScore, {}, 1, 10), ErrorCode::kQuery);
  EXPECT_EQ(code(FusionStrategy::kMeanScore, {q, q}, 0, 10), ErrorCode::kQuery);
  EXPECT_EQ(code(FusionStrategy::kRerankImageFirst, {q, q}, 5, 2), ErrorCode::kQuery);
  auto r = joint_query(FusionStrategy::kLidarOnly, {std::nullopt, q}, s, 10);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_FALSE(r[0].s_image);
  EXPECT_DOUBLE_EQ(*r[0].s_lidar, 0.0);
}

}  // namespace
}  // namespace lidarclip
