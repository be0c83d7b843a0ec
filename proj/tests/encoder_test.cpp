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

#include "lidarclip/encoder.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "encoder_oracle.hpp"
#include "test_util.hpp"

namespace lidarclip {
namespace {

PointCloud random_in_range(std::mt19937_64& rng, std::size_t n, const EncoderConfig& cfg) {
  PointCloud c;
  std::uniform_real_distribution<double> x(cfg.pc_range[0], cfg.pc_range[3]);
  std::uniform_real_distribution<double> y(cfg.pc_range[1], cfg.pc_range[4]);
  std::uniform_real_distribution<double> z(cfg.pc_range[2], cfg.pc_range[5]);
  std::uniform_real_distribution<double> i01(0, 1);
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({x(rng), y(rng), z(rng), i01(rng)});
  return c;
}

TEST(Voxelize, SinglePointAtVoxelCenter) {
  EncoderConfig cfg;
  PointCloud cloud{{{cfg.pc_range[0] + 0.25, cfg.pc_range[1] + 0.25, cfg.pc_range[2] + 3.0, 0.7}}, Frame::kLidar};
  auto grid = voxelize(cloud, cfg);
  ASSERT_EQ(grid.size(), 1u);
  const auto& [idx, f] = *grid.voxels.begin();
  EXPECT_EQ(idx, (VoxelIndex{0, 0, 0}));
  EXPECT_EQ(f.count, 1);
  EXPECT_NEAR(f.offset[0], 0, 1e-12);
  EXPECT_NEAR(f.offset[1], 0, 1e-12);
  EXPECT_NEAR(f.offset[2], 0, 1e-12);
  EXPECT_DOUBLE_EQ(f.intensity, 0.7);
}

TEST(Voxelize, DuplicatesMerge) {
  EncoderConfig cfg;
  PointCloud cloud{{{10.1, 3.3, 0.0, 0.2}, {10.1, 3.3, 0.0, 0.2}}, Frame::kLidar};
  auto grid = voxelize(cloud, cfg);
  ASSERT_EQ(grid.size(), 1u);
  EXPECT_EQ(grid.voxels.begin()->second.count, 2);
}

TEST(Voxelize, MatchesGroupByOracle) {
  EncoderConfig cfg;
  cfg.voxel_size = {2.0, 2.0, 6.0};
  std::mt19937_64 rng(21);
  auto cloud = random_in_range(rng, 500, cfg);
  // Add a few points outside the range; they must be ignored.
  cloud.points.push_back({-1, 0, 0, 0});
  cloud.points.push_back({0, 25, 0, 0});
  auto grid = voxelize(cloud, cfg);

  struct Acc {
    double sx = 0, sy = 0, sz = 0, si = 0;
    int n = 0;
  };
  std::map<VoxelIndex, Acc> oracle;
  for (const auto& p : cloud.points) {
    if (p.x < 0 || p.x >= 40 || p.y < -20 || p.y >= 20 || p.z < -2 || p.z >= 4) continue;
    VoxelIndex idx{static_cast<int>((p.x - 0) / 2.0), static_cast<int>((p.y + 20) / 2.0), static_cast<int>((p.z + 2) / 6.0)};
    auto& a = oracle[idx];
    a.sx += p.x - (idx[0] * 2.0 + 1.0);
    a.sy += p.y - (-20 + idx[1] * 2.0 + 1.0);
    a.sz += p.z - (-2 + idx[2] * 6.0 + 3.0);
    a.si += p.intensity;
    a.n += 1;
  }
  ASSERT_EQ(grid.size(), oracle.size());
  for (const auto& [idx, a] : oracle) {
    auto it = grid.voxels.find(idx);
    ASSERT_NE(it, grid.voxels.end());
    EXPECT_EQ(it->second.count, a.n);
    EXPECT_NEAR(it->second.offset[0], a.sx / a.n, 1e-9);
    EXPECT_NEAR(it->second.offset[1], a.sy / a.n, 1e-9);
    EXPECT_NEAR(it->second.offset[2], a.sz / a.n, 1e-9);
    EXPECT_NEAR(it->second.intensity, a.si / a.n, 1e-9);
  }
}

TEST(Voxelize, OutsideRangeIsEmptyInput) {
  EncoderConfig cfg;
  PointCloud cloud{{{-5, 0, 0, 0}, {100, 0, 0, 0}}, Frame::kLidar};
  try {
    voxelize(cloud, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyInput);
  }
}

TEST(EncoderParams, LayoutCountAndInit) {
  auto cfg = EncoderConfig::tiny();
  ParamLayout layout(cfg);
  // 5*8+8 input, 4*8 pos, block (16 + 4*72 + 16 + 8*16+16 + 16*8+8), 16 final LN, 3*72 pool, 8*8+8 out.
  EXPECT_EQ(layout.total(), 48u + 32u + (16u + 288u + 16u + 144u + 136u) + 16u + 216u + 72u);
  EXPECT_LE(layout.total(), 2000u);
  auto p = init_params<double>(cfg, 1);
  ASSERT_EQ(p.values.size(), layout.total());
  for (const auto& seg : layout.segments()) {
    auto s = p.segment(seg);
    if (seg.fan_in == 0) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(seg.fan_in));
    for (double v : s) EXPECT_LE(std::abs(v), bound);
  }
  EXPECT_EQ(parameter_count(EncoderConfig{}), ParamLayout(EncoderConfig{}).total());
}

TEST(Encode, DeterministicAndFinite) {
  auto cfg = EncoderConfig::tiny();
  std::mt19937_64 rng(4);
  auto grid = voxelize(random_in_range(rng, 80, cfg), cfg);
  auto params = init_params<float>(cfg, 9);
  auto a = encode(grid, params, cfg);
  auto b = encode(grid, params, cfg);
  ASSERT_EQ(a.size(), static_cast<std::size_t>(cfg.d_out));
  EXPECT_EQ(a, b);
  for (float v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encode, ZeroParamsWithIdentityLikeOutput) {
  auto cfg = EncoderConfig::tiny();
  ParamLayout layout(cfg);
  EncoderParams<double> params{std::vector<double>(layout.total(), 0.0)};
  auto out = params.segment(layout[layout.out_w]);
  for (int i = 0; i < cfg.d_model && i < cfg.d_out; ++i) out[static_cast<std::size_t>(i * cfg.d_out + i)] = 1.0;
  std::mt19937_64 rng(1);
  auto grid = voxelize(random_in_range(rng, 40, cfg), cfg);
  auto a = encode(grid, params, cfg);
  auto b = encode(grid, params, cfg);
  EXPECT_EQ(a, b);
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(Encode, PointOrderInvariance) {
  auto cfg = EncoderConfig::tiny();
  std::mt19937_64 rng(8);
  auto cloud = random_in_range(rng, 300, cfg);
  auto params = init_params<float>(cfg, 2);
  auto ref = encode(voxelize(cloud, cfg), params, cfg);
  for (int t = 0; t < 5; ++t) {
    std::shuffle(cloud.points.begin(), cloud.points.end(), rng);
    EXPECT_EQ(encode(voxelize(cloud, cfg), params, cfg), ref);
  }
}

TEST(Encode, ScaledCountsStayFinite) {
  auto cfg = EncoderConfig::tiny();
  std::mt19937_64 rng(10);
  auto grid = voxelize(random_in_range(rng, 100, cfg), cfg);
  auto params = init_params<float>(cfg, 3);
  for (double scale : {1e3, 1e6, 1e9}) {
    VoxelGrid g = grid;
    for (auto& [_, f] : g.voxels) f.count *= scale;
    for (float v : encode(g, params, cfg)) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Encode, MatchesStraightLineOracle) {
  EncoderConfig cfg = EncoderConfig::tiny(3);
  cfg.d_model = 4;
  cfg.d_ff = 6;
  cfg.layer_heads = 1;
  cfg.pool_heads = 1;
  // Three voxels: two share a window, one sits in another window.
  VoxelGrid grid;
  grid.voxels[{0, 0, 0}] = {{0.1, -0.2, 0.3}, 0.4, 2};
  grid.voxels[{1, 1, 0}] = {{-0.5, 0.25, 0.0}, 0.9, 1};
  grid.voxels[{3, 0, 0}] = {{0.05, 0.05, -1.0}, 0.1, 5};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto params = init_params<double>(cfg, seed);
    auto got = encode(grid, params, cfg);
    auto want = oracle::straight_line_encode(grid, params.values, cfg);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
  }
}

TEST(Encode, MultiHeadMultiLayerMatchesOracle) {
  EncoderConfig cfg = EncoderConfig::tiny(5);
  cfg.num_layers = 2;
  std::mt19937_64 rng(77);
  auto grid = voxelize(random_in_range(rng, 60, cfg), cfg);
  auto params = init_params<double>(cfg, 5);
  auto got = encode(grid, params, cfg);
  auto want = oracle::straight_line_encode(grid, params.values, cfg);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
}

TEST(Encode, WrongParamCountRejected) {
  auto cfg = EncoderConfig::tiny();
  VoxelGrid grid;
  grid.voxels[{0, 0, 0}] = {{0, 0, 0}, 0.5, 1};
  EncoderParams<double> params{std::vector<double>(3, 0.0)};
  EXPECT_THROW(encode(grid, params, cfg), Error);
  EXPECT_THROW(encode(VoxelGrid{}, init_params<double>(cfg, 1), cfg), Error);
}

TEST(Encode, NonFiniteParamsReportLayer) {
  auto cfg = EncoderConfig::tiny();
  VoxelGrid grid;
  grid.voxels[{0, 0, 0}] = {{0, 0, 0}, 0.5, 1};
  auto params = init_params<double>(cfg, 1);
  ParamLayout layout(cfg);
  params.segment(layout[layout.blocks[0].w2])[0] = INFINITY;
  try {
    encode(grid, params, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer(), 1);
  }
}

TEST(EncoderGrad, ZeroUpstreamGivesZeroGradient) {
  auto cfg = EncoderConfig::tiny();
  std::mt19937_64 rng(2);
  auto grid = voxelize(random_in_range(rng, 50, cfg), cfg);
  auto params = init_params<double>(cfg, 4);
  std::vector<double> up(static_cast<std::size_t>(cfg.d_out), 0.0);
  auto g = encoder_grad(grid, params, cfg, up);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(EncoderGrad, FrozenZeroLayerStillFinite) {
  auto cfg = EncoderConfig::tiny();
  std::mt19937_64 rng(2);
  auto grid = voxelize(random_in_range(rng, 50, cfg), cfg);
  auto params = init_params<double>(cfg, 4);
  ParamLayout layout(cfg);
  const auto& b = layout.blocks[0];
  for (std::size_t s : {b.wq, b.wk, b.wv, b.wo, b.w1, b.w2}) {
    for (double& v : params.segment(layout[s])) v = 0.0;
  }
  std::vector<double> up(static_cast<std::size_t>(cfg.d_out), 1.0);
  for (double v : encoder_grad(grid, params, cfg, up)) EXPECT_TRUE(std::isfinite(v));
}

TEST(EncoderGrad, MatchesFiniteDifferences) {
  for (std::uint64_t seed : {1u, 2u}) {
    auto cfg = EncoderConfig::tiny(6);
    std::mt19937_64 rng(seed);
    auto grid = voxelize(random_in_range(rng, 40, cfg), cfg);
    auto params = init_params<double>(cfg, seed + 100);
    std::normal_distribution<double> n01;
    std::vector<double> up(static_cast<std::size_t>(cfg.d_out));
    for (double& u : up) u = n01(rng);
    auto analytic = encoder_grad(grid, params, cfg, up);
    auto fd = oracle::finite_difference_grad(params, [&](const EncoderParams<double>& p) {
      auto z = encode(grid, p, cfg);
      double s = 0;
      for (std::size_t i = 0; i < z.size(); ++i) s += up[i] * z[i];
      return s;
    });
    EXPECT_LE(oracle::max_relative_error(analytic, fd), 1e-4);
  }
}

TEST(Checkpoint, RoundTripAndDigestCheck) {
  testing::TempDir dir;
  auto cfg = EncoderConfig::tiny();
  auto params = init_params<float>(cfg, 12);
  write_checkpoint(dir.file("w.lcwt"), params, cfg);
  auto ck = read_checkpoint(dir.file("w.lcwt"));
  EXPECT_EQ(ck.params.values, params.values);
  EXPECT_EQ(config_digest(ck.config), config_digest(cfg));

  auto other = cfg;
  other.d_ff = 32;
  auto bytes = encode_checkpoint(params, cfg);
  EXPECT_THROW(decode_checkpoint(bytes, other), Error);
  bytes.resize(bytes.size() - 1);
  try {
    decode_checkpoint(bytes, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTruncated);
  }
}

TEST(EncoderConfig, JsonRoundTripAndValidation) {
  auto cfg = EncoderConfig::tiny(16);
  auto back = encoder_config_from_json(to_json(cfg));
  EXPECT_EQ(config_digest(back), config_digest(cfg));
  EXPECT_THROW(encoder_config_from_json(nlohmann::json{{"d_model", 10}, {"pool_heads", 4}}), Error);
  EXPECT_THROW(encoder_config_from_json(nlohmann::json{{"pc_range", {0, 0, 0, 0, 1, 1}}}), Error);
}

}  // namespace
}  // namespace lidarclip
