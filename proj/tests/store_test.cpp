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

#include "lidarclip/store.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <random>

#include "test_util.hpp"

namespace lidarclip {
namespace {

EmbeddingStore random_store(std::mt19937_64& rng, std::size_t n, std::uint32_t d) {
  std::normal_distribution<float> n01(0, 1);
  std::uniform_int_distribution<int> mod(0, 2), len(1, 12), ch('a', 'z');
  EmbeddingStore s(d);
  std::vector<float> v(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::string id;
    for (int c = len(rng); c > 0; --c) id.push_back(static_cast<char>(ch(rng)));
    for (float& x : v) x = n01(rng);
    s.put(id, static_cast<Modality>(mod(rng)), v);
  }
  return s;
}

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_store(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "decode succeeded";
  return ErrorCode::kInvalidArgument;
}

// Hand-assembled file, independent of the encoder.
std::vector<std::uint8_t> hand_file() {
  std::vector<std::uint8_t> b{'L', 'C', 'E', 'B', 1, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 'a', 'b', 1};
  for (float f : {1.5f, -2.0f}) {
    std::uint8_t raw[4];
    std::memcpy(raw, &f, 4);
    for (std::uint8_t byte : raw) b.push_back(byte);
  }
  return b;
}

TEST(Store, DecodesHandAssembledFile) {
  auto s = decode_store(hand_file());
  EXPECT_EQ(s.dim(), 2u);
  ASSERT_EQ(s.size(), 1u);
  auto e = s.get("ab", Modality::kLidar);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->vector, (std::vector<float>{1.5f, -2.0f}));
  EXPECT_EQ(encode_store(s), hand_file());
}

TEST(Store, RandomRoundTripIsBitExact) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> n(0, 40), d(1, 16);
  for (int trial = 0; trial < 200; ++trial) {
    auto s = random_store(rng, n(rng), d(rng));
    auto bytes = encode_store(s);
    auto back = decode_store(bytes);
    EXPECT_EQ(back.entries(), s.entries());
    EXPECT_EQ(encode_store(back), bytes);
  }
}

TEST(Store, FileRoundTrip) {
  testing::TempDir dir;
  std::mt19937_64 rng(2);
  auto s = random_store(rng, 30, 7);
  write_store(s, dir.file("s.lceb"));
  EXPECT_EQ(read_store(dir.file("s.lceb")).entries(), s.entries());
  EXPECT_THROW(read_store(dir.file("missing.lceb")), Error);
}

TEST(Store, CorruptionsHaveDistinctErrors) {
  auto good = hand_file();
  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(decode_error(magic), ErrorCode::kBadMagic);
  auto version = good;
  version[4] = 2;
  EXPECT_EQ(decode_error(version), ErrorCode::kUnsupportedVersion);
  for (std::size_t cut = 0; cut < good.size(); ++cut) {
    std::vector<std::uint8_t> t(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    const auto code = decode_error(t);
    if (cut < 4) {
      EXPECT_TRUE(code == ErrorCode::kBadMagic || code == ErrorCode::kTruncated) << cut;
    } else {
      EXPECT_EQ(code, ErrorCode::kTruncated) << cut;
    }
  }
  auto huge = good;
  huge[17] = 0x7f;  // count's top byte
  EXPECT_EQ(decode_error(huge), ErrorCode::kTruncated);
  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), ErrorCode::kFormat);
  auto modality = good;
  modality[22] = 7;
  EXPECT_EQ(decode_error(modality), ErrorCode::kFormat);
}

TEST(Store, RejectsNonFiniteAndDuplicates) {
  auto nan_file = hand_file();
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan_file.data() + 23, &nan, 4);
  EXPECT_EQ(decode_error(nan_file), ErrorCode::kFormat);

  auto dup = hand_file();
  dup[10] = 2;
  auto rec = std::vector<std::uint8_t>(hand_file().begin() + 18, hand_file().end());
  dup.insert(dup.end(), rec.begin(), rec.end());
  EXPECT_EQ(decode_error(dup), ErrorCode::kFormat);
}

TEST(Store, UpsertAndValidation) {
  EmbeddingStore s;
  EXPECT_EQ(s.dim(), 0u);
  s.put("a", Modality::kImage, std::vector<float>{1, 2, 3});
  s.put("a", Modality::kImage, std::vector<float>{4, 5, 6});
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.get("a", Modality::kImage)->vector, (std::vector<float>{4, 5, 6}));
  EXPECT_FALSE(s.get("a", Modality::kLidar));
  try {
    s.put("b", Modality::kImage, std::vector<float>{1, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimensionMismatch);
  }
  EXPECT_THROW(s.put("", Modality::kImage, std::vector<float>{1, 2, 3}), Error);
  try {
    s.put("c", Modality::kText, std::vector<float>{1, std::numeric_limits<float>::infinity(), 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
  }
}

TEST(Store, ViewsAndIdsAreOrdered) {
  EmbeddingStore s(1);
  for (const char* id : {"c", "a", "b"}) s.put(id, Modality::kLidar, std::vector<float>{1});
  s.put("b", Modality::kImage, std::vector<float>{2});
  s.put("z", Modality::kText, std::vector<float>{3});
  auto v = s.view(Modality::kLidar);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(*v.entries[0].id, "a");
  EXPECT_EQ(*v.entries[2].id, "c");
  EXPECT_EQ(s.ids(), (std::vector<std::string>{"a", "b", "c"}));
  EmbeddingStore other(1);
  other.put("a", Modality::kLidar, std::vector<float>{9});
  s.merge(other);
  EXPECT_EQ(s.get("a", Modality::kLidar)->vector[0], 9.0f);
}

}  // namespace
}  // namespace lidarclip
