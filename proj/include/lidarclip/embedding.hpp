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

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lidarclip/error.hpp"

namespace lidarclip {

// Values are the on-disk modality byte.
enum class Modality : std::uint8_t { kImage = 0, kLidar = 1, kText = 2 };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::kImage: return "image";
    case Modality::kLidar: return "lidar";
    case Modality::kText: return "text";
  }
  return "unknown";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "image") return Modality::kImage;
  if (s == "lidar") return Modality::kLidar;
  if (s == "text") return Modality::kText;
  return std::nullopt;
}

struct Embedding {
  std::string id;
  Modality modality = Modality::kImage;
  std::vector<float> vector;

  std::size_t dim() const { return vector.size(); }
};

namespace vec {

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  if (a.size() != b.size()) fail(ErrorCode::kDimensionMismatch, "vector dimensions differ");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename A>
double norm(std::span<const A> a) {
  return std::sqrt(dot(a, a));
}

}  // namespace vec
}  // namespace lidarclip
