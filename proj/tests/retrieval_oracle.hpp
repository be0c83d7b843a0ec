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

// Brute-force references for ranking code. Scores come from the library's
// cosine (checked separately against a plain formula); everything about
// selection and ordering is redone here with full sorts and linear scans.

#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "lidarclip/fusion.hpp"
#include "lidarclip/retrieval.hpp"
#include "lidarclip/store.hpp"

namespace lidarclip::oracle {

struct Instance {
  EmbeddingStore store;
  std::vector<double> query;   // image-side query
  std::vector<double> query2;  // lidar-side query
};

// `ties` draws from a handful of integer vectors so equal scores are common.
// Every id gets both an image and a lidar vector.
inline Instance random_corpus(std::mt19937_64& rng, std::size_t n, std::uint32_t d, bool ties) {
  std::normal_distribution<double> n01(0, 1);
  std::uniform_int_distribution<int> small(0, 2);  // non-negative: image + lidar never cancels
  auto draw = [&] {
    std::vector<float> v(d);
    do {
      for (auto& x : v) x = ties ? static_cast<float>(small(rng)) : static_cast<float>(n01(rng));
    } while (std::all_of(v.begin(), v.end(), [](float x) { return x == 0; }));
    return v;
  };
  Instance inst{EmbeddingStore(d), {}, {}};
  std::set<std::string> used;
  while (used.size() < n) {
    std::string id = "s" + std::to_string(rng() % (n * 10 + 10));
    if (!used.insert(id).second) continue;
    inst.store.put(id, Modality::kImage, draw());
    inst.store.put(id, Modality::kLidar, draw());
  }
  for (auto* q : {&inst.query, &inst.query2}) {
    auto v = draw();
    q->assign(v.begin(), v.end());
  }
  return inst;
}

inline bool before(const ScoredSample& a, const ScoredSample& b) {
  if (a.score > b.score) return true;
  if (a.score < b.score) return false;
  return a.id < b.id;
}

inline RankedList full_sort(RankedList all) {
  std::stable_sort(all.begin(), all.end(), before);
  return all;
}

inline RankedList full_sort_top_k(const std::vector<double>& q, const ModalityView& view, std::size_t k) {
  RankedList all;
  for (const auto& e : view.entries) all.push_back({*e.id, score(std::span<const double>(q), e.vector)});
  all = full_sort(all);
  if (all.size() > k) all.resize(k);
  return all;
}

inline double score_of(const EmbeddingStore& s, const std::string& id, Modality m, const std::vector<double>& q) {
  return score(std::span<const double>(q), std::span<const float>(*s.find(id, m)));
}

// Dense rank by linear scan: 1 + number of distinct scores strictly above.
inline int dense_rank(const RankedList& all, double s) {
  std::set<double> above;
  for (const auto& x : all) {
    if (x.score > s) above.insert(x.score);
  }
  return 1 + static_cast<int>(above.size());
}

inline RankedList mean_rank(const EmbeddingStore& s, const std::vector<double>& qi, const std::vector<double>& ql) {
  RankedList si, sl;
  for (const auto& id : s.ids()) {
    si.push_back({id, score_of(s, id, Modality::kImage, qi)});
    sl.push_back({id, score_of(s, id, Modality::kLidar, ql)});
  }
  RankedList out;
  for (std::size_t i = 0; i < si.size(); ++i) {
    out.push_back({si[i].id, -0.5 * (dense_rank(si, si[i].score) + dense_rank(sl, sl[i].score))});
  }
  return full_sort(out);
}

inline RankedList score_sum(const EmbeddingStore& s, const std::vector<double>& qi, const std::vector<double>& ql) {
  RankedList out;
  for (const auto& id : s.ids()) {
    out.push_back({id, score_of(s, id, Modality::kImage, qi) + score_of(s, id, Modality::kLidar, ql)});
  }
  return full_sort(out);
}

inline RankedList rerank(const EmbeddingStore& s, Modality first, const std::vector<double>& q_first,
                         const std::vector<double>& q_second, std::size_t candidate_k, std::size_t k) {
  const Modality second = first == Modality::kImage ? Modality::kLidar : Modality::kImage;
  RankedList stage1;
  for (const auto& id : s.ids()) stage1.push_back({id, score_of(s, id, first, q_first)});
  stage1 = full_sort(stage1);
  if (stage1.size() > candidate_k) stage1.resize(candidate_k);
  RankedList stage2;
  for (const auto& c : stage1) stage2.push_back({c.id, score_of(s, c.id, second, q_second)});
  stage2 = full_sort(stage2);
  if (stage2.size() > k) stage2.resize(k);
  return stage2;
}

inline RankedList truncate(RankedList r, std::size_t k) {
  if (r.size() > k) r.resize(k);
  return r;
}

}  // namespace lidarclip::oracle
