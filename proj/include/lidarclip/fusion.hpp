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

// Joint image + lidar retrieval.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lidarclip/retrieval.hpp"
#include "lidarclip/store.hpp"

namespace lidarclip {

enum class FusionStrategy {
  kImageOnly,
  kLidarOnly,
  kMeanFeature,
  kMeanNormFeature,
  kMeanScore,
  kMeanRank,
  kRerankImageFirst,
  kRerankLidarFirst,
};

inline constexpr std::array<FusionStrategy, 8> kAllStrategies = {
    FusionStrategy::kImageOnly,       FusionStrategy::kLidarOnly,  FusionStrategy::kMeanFeature,
    FusionStrategy::kMeanNormFeature, FusionStrategy::kMeanScore,  FusionStrategy::kMeanRank,
    FusionStrategy::kRerankImageFirst, FusionStrategy::kRerankLidarFirst};

inline std::string_view to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::kImageOnly: return "image_only";
    case FusionStrategy::kLidarOnly: return "lidar_only";
    case FusionStrategy::kMeanFeature: return "mean_feature";
    case FusionStrategy::kMeanNormFeature: return "mean_norm_feature";
    case FusionStrategy::kMeanScore: return "mean_score";
    case FusionStrategy::kMeanRank: return "mean_rank";
    case FusionStrategy::kRerankImageFirst: return "rerank_image_first";
    case FusionStrategy::kRerankLidarFirst: return "rerank_lidar_first";
  }
  return "unknown";
}

inline std::optional<FusionStrategy> parse_strategy(std::string_view s) {
  for (FusionStrategy f : kAllStrategies) {
    if (to_string(f) == s) return f;
  }
  return std::nullopt;
}

inline bool is_joint(FusionStrategy s) { return s != FusionStrategy::kImageOnly && s != FusionStrategy::kLidarOnly; }

inline constexpr std::size_t kDefaultCandidateK = 100;

// ---------------------------------------------------------------------------
// Fusion primitives

enum class FeatureFusion { kMean, kMeanNorm };

/// (z_I + z_L) / 2, or the mean of the unit-normalized inputs.
template <typename A, typename B>
std::vector<double> fuse_features(std::span<const A> z_image, std::span<const B> z_lidar,
                                  FeatureFusion kind = FeatureFusion::kMean) {
  if (z_image.size() != z_lidar.size()) fail(ErrorCode::kDimensionMismatch, "fuse_features: dimensions differ");
  double ni = 1.0, nl = 1.0;
  if (kind == FeatureFusion::kMeanNorm) {
    ni = vec::norm(z_image);
    nl = vec::norm(z_lidar);
    if (!(ni > kDegenerateNorm) || !(nl > kDegenerateNorm)) {
      fail(ErrorCode::kDegenerateEmbedding, "fuse_features: near-zero embedding norm");
    }
  }
  std::vector<double> out(z_image.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * (static_cast<double>(z_image[i]) / ni + static_cast<double>(z_lidar[i]) / nl);
  }
  return out;
}

inline double fuse_scores(double s_image, double s_lidar) { return s_image + s_lidar; }

/// Dense ranks (1 = best; equal scores share a rank, the next distinct
/// score gets the next integer).
inline std::map<std::string, int> dense_ranks(RankedList scored) {
  std::sort(scored.begin(), scored.end(), ranks_before);
  std::map<std::string, int> ranks;
  int rank = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (i == 0 || scored[i].score != scored[i - 1].score) ++rank;
    if (!ranks.emplace(scored[i].id, rank).second) fail(ErrorCode::kInvalidArgument, "duplicate id '" + scored[i].id + "' in ranking");
  }
  return ranks;
}

/// Orders ids by the mean of their per-modality dense ranks (ascending),
/// ties by id. The output score is the negated mean rank so that larger is
/// better, like every other strategy.
inline RankedList fuse_ranks(const RankedList& scored_image, const RankedList& scored_lidar) {
  auto ri = dense_ranks(scored_image);
  auto rl = dense_ranks(scored_lidar);
  if (ri.size() != rl.size()) fail(ErrorCode::kInvalidArgument, "fuse_ranks: rankings cover different id sets");
  RankedList out;
  out.reserve(ri.size());
  for (const auto& [id, r] : ri) {
    auto it = rl.find(id);
    if (it == rl.end()) fail(ErrorCode::kInvalidArgument, "fuse_ranks: id '" + id + "' missing from lidar ranking");
    out.push_back({id, -0.5 * (r + it->second)});
  }
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

// ---------------------------------------------------------------------------
// Joint corpus: the samples holding both an image and a lidar embedding.

struct JointCorpus {
  ModalityView image;
  ModalityView lidar;  // same ids, same order as `image`
};

inline JointCorpus joint_corpus(const EmbeddingStore& store) {
  JointCorpus jc;
  jc.image.modality = Modality::kImage;
  jc.lidar.modality = Modality::kLidar;
  const auto& entries = store.entries();
  for (auto it = entries.begin(); it != entries.end(); ++it) {
    if (it->first.second != Modality::kImage) continue;
    auto lit = entries.find({it->first.first, Modality::kLidar});
    if (lit == entries.end()) continue;
    jc.image.entries.push_back({&it->first.first, it->second});
    jc.lidar.entries.push_back({&lit->first.first, lit->second});
  }
  return jc;
}

/// Two-step re-ranking: `first` picks candidate_k ids with q_first, then the
/// candidates are ordered by q_second on the other modality.
inline RankedList rerank(Modality first, std::span<const double> q_first, std::span<const double> q_second,
                         const JointCorpus& corpus, std::size_t candidate_k, std::size_t k) {
  if (k == 0) fail(ErrorCode::kInvalidArgument, "k must be at least 1");
  if (candidate_k < k) fail(ErrorCode::kInvalidArgument, "candidate_k must be at least k");
  if (first != Modality::kImage && first != Modality::kLidar) fail(ErrorCode::kInvalidArgument, "rerank needs image or lidar first");
  const ModalityView& a = first == Modality::kImage ? corpus.image : corpus.lidar;
  const ModalityView& b = first == Modality::kImage ? corpus.lidar : corpus.image;
  RankedList candidates = top_k(q_first, a, candidate_k);
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < b.size(); ++i) position.emplace(*b.entries[i].id, i);
  RankedList second;
  second.reserve(candidates.size());
  for (const auto& c : candidates) second.push_back({c.id, score(q_second, b.entries[position.at(c.id)].vector)});
  return select_top(std::move(second), k);
}

// ---------------------------------------------------------------------------
// Joint queries

struct JointQuery {
  std::optional<PromptSet> image_prompts;
  std::optional<PromptSet> lidar_prompts;
  FusionStrategy strategy = FusionStrategy::kMeanFeature;
  std::size_t k = 10;
  std::size_t candidate_k = kDefaultCandidateK;
};

struct JointResult {
  std::string id;
  double fused_score = 0;
  std::optional<double> s_image;
  std::optional<double> s_lidar;
  std::size_t rank = 0;  // 1-based
};

/// Text query vectors for each modality (already ensembled).
struct QueryVectors {
  std::optional<std::vector<double>> image;
  std::optional<std::vector<double>> lidar;
};

namespace detail {

inline std::vector<double> unit(std::span<const double> v) {
  const double n = vec::norm(v);
  if (!(n > kDegenerateNorm)) fail(ErrorCode::kDegenerateEmbedding, "query vector has near-zero norm");
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

}  // namespace detail

/// Dispatches to the chosen strategy. Single-modality strategies need the
/// matching query; joint strategies need at least one and reuse it for the
/// other modality when only one is given. Feature fusion scores against the
/// mean of the unit-normalized queries.
inline std::vector<JointResult> joint_query(FusionStrategy strategy, const QueryVectors& queries,
                                            const EmbeddingStore& store, std::size_t k,
                                            std::size_t candidate_k = kDefaultCandidateK) {
  if (k == 0) fail(ErrorCode::kQuery, "k must be at least 1");
  std::vector<double> q_image, q_lidar;
  if (strategy == FusionStrategy::kImageOnly && !queries.image) fail(ErrorCode::kQuery, "image_only needs image prompts");
  if (strategy == FusionStrategy::kLidarOnly && !queries.lidar) fail(ErrorCode::kQuery, "lidar_only needs lidar prompts");
  if (!queries.image && !queries.lidar) fail(ErrorCode::kQuery, "query has no prompts");
  q_image = queries.image ? *queries.image : *queries.lidar;
  q_lidar = queries.lidar ? *queries.lidar : *queries.image;
  const bool rerank_strategy =
      strategy == FusionStrategy::kRerankImageFirst || strategy == FusionStrategy::kRerankLidarFirst;
  if (rerank_strategy && candidate_k < k) fail(ErrorCode::kQuery, "candidate_k must be at least k");

  RankedList ranked;
  if (strategy == FusionStrategy::kImageOnly) {
    ranked = top_k(q_image, store.view(Modality::kImage), k);
  } else if (strategy == FusionStrategy::kLidarOnly) {
    ranked = top_k(q_lidar, store.view(Modality::kLidar), k);
  } else {
    const JointCorpus jc = joint_corpus(store);
    switch (strategy) {
      case FusionStrategy::kMeanFeature:
      case FusionStrategy::kMeanNormFeature: {
        const auto kind = strategy == FusionStrategy::kMeanFeature ? FeatureFusion::kMean : FeatureFusion::kMeanNorm;
        std::vector<double> q = q_image;
        if (queries.image && queries.lidar) {
          auto a = detail::unit(q_image), b = detail::unit(q_lidar);
          for (std::size_t i = 0; i < q.size(); ++i) q[i] = 0.5 * (a[i] + b[i]);
        }
        RankedList scored;
        scored.reserve(jc.image.size());
        for (std::size_t i = 0; i < jc.image.size(); ++i) {
          auto fused = fuse_features(jc.image.entries[i].vector, jc.lidar.entries[i].vector, kind);
          scored.push_back({*jc.image.entries[i].id, score(std::span<const double>(q), std::span<const double>(fused))});
        }
        ranked = select_top(std::move(scored), k);
        break;
      }
      case FusionStrategy::kMeanScore: {
        RankedList scored;
        scored.reserve(jc.image.size());
        for (std::size_t i = 0; i < jc.image.size(); ++i) {
          scored.push_back({*jc.image.entries[i].id, fuse_scores(score(std::span<const double>(q_image), jc.image.entries[i].vector),
                                                                 score(std::span<const double>(q_lidar), jc.lidar.entries[i].vector))});
        }
        ranked = select_top(std::move(scored), k);
        break;
      }
      case FusionStrategy::kMeanRank: {
        auto fused = fuse_ranks(score_all(q_image, jc.image), score_all(q_lidar, jc.lidar));
        fused.resize(std::min(k, fused.size()));
        ranked = std::move(fused);
        break;
      }
      case FusionStrategy::kRerankImageFirst:
        ranked = rerank(Modality::kImage, q_image, q_lidar, jc, candidate_k, k);
        break;
      case FusionStrategy::kRerankLidarFirst:
        ranked = rerank(Modality::kLidar, q_lidar, q_image, jc, candidate_k, k);
        break;
      default:
        break;
    }
  }

  std::vector<JointResult> out;
  out.reserve(ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    JointResult r;
    r.id = ranked[i].id;
    r.fused_score = ranked[i].score;
    r.rank = i + 1;
    if (queries.image || strategy != FusionStrategy::kLidarOnly) {
      if (const auto* v = store.find(r.id, Modality::kImage)) r.s_image = score(std::span<const double>(q_image), std::span<const float>(*v));
    }
    if (queries.lidar || strategy != FusionStrategy::kImageOnly) {
      if (const auto* v = store.find(r.id, Modality::kLidar)) r.s_lidar = score(std::span<const double>(q_lidar), std::span<const float>(*v));
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<JointResult> joint_query(const JointQuery& q, const EmbeddingStore& store) {
  QueryVectors qv;
  if (q.image_prompts) qv.image = ensemble(*q.image_prompts);
  if (q.lidar_prompts) qv.lidar = ensemble(*q.lidar_prompts);
  return joint_query(q.strategy, qv, store, q.k, q.candidate_k);
}

inline RankedList to_ranked_list(const std::vector<JointResult>& results) {
  RankedList out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back({r.id, r.fused_score});
  return out;
}

inline nlohmann::json to_json(const JointResult& r) {
  nlohmann::json j{{"id", r.id}, {"fused_score", r.fused_score}, {"rank", r.rank}};
  if (r.s_image) j["s_image"] = *r.s_image;
  if (r.s_lidar) j["s_lidar"] = *r.s_lidar;
  return j;
}

}  // namespace lidarclip
