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

// Single-modality retrieval: prompt ensembling, cosine scoring, exact top-k
// and zero-shot classification.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lidarclip/embedding.hpp"
#include "lidarclip/error.hpp"
#include "lidarclip/store.hpp"

namespace lidarclip {

inline constexpr double kDegenerateNorm = 1e-9;
inline constexpr double kDefaultTemperature = 100.0;

struct PromptSet {
  std::string name;
  std::vector<std::vector<float>> templates;  // one text embedding per template
};

struct ScoredSample {
  std::string id;
  double score = 0;

  bool operator==(const ScoredSample&) const = default;
};

using RankedList = std::vector<ScoredSample>;

/// Descending score, ascending id on ties.
inline bool ranks_before(const ScoredSample& a, const ScoredSample& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.id < b.id;
}

/// Mean of the unit-normalized template embeddings. The mean is not
/// renormalized; cosine rankings are unaffected by its length.
inline std::vector<double> ensemble(const PromptSet& prompts) {
  if (prompts.templates.empty()) fail(ErrorCode::kInvalidArgument, "prompt set '" + prompts.name + "' is empty");
  const std::size_t d = prompts.templates.front().size();
  std::vector<double> mean(d, 0.0);
  for (const auto& t : prompts.templates) {
    if (t.size() != d) fail(ErrorCode::kDimensionMismatch, "prompt set '" + prompts.name + "' mixes dimensions");
    const double n = vec::norm(std::span<const float>(t));
    if (!(n > kDegenerateNorm)) fail(ErrorCode::kDegenerateEmbedding, "zero-norm template in '" + prompts.name + "'");
    for (std::size_t i = 0; i < d; ++i) mean[i] += static_cast<double>(t[i]) / n;
  }
  for (double& v : mean) v /= static_cast<double>(prompts.templates.size());
  if (!(vec::norm(std::span<const double>(mean)) >= kDegenerateNorm)) {
    fail(ErrorCode::kDegenerateEnsemble, "prompt ensemble '" + prompts.name + "' cancels to zero");
  }
  return mean;
}

/// Cosine similarity with 64-bit accumulation.
template <typename A, typename B>
double score(std::span<const A> query, std::span<const B> sample) {
  if (query.size() != sample.size()) fail(ErrorCode::kDimensionMismatch, "query and sample dimensions differ");
  double qq = 0, ss = 0, qs = 0;
  for (std::size_t i = 0; i < query.size(); ++i) {
    const double q = query[i], s = sample[i];
    qq += q * q;
    ss += s * s;
    qs += q * s;
  }
  const double nq = std::sqrt(qq), ns = std::sqrt(ss);
  if (!(nq > kDegenerateNorm) || !(ns > kDegenerateNorm)) {
    fail(ErrorCode::kDegenerateEmbedding, "cosine similarity of a near-zero vector");
  }
  return std::clamp(qs / (nq * ns), -1.0, 1.0);
}

/// Scores every entry of the view (in view order).
inline RankedList score_all(std::span<const double> query, const ModalityView& corpus) {
  RankedList out;
  out.reserve(corpus.size());
  for (const auto& e : corpus.entries) out.push_back({*e.id, score(query, e.vector)});
  return out;
}

/// Keeps the best k of `scored` in rank order.
inline RankedList select_top(RankedList scored, std::size_t k) {
  const std::size_t keep = std::min(k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(), ranks_before);
  scored.resize(keep);
  return scored;
}

/// Exact k best samples by cosine score; k larger than the corpus returns
/// the full ranking, an empty corpus returns an empty list.
inline RankedList top_k(std::span<const double> query, const ModalityView& corpus, std::size_t k) {
  if (k == 0) fail(ErrorCode::kInvalidArgument, "k must be at least 1");
  return select_top(score_all(query, corpus), k);
}

/// softmax(temperature * cosine(ensemble_k, z)) over the K classes.
template <typename A>
std::vector<double> zero_shot_classify(std::span<const A> z, const std::vector<PromptSet>& classes,
                                       double temperature = kDefaultTemperature) {
  if (classes.size() < 2) fail(ErrorCode::kInvalidArgument, "zero-shot classification needs at least two classes");
  std::set<std::string> names;
  for (const auto& c : classes) {
    if (!names.insert(c.name).second) fail(ErrorCode::kInvalidArgument, "duplicate class name '" + c.name + "'");
  }
  if (!(temperature > 0) || !std::isfinite(temperature)) fail(ErrorCode::kInvalidArgument, "temperature must be positive");
  std::vector<double> logits;
  logits.reserve(classes.size());
  for (const auto& c : classes) {
    auto q = ensemble(c);
    logits.push_back(temperature * score(std::span<const double>(q), z));
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0;
  for (double& l : logits) sum += (l = std::exp(l - mx));
  for (double& l : logits) l /= sum;
  return logits;
}

// ---------------------------------------------------------------------------
// Prompt tables: {label: [template strings]} plus text embeddings stored as
// "prompt:<label>:<index>".

inline std::string prompt_key(const std::string& label, std::size_t index) {
  return "prompt:" + label + ":" + std::to_string(index);
}

/// Collects "prompt:<label>:<i>" text embeddings for i = 0, 1, ... until
/// the first gap. Throws kNotFound when the label has no templates.
inline PromptSet prompt_set_from_store(const EmbeddingStore& store, const std::string& label) {
  PromptSet ps{label, {}};
  for (std::size_t i = 0;; ++i) {
    const auto* v = store.find(prompt_key(label, i), Modality::kText);
    if (!v) break;
    ps.templates.push_back(*v);
  }
  if (ps.templates.empty()) fail(ErrorCode::kNotFound, "no prompt embeddings for label '" + label + "'");
  return ps;
}

/// Labels with at least one "prompt:<label>:0" entry, ascending.
inline std::vector<std::string> prompt_labels(const EmbeddingStore& store) {
  std::vector<std::string> out;
  for (const auto& [key, _] : store.entries()) {
    if (key.second != Modality::kText || !key.first.starts_with("prompt:")) continue;
    const auto last = key.first.rfind(':');
    if (last <= 7 || key.first.substr(last + 1) != "0") continue;
    out.push_back(key.first.substr(7, last - 7));
  }
  return out;
}

struct PromptTable {
  std::map<std::string, std::vector<std::string>> templates;  // label -> template strings
};

inline PromptTable prompt_table_from_json(const nlohmann::json& j) {
  PromptTable t;
  try {
    for (const auto& [label, list] : j.items()) t.templates[label] = list.get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed prompt table: ") + e.what());
  }
  return t;
}

inline nlohmann::json to_json(const PromptTable& t) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [label, list] : t.templates) j[label] = list;
  return j;
}

inline nlohmann::json to_json(const RankedList& list) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : list) arr.push_back({{"id", s.id}, {"score", s.score}});
  return arr;
}

}  // namespace lidarclip
