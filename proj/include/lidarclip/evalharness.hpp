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

// Retrieval evaluation: ground truth from box annotations, precision at K
// and ablation reports.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "lidarclip/binary_io.hpp"
#include "lidarclip/error.hpp"
#include "lidarclip/fusion.hpp"
#include "lidarclip/retrieval.hpp"

namespace lidarclip {

inline constexpr std::array<std::string_view, 5> kObjectCategories = {"Car", "Truck", "Bus", "Pedestrian", "Cyclist"};
inline constexpr double kDefaultNearbyThreshold = 15.0;

struct Box {
  std::string category;
  std::array<double, 3> center{};  // camera-frustum frame, meters
};

struct Annotation {
  std::string sample_id;
  std::vector<Box> boxes;
  std::optional<std::string> period;   // "day" | "night"
  std::optional<std::string> weather;  // "sunny" | "rainy"
};

inline bool is_known_category(std::string_view c) {
  return std::find(kObjectCategories.begin(), kObjectCategories.end(), c) != kObjectCategories.end();
}

inline Annotation annotation_from_json(const nlohmann::json& j) {
  Annotation a;
  try {
    a.sample_id = j.at("sample_id").get<std::string>();
    if (j.contains("boxes")) {
      for (const auto& b : j.at("boxes")) {
        Box box;
        box.category = b.at("category").get<std::string>();
        box.center = b.at("center").get<std::array<double, 3>>();
        a.boxes.push_back(std::move(box));
      }
    }
    if (j.contains("meta")) {
      const auto& m = j.at("meta");
      if (m.contains("period") && !m.at("period").is_null()) a.period = m.at("period").get<std::string>();
      if (m.contains("weather") && !m.at("weather").is_null()) a.weather = m.at("weather").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed annotation: ") + e.what());
  }
  if (a.sample_id.empty()) fail(ErrorCode::kFormat, "annotation has an empty sample_id");
  for (const auto& b : a.boxes) {
    if (!is_known_category(b.category)) fail(ErrorCode::kFormat, "unknown category '" + b.category + "' in " + a.sample_id);
    for (double c : b.center) {
      if (!std::isfinite(c)) fail(ErrorCode::kFormat, "non-finite box center in " + a.sample_id);
    }
  }
  if (a.period && *a.period != "day" && *a.period != "night") fail(ErrorCode::kFormat, "unknown period '" + *a.period + "'");
  if (a.weather && *a.weather != "sunny" && *a.weather != "rainy") fail(ErrorCode::kFormat, "unknown weather '" + *a.weather + "'");
  return a;
}

inline nlohmann::json to_json(const Annotation& a) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : a.boxes) boxes.push_back({{"category", b.category}, {"center", b.center}});
  nlohmann::json meta = nlohmann::json::object();
  if (a.period) meta["period"] = *a.period;
  if (a.weather) meta["weather"] = *a.weather;
  return {{"sample_id", a.sample_id}, {"boxes", boxes}, {"meta", meta}};
}

/// One annotation per non-blank line.
inline std::vector<Annotation> parse_annotations_jsonl(std::string_view text) {
  std::vector<Annotation> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    std::string_view line = text.substr(start, end - start);
    if (line.find_first_not_of(" \t\r") != std::string_view::npos) {
      try {
        out.push_back(annotation_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::kFormat, "annotation line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    start = end + 1;
  }
  return out;
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  return parse_annotations_jsonl(io::read_text_file(path));
}

struct GroundTruth {
  std::vector<std::string> corpus;                        // sample ids, ascending
  std::map<std::string, std::set<std::string>> positives;  // label -> ids

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& [label, _] : positives) out.push_back(label);
    return out;
  }

  double prevalence(const std::string& label) const {
    auto it = positives.find(label);
    if (it == positives.end() || corpus.empty()) return 0.0;
    return static_cast<double>(it->second.size()) / static_cast<double>(corpus.size());
  }
};

inline std::string nearby_label(std::string_view category) { return "nearby " + std::string(category); }

struct GroundTruthOptions {
  double nearby_threshold = kDefaultNearbyThreshold;
  bool allow_any_threshold = false;  // bypasses the [10, 25] m sanity range
};

/// Object labels ("Car", ...) are positive when the sample has at least one
/// such box; "nearby <class>" needs a box whose ground-plane distance
/// sqrt(x^2 + z^2) is strictly below the threshold. Condition labels come
/// from the metadata.
inline GroundTruth build_ground_truth(const std::vector<Annotation>& annotations, GroundTruthOptions opts = {}) {
  if (!opts.allow_any_threshold && !(opts.nearby_threshold >= 10.0 && opts.nearby_threshold <= 25.0)) {
    fail(ErrorCode::kInvalidArgument, "nearby threshold must lie in [10, 25] m");
  }
  GroundTruth gt;
  for (auto c : kObjectCategories) {
    gt.positives[std::string(c)];
    gt.positives[nearby_label(c)];
  }
  std::set<std::string> corpus;
  for (const auto& a : annotations) {
    if (!corpus.insert(a.sample_id).second) fail(ErrorCode::kFormat, "duplicate annotation for '" + a.sample_id + "'");
    for (const auto& b : a.boxes) {
      if (!is_known_category(b.category)) fail(ErrorCode::kFormat, "unknown category '" + b.category + "'");
      gt.positives[b.category].insert(a.sample_id);
      if (std::hypot(b.center[0], b.center[2]) < opts.nearby_threshold) gt.positives[nearby_label(b.category)].insert(a.sample_id);
    }
    if (a.period) gt.positives[*a.period].insert(a.sample_id);
    if (a.weather) gt.positives[*a.weather].insert(a.sample_id);
  }
  gt.corpus.assign(corpus.begin(), corpus.end());
  return gt;
}

/// |top-min(k, n) ∩ positives| / min(k, n). An empty ranking has no
/// defined precision and raises instead of returning 0.
template <typename Set>
double precision_at_k(const RankedList& ranked, const Set& positives, std::size_t k) {
  if (k == 0) fail(ErrorCode::kInvalidArgument, "precision_at_k: k must be at least 1");
  if (ranked.empty()) fail(ErrorCode::kInvalidArgument, "precision_at_k: empty ranking");
  const std::size_t n = std::min(k, ranked.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) hits += positives.count(ranked[i].id) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportSchemaVersion = 1;

struct MetricRow {
  std::string label;
  std::string method;
  std::size_t k = 0;
  double precision = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;  // ordered by (label, method, k)
  std::size_t corpus_size = 0;
  nlohmann::json config;        // whatever produced the report (seeds, sizes, ...)

  std::optional<double> find(const std::string& label, const std::string& method, std::size_t k) const {
    for (const auto& r : rows) {
      if (r.label == label && r.method == method && r.k == k) return r.precision;
    }
    return std::nullopt;
  }

  /// Average over labels for one (method, k).
  double mean(const std::string& method, std::size_t k) const {
    double s = 0;
    int n = 0;
    for (const auto& r : rows) {
      if (r.method == method && r.k == k) {
        s += r.precision;
        ++n;
      }
    }
    if (n == 0) fail(ErrorCode::kNotFound, "no rows for method '" + method + "' at k=" + std::to_string(k));
    return s / n;
  }

  std::vector<std::string> methods() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    }
    return out;
  }

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
      if (std::find(out.begin(), out.end(), r.label) == out.end()) out.push_back(r.label);
    }
    return out;
  }

  std::vector<std::size_t> ks() const {
    std::set<std::size_t> s;
    for (const auto& r : rows) s.insert(r.k);
    return {s.begin(), s.end()};
  }

  std::string config_digest() const { return io::hex64(io::fnv1a64(config.dump())); }

  /// Digest over configuration and every value; identical runs produce
  /// identical digests.
  std::string digest() const {
    nlohmann::json j = to_json_without_digest();
    return io::hex64(io::fnv1a64(j.dump()));
  }

  nlohmann::json to_json_without_digest() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) rows_json.push_back({{"label", r.label}, {"method", r.method}, {"k", r.k}, {"precision", r.precision}});
    return {{"schema_version", kReportSchemaVersion}, {"corpus_size", corpus_size}, {"config", config},
            {"config_digest", config_digest()}, {"rows", rows_json}};
  }

  nlohmann::json to_json() const {
    auto j = to_json_without_digest();
    j["digest"] = digest();
    return j;
  }
};

/// Aligned text table: one row per method, P@k columns per label plus the
/// average over labels.
inline std::string render_table(const MetricReport& report) {
  const auto methods = report.methods();
  const auto labels = report.labels();
  const auto ks = report.ks();
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head1{""}, head2{"P@K"};
  for (const auto& l : labels) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      head1.push_back(i == 0 ? l : "");
      head2.push_back(std::to_string(ks[i]));
    }
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    head1.push_back(i == 0 ? "Avg." : "");
    head2.push_back(std::to_string(ks[i]));
  }
  cells.push_back(head1);
  cells.push_back(head2);
  char buf[32];
  for (const auto& m : methods) {
    std::vector<std::string> row{m};
    for (const auto& l : labels) {
      for (auto k : ks) {
        auto v = report.find(l, m, k);
        if (v) {
          std::snprintf(buf, sizeof(buf), "%.3f", *v);
          row.push_back(buf);
        } else {
          row.push_back("-");
        }
      }
    }
    for (auto k : ks) {
      std::snprintf(buf, sizeof(buf), "%.3f", report.mean(m, k));
      row.push_back(buf);
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      if (c) out << "  ";
      out << cells[r][c] << std::string(width[c] - cells[r][c].size(), ' ');
    }
    out << '\n';
    if (r == 1) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Fusion ablation over a stored corpus

struct AblationSpec {
  std::vector<FusionStrategy> methods;
  std::vector<std::string> labels;  // empty = every label in the ground truth
  std::vector<std::size_t> ks{1, 10, 100};
  std::size_t candidate_k = kDefaultCandidateK;
  nlohmann::json config = nlohmann::json::object();
};

/// Every (label x method x k) precision. Prompts for label L are the
/// "prompt:L:<i>" text embeddings in `prompts`, used for both modalities.
inline MetricReport run_ablation(const EmbeddingStore& corpus, const GroundTruth& gt, const EmbeddingStore& prompts,
                                 const AblationSpec& spec) {
  if (spec.methods.empty()) fail(ErrorCode::kInvalidArgument, "ablation needs at least one method");
  if (spec.ks.empty()) fail(ErrorCode::kInvalidArgument, "ablation needs at least one k");
  auto labels = spec.labels.empty() ? gt.labels() : spec.labels;
  std::sort(labels.begin(), labels.end());
  auto ks = spec.ks;
  std::sort(ks.begin(), ks.end());
  const std::size_t max_k = ks.back();

  MetricReport report;
  report.corpus_size = gt.corpus.size();
  report.config = spec.config;
  nlohmann::json methods = nlohmann::json::array();
  for (auto m : spec.methods) methods.push_back(std::string(to_string(m)));
  report.config["methods"] = methods;
  report.config["ks"] = ks;
  report.config["candidate_k"] = spec.candidate_k;

  std::vector<FusionStrategy> ordered = spec.methods;
  std::sort(ordered.begin(), ordered.end(), [](auto a, auto b) { return to_string(a) < to_string(b); });
  for (const auto& label : labels) {
    auto pos = gt.positives.find(label);
    if (pos == gt.positives.end()) fail(ErrorCode::kNotFound, "label '" + label + "' not in ground truth");
    const auto q = ensemble(prompt_set_from_store(prompts, label));
    QueryVectors qv{q, q};
    for (auto m : ordered) {
      const std::size_t cand = std::max(spec.candidate_k, max_k);
      auto ranked = to_ranked_list(joint_query(m, qv, corpus, max_k, cand));
      for (auto k : ks) report.rows.push_back({label, std::string(to_string(m)), k, precision_at_k(ranked, pos->second, k)});
    }
  }
  return report;
}

}  // namespace lidarclip
