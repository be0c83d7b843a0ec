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

// HTTP/JSON API under /v1. Handlers are plain functions of an immutable
// corpus snapshot and the request body; the Server class only does routing
// and the atomic snapshot swap on ingest.
//
//   GET  /v1/health
//   GET  /v1/samples?offset=&limit=
//   GET  /v1/samples/{id}
//   POST /v1/query
//   POST /v1/classify
//   POST /v1/ingest        multipart: store (LCEB), annotations (JSONL), cloud (LCPC)
//
// Errors are {"code": ..., "message": ...} with 400, 404, 422 or 503.

#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lidarclip/error.hpp"
#include "lidarclip/evalharness.hpp"
#include "lidarclip/fusion.hpp"
#include "lidarclip/geometry.hpp"
#include "lidarclip/retrieval.hpp"
#include "lidarclip/store.hpp"

namespace lidarclip {

inline constexpr std::size_t kMaxQueryK = 1000;
inline constexpr std::size_t kMaxSamplePoints = 4096;
inline constexpr std::size_t kDefaultPageLimit = 50;
inline constexpr std::size_t kMaxPageLimit = 1000;

// ---------------------------------------------------------------------------
// Text embedders

class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  /// One text embedding per input, in order. kNotFound when a text cannot be
  /// embedded, kUnavailable when the backend is down.
  virtual std::vector<Embedding> embed(const std::vector<std::string>& texts) const = 0;
};

/// Looks texts up among the text entries of a store (ids are the texts).
class TableTextEmbedder : public TextEmbedder {
 public:
  explicit TableTextEmbedder(std::shared_ptr<const EmbeddingStore> table) : table_(std::move(table)) {}

  std::vector<Embedding> embed(const std::vector<std::string>& texts) const override {
    std::vector<Embedding> out;
    for (const auto& t : texts) {
      const auto* v = table_ ? table_->find(t, Modality::kText) : nullptr;
      if (!v) fail(ErrorCode::kNotFound, "no text embedding for '" + t + "'");
      out.push_back({t, Modality::kText, *v});
    }
    return out;
  }

 private:
  std::shared_ptr<const EmbeddingStore> table_;
};

/// Delegates to a sidecar speaking
///   POST /embed {"texts": [...]} -> {"embeddings": [[...], ...]}
class RemoteTextEmbedder : public TextEmbedder {
 public:
  RemoteTextEmbedder(std::string base_url, std::uint32_t expected_dim, int timeout_s = 10)
      : base_url_(std::move(base_url)), dim_(expected_dim), timeout_s_(timeout_s) {}

  std::vector<Embedding> embed(const std::vector<std::string>& texts) const override {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(timeout_s_);
    cli.set_read_timeout(timeout_s_);
    const nlohmann::json req{{"texts", texts}};
    auto res = cli.Post("/embed", req.dump(), "application/json");
    if (!res) fail(ErrorCode::kUnavailable, "text embedder at " + base_url_ + " unreachable: " + httplib::to_string(res.error()));
    if (res->status != 200) fail(ErrorCode::kUnavailable, "text embedder returned HTTP " + std::to_string(res->status));
    std::vector<std::vector<float>> vecs;
    try {
      vecs = nlohmann::json::parse(res->body).at("embeddings").get<std::vector<std::vector<float>>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kUnavailable, std::string("malformed /embed response: ") + e.what());
    }
    if (vecs.size() != texts.size()) fail(ErrorCode::kUnavailable, "/embed returned the wrong number of embeddings");
    std::vector<Embedding> out;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (dim_ != 0 && vecs[i].size() != dim_) {
        fail(ErrorCode::kUnavailable, "/embed dimension " + std::to_string(vecs[i].size()) + " differs from store dimension " +
                                          std::to_string(dim_));
      }
      out.push_back({texts[i], Modality::kText, std::move(vecs[i])});
    }
    return out;
  }

 private:
  std::string base_url_;
  std::uint32_t dim_;
  int timeout_s_;
};

// ---------------------------------------------------------------------------
// Snapshot and handlers

struct Snapshot {
  EmbeddingStore store;                       // image, lidar and text entries
  std::map<std::string, PointCloud> clouds;   // sample id -> cloud
  std::map<std::string, Annotation> annotations;

  std::vector<std::string> sample_ids() const {
    std::set<std::string> ids;
    for (const auto& id : store.ids()) ids.insert(id);
    for (const auto& [id, _] : clouds) ids.insert(id);
    for (const auto& [id, _] : annotations) ids.insert(id);
    return {ids.begin(), ids.end()};
  }
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kUnavailable: return 503;
    default: return 400;
  }
}

inline ApiResponse error_response(int status, std::string_view code, const std::string& message) {
  return {status, {{"code", code}, {"message", message}}};
}

inline ApiResponse error_response(const Error& e) { return error_response(http_status(e.code()), to_string(e.code()), e.what()); }

/// Text vectors for a prompt list. A string naming a label with stored
/// templates ("prompt:<label>:<i>") expands to those templates; anything
/// else goes through the embedder as free text. Unresolvable prompts are
/// reported as 422.
inline PromptSet resolve_prompts(const std::vector<std::string>& prompts, const Snapshot& snap,
                                 const TextEmbedder& embedder, const std::string& name) {
  if (prompts.empty()) fail(ErrorCode::kQuery, "prompt list for " + name + " is empty");
  PromptSet ps{name, {}};
  std::vector<std::string> free_text;
  for (const auto& p : prompts) {
    if (snap.store.contains(prompt_key(p, 0), Modality::kText)) {
      auto set = prompt_set_from_store(snap.store, p);
      for (auto& t : set.templates) ps.templates.push_back(std::move(t));
    } else {
      free_text.push_back(p);
    }
  }
  if (!free_text.empty()) {
    for (auto& e : embedder.embed(free_text)) ps.templates.push_back(std::move(e.vector));
  }
  return ps;
}

namespace detail {

inline std::vector<std::string> string_list(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) fail(ErrorCode::kQuery, what + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& s : j) {
    if (!s.is_string()) fail(ErrorCode::kQuery, what + " must be an array of strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

inline std::size_t positive_int(const nlohmann::json& j, const std::string& what) {
  if (!j.is_number_integer() || j.get<long long>() < 1) fail(ErrorCode::kQuery, what + " must be a positive integer");
  return j.get<std::size_t>();
}

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// POST /v1/query body. Without `timing` the response is a pure function of
/// (snapshot, body).
inline ApiResponse handle_query(const Snapshot& snap, const TextEmbedder& embedder, const nlohmann::json& body,
                                bool timing = true) {
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<FusionStrategy> strategy;
  std::size_t k = 10, candidate_k = kDefaultCandidateK;
  std::optional<std::vector<std::string>> image_prompts, lidar_prompts;
  try {
    if (!body.is_object()) fail(ErrorCode::kQuery, "request body must be a JSON object");
    if (!body.contains("strategy") || !body["strategy"].is_string()) fail(ErrorCode::kQuery, "missing strategy");
    strategy = parse_strategy(body["strategy"].get<std::string>());
    if (!strategy) fail(ErrorCode::kQuery, "unknown strategy '" + body["strategy"].get<std::string>() + "'");
    if (body.contains("k")) k = detail::positive_int(body["k"], "k");
    if (k > kMaxQueryK) fail(ErrorCode::kQuery, "k must be at most " + std::to_string(kMaxQueryK));
    if (body.contains("candidate_k") && !body["candidate_k"].is_null()) {
      candidate_k = detail::positive_int(body["candidate_k"], "candidate_k");
    }
    const auto prompts = body.value("prompts", nlohmann::json::object());
    if (!prompts.is_object()) fail(ErrorCode::kQuery, "prompts must be an object");
    if (prompts.contains("image") && !prompts["image"].is_null()) image_prompts = detail::string_list(prompts["image"], "prompts.image");
    if (prompts.contains("lidar") && !prompts["lidar"].is_null()) lidar_prompts = detail::string_list(prompts["lidar"], "prompts.lidar");
    if (*strategy == FusionStrategy::kImageOnly && !image_prompts) fail(ErrorCode::kQuery, "image_only needs image prompts");
    if (*strategy == FusionStrategy::kLidarOnly && !lidar_prompts) fail(ErrorCode::kQuery, "lidar_only needs lidar prompts");
    if (!image_prompts && !lidar_prompts) fail(ErrorCode::kQuery, "query has no prompts");
  } catch (const Error& e) {
    return error_response(400, to_string(e.code()), e.what());
  }

  QueryVectors qv;
  try {
    if (image_prompts) qv.image = ensemble(resolve_prompts(*image_prompts, snap, embedder, "image"));
    if (lidar_prompts) qv.lidar = ensemble(resolve_prompts(*lidar_prompts, snap, embedder, "lidar"));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotFound) return error_response(422, "prompt_not_found", e.what());
    return error_response(e);
  }
  try {
    // Rerank needs candidate_k >= k; clamp silently only when the client
    // left it at the default.
    const bool explicit_cand = body.contains("candidate_k") && !body["candidate_k"].is_null();
    if (!explicit_cand) candidate_k = std::max(candidate_k, k);
    const auto results = joint_query(*strategy, qv, snap.store, k, candidate_k);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : results) arr.push_back(to_json(r));
    nlohmann::json out{{"results", arr}, {"strategy", to_string(*strategy)}, {"k", k}};
    if (timing) {
      out["timing_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    return {200, out};
  } catch (const Error& e) {
    return error_response(e);
  }
}

/// POST /v1/classify {sample_id, classes: [{name, prompts}], temperature?, modality?}
inline ApiResponse handle_classify(const Snapshot& snap, const TextEmbedder& embedder, const nlohmann::json& body) {
  std::string sample_id;
  Modality modality = Modality::kLidar;
  double temperature = kDefaultTemperature;
  std::vector<std::pair<std::string, std::vector<std::string>>> classes;
  try {
    if (!body.is_object() || !body.contains("sample_id") || !body["sample_id"].is_string()) {
      fail(ErrorCode::kQuery, "missing sample_id");
    }
    sample_id = body["sample_id"].get<std::string>();
    if (body.contains("modality")) {
      const auto m = parse_modality(body["modality"].get<std::string>());
      if (!m || *m == Modality::kText) fail(ErrorCode::kQuery, "modality must be image or lidar");
      modality = *m;
    }
    if (body.contains("temperature")) {
      if (!body["temperature"].is_number()) fail(ErrorCode::kQuery, "temperature must be a number");
      temperature = body["temperature"].get<double>();
    }
    if (!body.contains("classes") || !body["classes"].is_array()) fail(ErrorCode::kQuery, "classes must be an array");
    for (const auto& c : body["classes"]) {
      if (!c.is_object() || !c.contains("name") || !c["name"].is_string()) fail(ErrorCode::kQuery, "class needs a name");
      classes.emplace_back(c["name"].get<std::string>(), detail::string_list(c.value("prompts", nlohmann::json()), "class prompts"));
    }
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, "query", e.what());
  } catch (const Error& e) {
    return error_response(400, to_string(e.code()), e.what());
  }
  const auto* z = snap.store.find(sample_id, modality);
  if (!z) return error_response(404, "not_found", "no " + std::string(to_string(modality)) + " embedding for '" + sample_id + "'");
  std::vector<PromptSet> sets;
  try {
    for (const auto& [name, prompts] : classes) {
      auto ps = resolve_prompts(prompts, snap, embedder, name);
      sets.push_back(std::move(ps));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNotFound) return error_response(422, "prompt_not_found", e.what());
    return error_response(e);
  }
  try {
    const auto probs = zero_shot_classify(std::span<const float>(*z), sets, temperature);
    nlohmann::json p = nlohmann::json::object();
    for (std::size_t i = 0; i < sets.size(); ++i) p[sets[i].name] = probs[i];
    return {200, {{"sample_id", sample_id}, {"modality", to_string(modality)}, {"probs", p}}};
  } catch (const Error& e) {
    return error_response(400, to_string(e.code()), e.what());
  }
}

/// Indices kept when showing n points: every stride-th point with
/// stride = ceil(n / max_points), so at most max_points survive.
inline std::vector<std::size_t> downsample_indices(std::size_t n, std::size_t max_points = kMaxSamplePoints) {
  std::vector<std::size_t> out;
  if (n == 0) return out;
  const std::size_t stride = (n + max_points - 1) / max_points;
  for (std::size_t i = 0; i < n; i += stride) out.push_back(i);
  return out;
}

inline nlohmann::json sample_summary(const Snapshot& snap, const std::string& id) {
  nlohmann::json mods = nlohmann::json::array();
  for (Modality m : {Modality::kImage, Modality::kLidar}) {
    if (snap.store.contains(id, m)) mods.push_back(to_string(m));
  }
  nlohmann::json j{{"id", id}, {"modalities", mods}, {"has_cloud", snap.clouds.count(id) == 1}};
  if (auto it = snap.annotations.find(id); it != snap.annotations.end()) j["meta"] = to_json(it->second);
  return j;
}

inline ApiResponse handle_sample_get(const Snapshot& snap, const std::string& id) {
  const bool known = snap.store.contains(id, Modality::kImage) || snap.store.contains(id, Modality::kLidar) ||
                     snap.clouds.count(id) || snap.annotations.count(id);
  if (!known) return error_response(404, "not_found", "unknown sample '" + id + "'");
  auto j = sample_summary(snap, id);
  if (auto it = snap.clouds.find(id); it != snap.clouds.end()) {
    const auto& pts = it->second.points;
    nlohmann::json arr = nlohmann::json::array();
    for (auto i : downsample_indices(pts.size())) arr.push_back({pts[i].x, pts[i].y, pts[i].z, pts[i].intensity});
    j["points"] = arr;
    j["total_points"] = pts.size();
  }
  return {200, j};
}

inline ApiResponse handle_sample_list(const Snapshot& snap, std::size_t offset, std::size_t limit) {
  if (limit == 0 || limit > kMaxPageLimit) {
    return error_response(400, "query", "limit must lie in [1, " + std::to_string(kMaxPageLimit) + "]");
  }
  const auto ids = snap.sample_ids();
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = offset; i < ids.size() && i < offset + limit; ++i) arr.push_back(sample_summary(snap, ids[i]));
  return {200, {{"total", ids.size()}, {"offset", offset}, {"limit", limit}, {"samples", arr}}};
}

inline ApiResponse handle_health(const Snapshot& snap) {
  return {200,
          {{"status", "ok"},
           {"dim", snap.store.dim()},
           {"samples", snap.sample_ids().size()},
           {"image", snap.store.view(Modality::kImage).size()},
           {"lidar", snap.store.view(Modality::kLidar).size()},
           {"text", snap.store.view(Modality::kText).size()}}};
}

struct IngestPart {
  std::string field;     // "store" | "annotations" | "cloud"
  std::string filename;  // cloud parts: sample id is the file stem
  std::string content;
};

/// Builds the next snapshot from `base` plus the uploaded parts. The whole
/// upload is validated before anything becomes visible.
inline Snapshot apply_ingest(const Snapshot& base, const std::vector<IngestPart>& parts, nlohmann::json& summary) {
  Snapshot next = base;
  std::size_t embeddings = 0, annotations = 0, clouds = 0;
  for (const auto& p : parts) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(p.content.data());
    if (p.field == "store") {
      auto s = decode_store({bytes, p.content.size()});
      if (next.store.dim() != 0 && s.dim() != 0 && s.dim() != next.store.dim()) {
        fail(ErrorCode::kDimensionMismatch, "uploaded store has dimension " + std::to_string(s.dim()) + ", corpus has " +
                                                std::to_string(next.store.dim()));
      }
      next.store.merge(s);
      embeddings += s.size();
    } else if (p.field == "annotations") {
      for (auto& a : parse_annotations_jsonl(p.content)) {
        next.annotations[a.sample_id] = std::move(a);
        ++annotations;
      }
    } else if (p.field == "cloud") {
      std::string id = p.filename;
      if (auto slash = id.find_last_of("/\\"); slash != std::string::npos) id = id.substr(slash + 1);
      if (auto dot = id.rfind('.'); dot != std::string::npos && dot > 0) id = id.substr(0, dot);
      if (id.empty()) fail(ErrorCode::kInvalidArgument, "cloud upload needs a filename naming the sample");
      next.clouds[id] = decode_point_cloud({bytes, p.content.size()});
      ++clouds;
    } else {
      fail(ErrorCode::kInvalidArgument, "unknown upload field '" + p.field + "'");
    }
  }
  summary = {{"embeddings", embeddings}, {"annotations", annotations}, {"clouds", clouds}};
  return next;
}

// ---------------------------------------------------------------------------
// Server

class Server {
 public:
  Server(Snapshot initial, std::shared_ptr<const TextEmbedder> embedder)
      : snapshot_(std::make_shared<const Snapshot>(std::move(initial))), embedder_(std::move(embedder)) {
    routes();
  }

  std::shared_ptr<const Snapshot> snapshot() const {
    std::lock_guard lock(snap_mu_);
    return snapshot_;
  }

  /// Binds to an ephemeral port on `host` and returns it; call run() next.
  int bind_any(const std::string& host = "127.0.0.1") { return http_.bind_to_any_port(host); }
  bool bind(const std::string& host, int port) { return http_.bind_to_port(host, port); }
  bool run() { return http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  bool running() const { return http_.is_running(); }
  void wait_until_ready() const { http_.wait_until_ready(); }

 private:
  static void reply(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  static std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
    try {
      return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error& e) {
      reply(res, error_response(400, "format", std::string("request body is not JSON: ") + e.what()));
      return std::nullopt;
    }
  }

  void routes() {
    http_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { reply(res, handle_health(*snapshot())); });
    http_.Get("/v1/samples", [this](const httplib::Request& req, httplib::Response& res) {
      std::size_t offset = 0, limit = kDefaultPageLimit;
      try {
        if (req.has_param("offset")) offset = std::stoull(req.get_param_value("offset"));
        if (req.has_param("limit")) limit = std::stoull(req.get_param_value("limit"));
      } catch (const std::logic_error&) {
        return reply(res, error_response(400, "query", "offset and limit must be non-negative integers"));
      }
      reply(res, handle_sample_list(*snapshot(), offset, limit));
    });
    http_.Get(R"(/v1/samples/(.+))", [this](const httplib::Request& req, httplib::Response& res) {
      reply(res, handle_sample_get(*snapshot(), req.matches[1].str()));
    });
    http_.Post("/v1/query", [this](const httplib::Request& req, httplib::Response& res) {
      auto body = parse_body(req, res);
      if (body) reply(res, handle_query(*snapshot(), *embedder_, *body));
    });
    http_.Post("/v1/classify", [this](const httplib::Request& req, httplib::Response& res) {
      auto body = parse_body(req, res);
      if (body) reply(res, handle_classify(*snapshot(), *embedder_, *body));
    });
    http_.Post("/v1/ingest", [this](const httplib::Request& req, httplib::Response& res) {
      if (!req.is_multipart_form_data()) return reply(res, error_response(400, "format", "ingest expects multipart/form-data"));
      std::vector<IngestPart> parts;
      for (const auto& [name, file] : req.files) parts.push_back({name, file.filename, file.content});
      // Ingests are serialized; readers keep using the old snapshot until the swap.
      std::lock_guard ingest_lock(ingest_mu_);
      try {
        nlohmann::json summary;
        auto next = std::make_shared<const Snapshot>(apply_ingest(*snapshot(), parts, summary));
        {
          std::lock_guard lock(snap_mu_);
          snapshot_ = std::move(next);
        }
        reply(res, {200, {{"ingested", summary}}});
      } catch (const Error& e) {
        reply(res, error_response(e));
      }
    });
    http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string msg = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      reply(res, error_response(500, "internal", msg));
    });
  }

  httplib::Server http_;
  mutable std::mutex snap_mu_;
  std::mutex ingest_mu_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::shared_ptr<const TextEmbedder> embedder_;
};

}  // namespace lidarclip
