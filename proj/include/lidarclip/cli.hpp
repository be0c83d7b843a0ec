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

// Command-line front end. Every subcommand is a thin shell over library
// calls; dispatch() is kept free of process-global state (except `serve`,
// which installs a SIGINT handler) so tests can drive it in-process.

#pragma once

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lidarclip/distill.hpp"
#include "lidarclip/encoder.hpp"
#include "lidarclip/error.hpp"
#include "lidarclip/evalharness.hpp"
#include "lidarclip/fusion.hpp"
#include "lidarclip/geometry.hpp"
#include "lidarclip/service.hpp"
#include "lidarclip/store.hpp"
#include "lidarclip/synthetic.hpp"

namespace lidarclip::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumericFailure = 3 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kQuery:
      return kUsage;
    case ErrorCode::kNumeric:
    case ErrorCode::kDegenerateEmbedding:
    case ErrorCode::kDegenerateEnsemble:
      return kNumericFailure;
    default:
      return kData;
  }
}

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// File helpers

/// LCPC, or a raw little-endian float32 x,y,z,intensity dump (".bin").
inline PointCloud read_cloud_any(const std::string& path) {
  if (fs::path(path).extension() != ".bin") return read_point_cloud(path);
  const auto bytes = io::read_file_bytes(path);
  if (bytes.size() % 16 != 0) fail(ErrorCode::kTruncated, path + ": raw cloud size is not a multiple of 16 bytes");
  PointCloud cloud;
  cloud.points.resize(bytes.size() / 16);
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    float f[4];
    std::memcpy(f, bytes.data() + 16 * i, sizeof f);
    cloud.points[i] = {f[0], f[1], f[2], f[3]};
  }
  return cloud;
}

/// Cloud files under `dir` (or `dir` itself when it is a file), sorted by path.
inline std::vector<fs::path> cloud_files(const std::string& dir) {
  if (!fs::exists(dir)) fail(ErrorCode::kIo, "no such file or directory: " + dir);
  if (!fs::is_directory(dir)) return {fs::path(dir)};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".lcpc" || ext == ".bin")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline EmbeddingStore read_stores(const std::vector<std::string>& paths) {
  EmbeddingStore merged;
  for (const auto& p : paths) {
    auto s = read_store(p);
    if (merged.dim() != 0 && s.dim() != 0 && s.dim() != merged.dim()) {
      fail(ErrorCode::kDimensionMismatch, p + ": dimension " + std::to_string(s.dim()) + " differs from " +
                                              std::to_string(merged.dim()));
    }
    if (merged.dim() == 0) merged = EmbeddingStore(s.dim());
    merged.merge(s);
  }
  return merged;
}

inline void write_text(const std::string& path, const std::string& text) {
  io::write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

/// "tiny" or "tiny:<d>" picks the preset; anything else is a JSON file.
inline EncoderConfig load_encoder_config(const std::string& spec, int d_out) {
  if (spec == "tiny") return EncoderConfig::tiny(d_out);
  if (spec.starts_with("tiny:")) return EncoderConfig::tiny(std::stoi(spec.substr(5)));
  return read_encoder_config(spec);
}

/// Encodes every grid; workers take interleaved indices, so the result does
/// not depend on the thread count.
inline std::vector<std::vector<float>> encode_all(const std::vector<VoxelGrid>& grids, const EncoderParams<float>& params,
                                                  const EncoderConfig& cfg, unsigned threads) {
  std::vector<std::vector<float>> out(grids.size());
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(grids.size())));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](unsigned w) {
    try {
      for (std::size_t i = w; i < grids.size(); i += workers) out[i] = encode(grids[i], params, cfg);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      ks.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      fail(ErrorCode::kInvalidArgument, "bad k '" + item + "' in --ks");
    }
  }
  if (ks.empty()) fail(ErrorCode::kInvalidArgument, "--ks is empty");
  return ks;
}

inline std::vector<FusionStrategy> parse_strategies(const std::vector<std::string>& names) {
  std::vector<FusionStrategy> out;
  for (const auto& n : names) {
    auto s = parse_strategy(n);
    if (!s) fail(ErrorCode::kInvalidArgument, "unknown strategy '" + n + "'");
    out.push_back(*s);
  }
  if (out.empty()) out.assign(kAllStrategies.begin(), kAllStrategies.end());
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand options

struct Globals {
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct IngestCloudOpts {
  std::string input, out, calib;
  double intensity_max = 0;  // 0 = already normalized
};

struct IngestEmbeddingsOpts {
  std::vector<std::string> inputs;
  std::string out;
};

struct TrainOpts {
  std::string pairs, synthetic, config = "tiny", out, log;
  long steps = 500;
  std::string loss = "mse";
  double max_lr = 1e-3, base_lr = 1e-5, final_lr = 1e-7, warmup = 0.1;
  std::size_t batch = 16;
};

struct EmbedOpts {
  std::string checkpoint, clouds, out;
};

struct QueryOpts {
  std::vector<std::string> stores;
  std::string modality, strategy, embedder_url;
  std::vector<std::string> labels, image_prompts, lidar_prompts;
  std::size_t k = 10;
  std::size_t candidate_k = 0;
};

struct EvalOpts {
  std::string synthetic, ablation = "fusion", format = "table", out;
  std::vector<std::string> stores, strategies, labels;
  std::string annotations;
  std::string ks = "1,10,100";
  double nearby = kDefaultNearbyThreshold;
  long steps = 0;  // loss ablation; 0 keeps the default
  std::vector<std::uint64_t> seeds;
};

struct ServeOpts {
  std::vector<std::string> stores;
  std::string clouds, annotations, embedder_url, host = "127.0.0.1";
  int port = 8080;
};

// ---------------------------------------------------------------------------
// Subcommands

inline int run_ingest_cloud(const IngestCloudOpts& o, std::ostream& out) {
  const auto calib = read_calibration(o.calib);
  const auto files = cloud_files(o.input);
  const bool to_dir = fs::is_directory(o.input);
  if (to_dir) fs::create_directories(o.out);
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& f : files) {
    auto cloud = read_cloud_any(f.string());
    if (o.intensity_max > 0) normalize_intensity(cloud, o.intensity_max);
    const auto cropped = frustum_crop_lidar(cloud, calib);
    const std::string dst = to_dir ? (fs::path(o.out) / (f.stem().string() + ".lcpc")).string() : o.out;
    write_point_cloud(cropped, dst);
    summary.push_back({{"input", f.string()}, {"output", dst}, {"points_in", cloud.size()}, {"points_kept", cropped.size()}});
  }
  out << summary.dump() << "\n";
  return kOk;
}

inline int run_ingest_embeddings(const IngestEmbeddingsOpts& o, std::ostream& out) {
  const auto merged = read_stores(o.inputs);
  write_store(merged, o.out);
  out << nlohmann::json{{"output", o.out},
                        {"dim", merged.dim()},
                        {"image", merged.view(Modality::kImage).size()},
                        {"lidar", merged.view(Modality::kLidar).size()},
                        {"text", merged.view(Modality::kText).size()}}
             .dump()
      << "\n";
  return kOk;
}

/// Pairs directory: image.lceb plus clouds/<sample id>.lcpc. Only ids with
/// both an image embedding and a cloud are used.
inline std::vector<TrainPair> load_pairs_dir(const std::string& dir, const EncoderConfig& enc) {
  const auto images = read_store((fs::path(dir) / "image.lceb").string());
  if (images.dim() != static_cast<std::uint32_t>(enc.d_out)) {
    fail(ErrorCode::kDimensionMismatch, "image embeddings have dimension " + std::to_string(images.dim()) +
                                            ", encoder d_out is " + std::to_string(enc.d_out));
  }
  std::vector<TrainPair> pairs;
  for (const auto& f : cloud_files((fs::path(dir) / "clouds").string())) {
    const auto* target = images.find(f.stem().string(), Modality::kImage);
    if (!target) continue;
    pairs.push_back({voxelize(read_cloud_any(f.string()), enc), *target});
  }
  if (pairs.empty()) fail(ErrorCode::kEmptyInput, dir + ": no sample has both an image embedding and a cloud");
  return pairs;
}

inline int run_train(const TrainOpts& o, const Globals& g, std::ostream& out) {
  if (o.pairs.empty() == o.synthetic.empty()) fail(ErrorCode::kInvalidArgument, "give exactly one of --pairs or --synthetic");
  std::vector<TrainPair> pairs;
  EncoderConfig enc;
  if (!o.synthetic.empty()) {
    const auto spec = parse_synthetic_spec(o.synthetic);
    enc = load_encoder_config(o.config, spec.embedding_dim());
    pairs = synthetic_pairs(generate_synthetic_corpus(spec), enc);
  } else {
    // The preset needs d_out; take it from the image store.
    int d = 8;
    if (o.config == "tiny") d = static_cast<int>(read_store((fs::path(o.pairs) / "image.lceb").string()).dim());
    enc = load_encoder_config(o.config, d);
    pairs = load_pairs_dir(o.pairs, enc);
  }
  TrainConfig cfg;
  cfg.total_steps = o.steps;
  cfg.loss = parse_loss_kind(o.loss);
  cfg.max_lr = o.max_lr;
  cfg.base_lr = o.base_lr;
  cfg.final_lr = o.final_lr;
  cfg.warmup_frac = o.warmup;
  cfg.batch_size = o.batch;
  cfg.seed = g.seed;
  cfg.threads = g.threads;

  auto params = init_params<float>(enc, g.seed);
  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log, std::ios::binary | std::ios::trunc);
    if (!log) fail(ErrorCode::kIo, "cannot write " + o.log);
  }
  const auto history = train<float>(std::span<const TrainPair>(pairs), params, enc, cfg, [&](const StepRecord& r) {
    if (log) log << to_json(r).dump() << "\n";
  });
  write_checkpoint(o.out, params, enc);
  nlohmann::json summary{{"checkpoint", o.out}, {"pairs", pairs.size()}, {"steps", history.size()},
                         {"parameters", params.values.size()}};
  if (!history.empty()) {
    summary["initial_loss"] = history.front().loss;
    summary["final_loss"] = history.back().loss;
  }
  out << summary.dump() << "\n";
  return kOk;
}

inline int run_embed(const EmbedOpts& o, const Globals& g, std::ostream& out) {
  const auto ck = read_checkpoint(o.checkpoint);
  std::vector<std::string> ids;
  std::vector<VoxelGrid> grids;
  for (const auto& f : cloud_files(o.clouds)) {
    ids.push_back(f.stem().string());
    grids.push_back(voxelize(read_cloud_any(f.string()), ck.config));
  }
  if (grids.empty()) fail(ErrorCode::kEmptyInput, o.clouds + ": no clouds found");
  const auto z = encode_all(grids, ck.params, ck.config, g.threads);
  EmbeddingStore store(static_cast<std::uint32_t>(ck.config.d_out));
  for (std::size_t i = 0; i < ids.size(); ++i) store.put(ids[i], Modality::kLidar, z[i]);
  write_store(store, o.out);
  out << nlohmann::json{{"output", o.out}, {"embedded", ids.size()}, {"dim", store.dim()}}.dump() << "\n";
  return kOk;
}

inline std::shared_ptr<const TextEmbedder> make_embedder(const std::string& url, const Snapshot& snap) {
  if (!url.empty()) return std::make_shared<RemoteTextEmbedder>(url, snap.store.dim());
  return std::make_shared<TableTextEmbedder>(std::make_shared<const EmbeddingStore>(snap.store));
}

/// Builds the same request body the HTTP API takes and runs the same handler,
/// so CLI and service answers cannot drift apart.
inline nlohmann::json query_body(const QueryOpts& o) {
  nlohmann::json prompts = nlohmann::json::object();
  std::string strategy = o.strategy;
  if (!o.modality.empty()) {
    auto m = parse_modality(o.modality);
    if (!m || *m == Modality::kText) fail(ErrorCode::kInvalidArgument, "--modality must be image or lidar");
    if (o.labels.empty()) fail(ErrorCode::kInvalidArgument, "--modality needs at least one --prompt-label");
    if (strategy.empty()) strategy = *m == Modality::kImage ? "image_only" : "lidar_only";
    prompts[std::string(to_string(*m))] = o.labels;
  } else if (!o.labels.empty()) {
    prompts["image"] = prompts["lidar"] = o.labels;
  }
  if (!o.image_prompts.empty()) prompts["image"] = o.image_prompts;
  if (!o.lidar_prompts.empty()) prompts["lidar"] = o.lidar_prompts;
  if (strategy.empty()) fail(ErrorCode::kInvalidArgument, "give --modality or --strategy");
  nlohmann::json body{{"strategy", strategy}, {"k", o.k}, {"prompts", prompts}};
  if (o.candidate_k > 0) body["candidate_k"] = o.candidate_k;
  return body;
}

/// Exit code for a failed handler response, recovered from its error code.
inline int response_exit_code(const ApiResponse& res) {
  const auto code = res.body.value("code", std::string());
  for (int c = 0; c <= static_cast<int>(ErrorCode::kUnavailable); ++c) {
    if (to_string(static_cast<ErrorCode>(c)) == code) return exit_code_for(static_cast<ErrorCode>(c));
  }
  return kData;  // prompt_not_found and anything unexpected
}

inline int run_query(const QueryOpts& o, std::ostream& out, std::ostream& err) {
  const auto body = query_body(o);
  Snapshot snap;
  snap.store = read_stores(o.stores);
  const auto embedder = make_embedder(o.embedder_url, snap);
  const auto res = handle_query(snap, *embedder, body, false);
  if (res.status != 200) {
    err << "error: " << res.body.value("message", "query failed") << "\n";
    return response_exit_code(res);
  }
  out << res.body.dump() << "\n";
  return kOk;
}

inline int run_eval(const EvalOpts& o, const Globals& g, std::ostream& out) {
  const auto ks = parse_ks(o.ks);
  MetricReport report;
  if (!o.synthetic.empty()) {
    // --seed is the default world seed; an explicit seed=... in --synthetic wins.
    auto spec = parse_synthetic_spec("seed=" + std::to_string(g.seed) + "," + o.synthetic);
    if (o.ablation == "fusion") {
      report = run_synthetic_fusion_ablation(spec, parse_strategies(o.strategies), ks);
    } else if (o.ablation == "loss") {
      LossAblationSpec ls;
      ls.corpus = spec;
      ls.ks = ks;
      if (!o.seeds.empty()) ls.seeds = o.seeds;
      else ls.seeds = {spec.seed};
      if (o.steps > 0) ls.train.total_steps = o.steps;
      ls.train.threads = g.threads;
      report = run_loss_ablation(ls);
    } else {
      fail(ErrorCode::kInvalidArgument, "--ablation must be fusion or loss");
    }
  } else {
    if (o.stores.empty() || o.annotations.empty()) {
      fail(ErrorCode::kInvalidArgument, "eval needs --synthetic, or --store and --annotations");
    }
    if (o.ablation != "fusion") fail(ErrorCode::kInvalidArgument, "the loss ablation only runs on --synthetic corpora");
    const auto store = read_stores(o.stores);
    const auto gt = build_ground_truth(read_annotations(o.annotations), {o.nearby, false});
    AblationSpec spec;
    spec.methods = parse_strategies(o.strategies);
    spec.ks = ks;
    if (!o.labels.empty()) {
      spec.labels = o.labels;
    } else {
      // Only labels that have prompts can be evaluated.
      const auto have = prompt_labels(store);
      const std::set<std::string> with_prompts(have.begin(), have.end());
      for (const auto& l : gt.labels()) {
        if (with_prompts.count(l)) spec.labels.push_back(l);
      }
      if (spec.labels.empty()) fail(ErrorCode::kNotFound, "no ground-truth label has prompt embeddings in the store");
    }
    spec.config = {{"kind", "fusion"}, {"stores", o.stores}, {"annotations", o.annotations}, {"nearby_threshold", o.nearby}};
    report = run_ablation(store, gt, store, spec);
  }
  std::string text;
  if (o.format == "json") text = report.to_json().dump(2) + "\n";
  else if (o.format == "table") text = render_table(report);
  else fail(ErrorCode::kInvalidArgument, "--format must be table or json");
  if (o.out.empty()) out << text;
  else write_text(o.out, text);
  return kOk;
}

namespace detail {
inline std::atomic<Server*> g_serving{nullptr};
inline void on_sigint(int) {
  if (auto* s = g_serving.load()) s->stop();
}
}  // namespace detail

inline Snapshot load_snapshot(const std::vector<std::string>& stores, const std::string& clouds, const std::string& annotations) {
  Snapshot snap;
  if (!stores.empty()) snap.store = read_stores(stores);
  if (!clouds.empty()) {
    for (const auto& f : cloud_files(clouds)) snap.clouds[f.stem().string()] = read_cloud_any(f.string());
  }
  if (!annotations.empty()) {
    for (auto& a : read_annotations(annotations)) snap.annotations[a.sample_id] = std::move(a);
  }
  return snap;
}

inline int run_serve(const ServeOpts& o, std::ostream& out, std::ostream& err) {
  auto snap = load_snapshot(o.stores, o.clouds, o.annotations);
  auto embedder = make_embedder(o.embedder_url, snap);
  Server server(std::move(snap), embedder);
  if (!server.bind(o.host, o.port)) {
    err << "error: cannot bind " << o.host << ":" << o.port << "\n";
    return kData;
  }
  detail::g_serving = &server;
  auto prev = std::signal(SIGINT, detail::on_sigint);
  out << "serving on http://" << o.host << ":" << o.port << "/v1" << std::endl;
  server.run();
  std::signal(SIGINT, prev);
  detail::g_serving = nullptr;
  return kOk;
}

// ---------------------------------------------------------------------------
// Dispatch

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"lidarclip: lidar/image/text embedding distillation and retrieval", "lidarclip"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for initialization, batching and synthetic corpora")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker thread cap")->check(CLI::PositiveNumber)->capture_default_str();

  IngestCloudOpts ic;
  auto* c_ic = app.add_subcommand("ingest-cloud", "Crop point clouds to the camera frustum and write LCPC files");
  c_ic->add_option("--input", ic.input, "Cloud file (.lcpc or raw float32 xyzi .bin) or a directory of them")->required();
  c_ic->add_option("--calib", ic.calib, "Calibration JSON (intrinsic, extrinsic, width, height)")->required();
  c_ic->add_option("--out", ic.out, "Output file, or directory when --input is a directory")->required();
  c_ic->add_option("--intensity-max", ic.intensity_max, "Divide raw intensities by this value (0 = keep)");

  IngestEmbeddingsOpts ie;
  auto* c_ie = app.add_subcommand("ingest-embeddings", "Validate and merge LCEB embedding stores");
  c_ie->add_option("--input", ie.inputs, "Input store (repeatable)")->required();
  c_ie->add_option("--out", ie.out, "Merged output store")->required();

  TrainOpts tr;
  auto* c_tr = app.add_subcommand("train", "Distill image embeddings into the lidar encoder");
  c_tr->add_option("--pairs", tr.pairs, "Directory with image.lceb and clouds/<id>.lcpc");
  c_tr->add_option("--synthetic", tr.synthetic, "Train on a synthetic world instead, e.g. seed=1,n=64,concepts=8");
  c_tr->add_option("--config", tr.config, "Encoder config JSON, or tiny / tiny:<d_out>")->capture_default_str();
  c_tr->add_option("--steps", tr.steps, "Optimizer steps")->check(CLI::NonNegativeNumber)->capture_default_str();
  c_tr->add_option("--loss", tr.loss, "mse or cosine")->check(CLI::IsMember({"mse", "cosine"}))->capture_default_str();
  c_tr->add_option("--max-lr", tr.max_lr, "Peak learning rate")->capture_default_str();
  c_tr->add_option("--base-lr", tr.base_lr, "Learning rate at step 0")->capture_default_str();
  c_tr->add_option("--final-lr", tr.final_lr, "Learning rate at the last step")->capture_default_str();
  c_tr->add_option("--warmup", tr.warmup, "Fraction of steps spent warming up")->capture_default_str();
  c_tr->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
  c_tr->add_option("--out", tr.out, "Checkpoint path (config JSON goes to <out>.json)")->required();
  c_tr->add_option("--log", tr.log, "JSONL file receiving one record per step");

  EmbedOpts em;
  auto* c_em = app.add_subcommand("embed", "Encode clouds with a trained checkpoint into a lidar store");
  c_em->add_option("--checkpoint", em.checkpoint, "Checkpoint written by train")->required();
  c_em->add_option("--clouds", em.clouds, "Cloud file or directory; sample id is the file stem")->required();
  c_em->add_option("--out", em.out, "Output LCEB store")->required();

  QueryOpts q;
  auto* c_q = app.add_subcommand("query", "Rank samples for a text query; prints JSON");
  c_q->add_option("--store", q.stores, "LCEB store(s) with corpus and prompt embeddings (repeatable)")->required();
  c_q->add_option("--modality", q.modality, "Single-modality search: image or lidar");
  c_q->add_option("--prompt-label", q.labels, "Prompt label or text (repeatable; ensembled)");
  c_q->add_option("--strategy", q.strategy, "Fusion strategy (default: <modality>_only)");
  c_q->add_option("--image-prompt", q.image_prompts, "Image-side prompt for joint strategies (repeatable)");
  c_q->add_option("--lidar-prompt", q.lidar_prompts, "Lidar-side prompt for joint strategies (repeatable)");
  c_q->add_option("--k", q.k, "Results to return")->capture_default_str();
  c_q->add_option("--candidate-k", q.candidate_k, "First-stage size for rerank strategies");
  c_q->add_option("--embedder-url", q.embedder_url, "Remote /embed service for free-text prompts");

  EvalOpts ev;
  auto* c_ev = app.add_subcommand("eval", "Precision@k ablations over stored or synthetic corpora");
  c_ev->add_option("--synthetic", ev.synthetic, "seed=..,n=..,concepts=..,noise=..[,complementary]");
  c_ev->add_option("--ablation", ev.ablation, "fusion or loss")->check(CLI::IsMember({"fusion", "loss"}))->capture_default_str();
  c_ev->add_option("--store", ev.stores, "Corpus store(s) including prompt embeddings (repeatable)");
  c_ev->add_option("--annotations", ev.annotations, "Annotation JSONL for stored corpora");
  c_ev->add_option("--strategy", ev.strategies, "Strategies to compare (repeatable; default all)");
  c_ev->add_option("--label", ev.labels, "Labels to evaluate (repeatable; default all with prompts)");
  c_ev->add_option("--ks", ev.ks, "Comma-separated cutoffs")->capture_default_str();
  c_ev->add_option("--nearby-threshold", ev.nearby, "Ground-plane distance for 'nearby' labels, metres")->capture_default_str();
  c_ev->add_option("--steps", ev.steps, "Training steps per encoder (loss ablation)");
  c_ev->add_option("--seeds", ev.seeds, "World seeds averaged by the loss ablation (default: the corpus seed)");
  c_ev->add_option("--format", ev.format, "table or json")->check(CLI::IsMember({"table", "json"}))->capture_default_str();
  c_ev->add_option("--out", ev.out, "Write the report here instead of stdout");

  ServeOpts sv;
  auto* c_sv = app.add_subcommand("serve", "Serve the /v1 HTTP API");
  c_sv->add_option("--store", sv.stores, "LCEB store(s) (repeatable)");
  c_sv->add_option("--clouds", sv.clouds, "Directory of LCPC clouds for sample browsing");
  c_sv->add_option("--annotations", sv.annotations, "Annotation JSONL");
  c_sv->add_option("--embedder-url", sv.embedder_url, "Remote /embed service for free-text prompts");
  c_sv->add_option("--host", sv.host, "Bind address")->capture_default_str();
  c_sv->add_option("--port", sv.port, "Port")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "usage: lidarclip [--seed N] [--threads N] <ingest-cloud|ingest-embeddings|train|embed|query|eval|serve> ...\n";
    return kUsage;
  }

  try {
    if (c_ic->parsed()) return run_ingest_cloud(ic, out);
    if (c_ie->parsed()) return run_ingest_embeddings(ie, out);
    if (c_tr->parsed()) return run_train(tr, g, out);
    if (c_em->parsed()) return run_embed(em, g, out);
    if (c_q->parsed()) return run_query(q, out, err);
    if (c_ev->parsed()) return run_eval(ev, g, out);
    if (c_sv->parsed()) return run_serve(sv, out, err);
  } catch (const NumericError& e) {
    err << "error: numeric: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const Error& e) {
    err << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv{"lidarclip"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace lidarclip::cli
