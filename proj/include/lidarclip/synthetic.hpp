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

// Seeded synthetic corpora with known positives. Each sample holds a subset
// of K orthonormal "concept" vectors; its image and lidar embeddings are the
// normalized concept mixture plus Gaussian noise, rescaled to unit length
// like typical CLIP features. Each concept also gets a few
// noisy text prompts. Point clouds with one object per concept let the
// encoder be trained on the same samples.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "lidarclip/distill.hpp"
#include "lidarclip/encoder.hpp"
#include "lidarclip/error.hpp"
#include "lidarclip/evalharness.hpp"
#include "lidarclip/fusion.hpp"
#include "lidarclip/retrieval.hpp"
#include "lidarclip/store.hpp"

namespace lidarclip {

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t n_samples = 256;
  int n_concepts = 8;
  double sigma_image = 0.0;  // per-dimension noise std
  double sigma_lidar = 0.0;
  bool complementary = false;  // image noise on one half of the samples, lidar noise on the other
  int dim = 0;  // 0 = n_concepts
  double membership = 0.25;    // per-concept inclusion probability
  double prompt_noise = 0.05;  // norm of the perturbation applied to each template
  int templates = 4;
  // Samples are drawn from this stream; concepts and prompts only depend on
  // `seed`, so streams 0 and 1 give disjoint samples of the same world.
  std::uint64_t stream = 0;

  void validate() const {
    if (n_concepts < 2) fail(ErrorCode::kInvalidArgument, "synthetic corpus needs at least two concepts");
    if (n_samples == 0) fail(ErrorCode::kInvalidArgument, "synthetic corpus needs at least one sample");
    if (!(sigma_image >= 0) || !(sigma_lidar >= 0)) fail(ErrorCode::kInvalidArgument, "noise must be non-negative");
    if (dim != 0 && dim < n_concepts) fail(ErrorCode::kInvalidArgument, "dimension must be at least the number of concepts");
    if (!(membership > 0 && membership <= 1)) fail(ErrorCode::kInvalidArgument, "membership rate must lie in (0, 1]");
    if (!(prompt_noise >= 0)) fail(ErrorCode::kInvalidArgument, "prompt noise must be non-negative");
    if (templates < 1) fail(ErrorCode::kInvalidArgument, "need at least one template per concept");
  }

  int embedding_dim() const { return dim == 0 ? n_concepts : dim; }

  nlohmann::json to_json() const {
    return {{"seed", seed},           {"n_samples", n_samples},         {"n_concepts", n_concepts},
            {"sigma_image", sigma_image}, {"sigma_lidar", sigma_lidar}, {"complementary", complementary},
            {"dim", embedding_dim()},             {"membership", membership},       {"prompt_noise", prompt_noise},
            {"templates", templates}, {"stream", stream}};
  }
};

inline constexpr int kSyntheticGroundPoints = 24;
inline constexpr int kSyntheticObjectPoints = 6;

inline std::string concept_label(int c) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "concept_%02d", c);
  return buf;
}

inline std::string synthetic_id(std::uint64_t stream, std::size_t i) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "syn%llu-%06zu", static_cast<unsigned long long>(stream), i);
  return buf;
}

struct SyntheticCorpus {
  SyntheticSpec spec;
  EmbeddingStore store;  // image + lidar per sample, text prompts as "prompt:<label>:<i>"
  GroundTruth truth;
  std::vector<PromptSet> prompts;
  std::vector<std::vector<double>> concepts;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> members;  // concept indices per sample, ascending
};

namespace detail {

// Independent generator per (seed, purpose, stream).
inline std::mt19937_64 synthetic_rng(std::uint64_t seed, std::uint64_t purpose, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

inline std::vector<std::vector<double>> orthonormal_concepts(std::mt19937_64& rng, int k, int d) {
  std::normal_distribution<double> n01(0, 1);
  std::vector<std::vector<double>> out;
  while (static_cast<int>(out.size()) < k) {
    std::vector<double> v(d);
    for (double& x : v) x = n01(rng);
    for (const auto& u : out) {
      const double p = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (int i = 0; i < d; ++i) v[i] -= p * u[i];
    }
    const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace detail

/// Concept membership per sample for (spec.seed, spec.stream). Every sample
/// holds at least one concept.
inline std::vector<std::vector<int>> synthetic_membership(const SyntheticSpec& spec) {
  auto rng = detail::synthetic_rng(spec.seed, 2, spec.stream);
  std::bernoulli_distribution in(spec.membership);
  std::uniform_int_distribution<int> pick(0, spec.n_concepts - 1);
  std::vector<std::vector<int>> out(spec.n_samples);
  for (auto& m : out) {
    for (int c = 0; c < spec.n_concepts; ++c) {
      if (in(rng)) m.push_back(c);
    }
    if (m.empty()) m.push_back(pick(rng));
  }
  return out;
}

inline SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus out;
  out.spec = spec;
  const int d = spec.embedding_dim();
  auto concept_rng = detail::synthetic_rng(spec.seed, 1);
  out.concepts = detail::orthonormal_concepts(concept_rng, spec.n_concepts, d);
  out.members = synthetic_membership(spec);

  auto noise_rng = detail::synthetic_rng(spec.seed, 3, spec.stream);
  std::normal_distribution<double> n01(0, 1);
  // Which half each sample falls in for complementary corruption.
  std::vector<std::size_t> order(spec.n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), noise_rng);
  std::vector<bool> image_half(spec.n_samples, false);
  for (std::size_t r = 0; r < spec.n_samples / 2; ++r) image_half[order[r]] = true;

  out.store = EmbeddingStore(static_cast<std::uint32_t>(d));
  std::vector<float> buf(d);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    const std::string id = synthetic_id(spec.stream, i);
    out.ids.push_back(id);
    std::vector<double> mix(d, 0.0);
    for (int c : out.members[i]) {
      for (int j = 0; j < d; ++j) mix[j] += out.concepts[c][j];
    }
    const double mn = std::sqrt(std::inner_product(mix.begin(), mix.end(), mix.begin(), 0.0));
    for (double& x : mix) x /= mn;
    for (Modality m : {Modality::kImage, Modality::kLidar}) {
      double sigma = m == Modality::kImage ? spec.sigma_image : spec.sigma_lidar;
      if (spec.complementary && image_half[i] != (m == Modality::kImage)) sigma = 0.0;
      std::vector<double> v(d);
      for (int j = 0; j < d; ++j) v[j] = mix[j] + sigma * n01(noise_rng);  // drawn even at sigma 0, keeps streams aligned
      const double vn = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      for (int j = 0; j < d; ++j) buf[j] = static_cast<float>(v[j] / vn);
      out.store.put(id, m, buf);
    }
  }

  auto prompt_rng = detail::synthetic_rng(spec.seed, 4);
  const double per_dim = spec.prompt_noise / std::sqrt(static_cast<double>(d));
  for (int c = 0; c < spec.n_concepts; ++c) {
    PromptSet ps{concept_label(c), {}};
    for (int t = 0; t < spec.templates; ++t) {
      std::vector<float> v(d);
      for (int j = 0; j < d; ++j) v[j] = static_cast<float>(out.concepts[c][j] + per_dim * n01(prompt_rng));
      out.store.put(prompt_key(ps.name, static_cast<std::size_t>(t)), Modality::kText, v);
      ps.templates.push_back(std::move(v));
    }
    out.prompts.push_back(std::move(ps));
  }

  out.truth.corpus = out.ids;
  std::sort(out.truth.corpus.begin(), out.truth.corpus.end());
  for (int c = 0; c < spec.n_concepts; ++c) out.truth.positives[concept_label(c)];
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    for (int c : out.members[i]) out.truth.positives[concept_label(c)].insert(out.ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Point clouds for the same samples.

/// Lidar-frame cloud: a sparse ground layer plus one compact object per
/// concept. An object fills part of one voxel; concept c sits at its own
/// offset on a circle around the voxel center, with its own intensity and
/// height, so each concept is separable from voxel features alone. Which
/// voxel holds it is random.
inline PointCloud synthetic_cloud(const std::vector<int>& concepts, int n_concepts, const EncoderConfig& enc,
                                  std::mt19937_64& rng) {
  const auto& r = enc.pc_range;
  std::uniform_real_distribution<double> ux(r[0], r[3]), uy(r[1], r[4]), u01(0, 1);
  std::normal_distribution<double> n01(0, 1);
  PointCloud cloud;
  cloud.frame = Frame::kLidar;
  for (int i = 0; i < kSyntheticGroundPoints; ++i) {
    cloud.points.push_back({ux(rng), uy(rng), r[2] + 0.2 * u01(rng), 0.05 * u01(rng)});
  }
  const auto dims = enc.grid_dims();
  std::uniform_int_distribution<int> gx(0, dims[0] - 1), gy(0, dims[1] - 1);
  const double vx = enc.voxel_size[0], vy = enc.voxel_size[1];
  for (int c : concepts) {
    const double level = (c + 0.5) / n_concepts;
    const double angle = 2.0 * M_PI * c / n_concepts;
    const double cx = r[0] + (gx(rng) + 0.5 + 0.3 * std::cos(angle)) * vx;
    const double cy = r[1] + (gy(rng) + 0.5 + 0.3 * std::sin(angle)) * vy;
    const double height = r[2] + (0.25 + 0.5 * level) * (r[5] - r[2]);
    for (int p = 0; p < kSyntheticObjectPoints; ++p) {
      Point pt{cx + 0.02 * vx * n01(rng), cy + 0.02 * vy * n01(rng), height + 0.05 * n01(rng), level + 0.01 * n01(rng)};
      pt.x = std::clamp(pt.x, r[0], std::nextafter(r[3], r[0]));
      pt.y = std::clamp(pt.y, r[1], std::nextafter(r[4], r[1]));
      pt.z = std::clamp(pt.z, r[2], std::nextafter(r[5], r[2]));
      cloud.points.push_back(pt);
    }
  }
  return cloud;
}

/// Clouds for every sample of the corpus, in sample order.
inline std::vector<PointCloud> synthetic_clouds(const SyntheticCorpus& corpus, const EncoderConfig& enc) {
  auto rng = detail::synthetic_rng(corpus.spec.seed, 5, corpus.spec.stream);
  std::vector<PointCloud> out;
  out.reserve(corpus.members.size());
  for (const auto& m : corpus.members) out.push_back(synthetic_cloud(m, corpus.spec.n_concepts, enc, rng));
  return out;
}

/// (voxelized cloud, image embedding) pairs. The encoder's d_out must equal
/// the corpus dimension.
inline std::vector<TrainPair> synthetic_pairs(const SyntheticCorpus& corpus, const EncoderConfig& enc) {
  if (enc.d_out != corpus.spec.embedding_dim()) fail(ErrorCode::kDimensionMismatch, "encoder d_out differs from corpus dimension");
  auto clouds = synthetic_clouds(corpus, enc);
  std::vector<TrainPair> out;
  out.reserve(clouds.size());
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    out.push_back({voxelize(clouds[i], enc), *corpus.store.find(corpus.ids[i], Modality::kImage)});
  }
  return out;
}

/// Parses "seed=1,n=256,concepts=8,noise=0.8,complementary" (plus optional
/// dim=, membership=, prompt_noise=, templates=, noise_image=, noise_lidar=).
inline SyntheticSpec parse_synthetic_spec(const std::string& text) {
  SyntheticSpec s;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(start, end - start);
    start = end + 1;
    if (item.empty()) continue;
    const auto eq = item.find('=');
    const std::string key = item.substr(0, eq);
    const std::string val = eq == std::string::npos ? "" : item.substr(eq + 1);
    try {
      if (key == "complementary" && eq == std::string::npos) s.complementary = true;
      else if (eq == std::string::npos) fail(ErrorCode::kInvalidArgument, "synthetic option '" + key + "' needs a value");
      else if (key == "seed") s.seed = std::stoull(val);
      else if (key == "n") s.n_samples = std::stoull(val);
      else if (key == "concepts") s.n_concepts = std::stoi(val);
      else if (key == "noise") s.sigma_image = s.sigma_lidar = std::stod(val);
      else if (key == "noise_image") s.sigma_image = std::stod(val);
      else if (key == "noise_lidar") s.sigma_lidar = std::stod(val);
      else if (key == "complementary") s.complementary = val == "1" || val == "true";
      else if (key == "dim") s.dim = std::stoi(val);
      else if (key == "membership") s.membership = std::stod(val);
      else if (key == "prompt_noise") s.prompt_noise = std::stod(val);
      else if (key == "templates") s.templates = std::stoi(val);
      else fail(ErrorCode::kInvalidArgument, "unknown synthetic option '" + key + "'");
    } catch (const std::logic_error&) {
      fail(ErrorCode::kInvalidArgument, "bad value for synthetic option '" + key + "': '" + val + "'");
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Ablations on synthetic corpora

/// Fusion ablation over a freshly generated corpus.
inline MetricReport run_synthetic_fusion_ablation(const SyntheticSpec& spec, std::vector<FusionStrategy> methods,
                                                  std::vector<std::size_t> ks = {1, 10, 100}) {
  const auto corpus = generate_synthetic_corpus(spec);
  AblationSpec a;
  a.methods = std::move(methods);
  a.ks = std::move(ks);
  a.config = {{"kind", "fusion"}, {"synthetic", spec.to_json()}};
  return run_ablation(corpus.store, corpus.truth, corpus.store, a);
}

/// Encoder used for the loss ablation: the tiny layout widened to 16
/// channels, enough to pick up the synthetic concept signatures.
inline EncoderConfig ablation_encoder(int d_out) {
  auto enc = EncoderConfig::tiny(d_out);
  enc.d_model = 16;
  enc.d_ff = 32;
  return enc;
}

struct LossAblationSpec {
  SyntheticSpec corpus = [] {
    SyntheticSpec s;
    s.sigma_image = s.sigma_lidar = 0.5;
    return s;
  }();
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // world seeds; overrides corpus.seed
  std::optional<EncoderConfig> encoder;            // default: ablation_encoder(dim)
  TrainConfig train = [] {
    TrainConfig t;
    t.total_steps = 2000;
    t.max_lr = 3e-3;
    t.batch_size = 16;
    return t;
  }();
  std::vector<LossKind> losses{LossKind::kMse, LossKind::kCosine};
  std::vector<std::size_t> ks{1, 10, 100};
};

/// For every seed: train one encoder per loss on stream 0 of the world
/// (image embeddings as targets), embed the clouds of stream 1 and run
/// lidar-only retrieval with the concept prompts. Precisions are averaged
/// over seeds.
inline MetricReport run_loss_ablation(const LossAblationSpec& spec) {
  if (spec.seeds.empty()) fail(ErrorCode::kInvalidArgument, "loss ablation needs at least one seed");
  if (spec.ks.empty()) fail(ErrorCode::kInvalidArgument, "loss ablation needs at least one k");
  const int d = spec.corpus.embedding_dim();
  const EncoderConfig enc = spec.encoder.value_or(ablation_encoder(d));
  if (enc.d_out != d) fail(ErrorCode::kDimensionMismatch, "encoder d_out differs from corpus dimension");
  auto ks = spec.ks;
  std::sort(ks.begin(), ks.end());

  std::map<std::tuple<std::string, std::string, std::size_t>, double> sums;
  for (std::uint64_t seed : spec.seeds) {
    SyntheticSpec train_spec = spec.corpus;
    train_spec.seed = seed;
    train_spec.stream = 0;
    SyntheticSpec eval_spec = train_spec;
    eval_spec.stream = 1;
    const auto train_corpus = generate_synthetic_corpus(train_spec);
    const auto eval_corpus = generate_synthetic_corpus(eval_spec);
    const auto pairs = synthetic_pairs(train_corpus, enc);
    std::vector<VoxelGrid> eval_grids;
    for (const auto& c : synthetic_clouds(eval_corpus, enc)) eval_grids.push_back(voxelize(c, enc));

    for (LossKind kind : spec.losses) {
      TrainConfig cfg = spec.train;
      cfg.loss = kind;
      cfg.seed = seed;
      auto params = init_params<float>(enc, seed);
      train<float>(std::span<const TrainPair>(pairs), params, enc, cfg);
      EmbeddingStore lidar(static_cast<std::uint32_t>(d));
      for (std::size_t i = 0; i < eval_grids.size(); ++i) {
        const auto z = encode(eval_grids[i], params, enc);
        lidar.put(eval_corpus.ids[i], Modality::kLidar, std::vector<float>(z.begin(), z.end()));
      }
      const auto view = lidar.view(Modality::kLidar);
      for (const auto& ps : eval_corpus.prompts) {
        const auto q = ensemble(ps);
        const auto ranked = top_k(q, view, ks.back());
        for (auto k : ks) {
          sums[{ps.name, std::string(to_string(kind)), k}] +=
              precision_at_k(ranked, eval_corpus.truth.positives.at(ps.name), k);
        }
      }
    }
  }

  MetricReport report;
  report.corpus_size = spec.corpus.n_samples;
  nlohmann::json losses = nlohmann::json::array();
  for (auto l : spec.losses) losses.push_back(std::string(to_string(l)));
  report.config = {{"kind", "loss"},
                   {"synthetic", spec.corpus.to_json()},
                   {"seeds", spec.seeds},
                   {"encoder", to_json(enc)},
                   {"steps", spec.train.total_steps},
                   {"max_lr", spec.train.max_lr},
                   {"batch_size", spec.train.batch_size},
                   {"losses", losses},
                   {"ks", ks}};
  for (const auto& [key, sum] : sums) {
    report.rows.push_back({std::get<0>(key), std::get<1>(key), std::get<2>(key), sum / static_cast<double>(spec.seeds.size())});
  }
  return report;
}

}  // namespace lidarclip
