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

// End-to-end tour on a synthetic world: distill image embeddings into the
// lidar encoder, embed held-out clouds, then search them by text prompt
// alone and together with the image embeddings.

#include <cstdio>

#include "lidarclip/distill.hpp"
#include "lidarclip/encoder.hpp"
#include "lidarclip/evalharness.hpp"
#include "lidarclip/fusion.hpp"
#include "lidarclip/synthetic.hpp"

int main() {
  using namespace lidarclip;

  SyntheticSpec spec;
  spec.sigma_image = spec.sigma_lidar = 0.5;
  const auto world = generate_synthetic_corpus(spec);  // stream 0: training pairs
  spec.stream = 1;
  const auto held_out = generate_synthetic_corpus(spec);

  const auto enc = ablation_encoder(spec.embedding_dim());
  const auto pairs = synthetic_pairs(world, enc);
  TrainConfig cfg;
  cfg.total_steps = 1000;
  cfg.max_lr = 3e-3;
  auto params = init_params<float>(enc, 0);
  const auto history = train<float>(std::span<const TrainPair>(pairs), params, enc, cfg);
  std::printf("trained %zu params on %zu pairs: loss %.4f -> %.4f\n", params.values.size(), pairs.size(),
              history.front().loss, history.back().loss);

  // Replace the held-out lidar vectors with real encoder outputs.
  EmbeddingStore corpus = held_out.store;
  const auto clouds = synthetic_clouds(held_out, enc);
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    const auto z = encode(voxelize(clouds[i], enc), params, enc);
    corpus.put(held_out.ids[i], Modality::kLidar, z);
  }

  const auto& prompt = held_out.prompts[2];
  const auto q = ensemble(prompt);
  const auto& positives = held_out.truth.positives.at(prompt.name);
  for (auto s : {FusionStrategy::kLidarOnly, FusionStrategy::kImageOnly, FusionStrategy::kMeanFeature}) {
    const auto ranked = to_ranked_list(joint_query(s, {q, q}, corpus, 10));
    std::printf("%-14s P@10 for '%s' = %.2f  top hit %s\n", std::string(to_string(s)).c_str(), prompt.name.c_str(),
                precision_at_k(ranked, positives, 10), ranked.front().id.c_str());
  }
  return 0;
}
